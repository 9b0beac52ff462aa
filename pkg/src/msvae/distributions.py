"""Probability heads: diagonal Gaussians for latent variables, and
Gaussian / Bernoulli / mixture heads for the observed sequence.

Standard deviations are produced as softplus of a linear feature and clamped
to [1e-3, 5.0] at construction; the clamp applies to latent distributions and
the output head alike. Mixture densities use a max-shifted log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import CausalConv1d, Conv1dSpec
from .tensor import Graph, Tensor

__all__ = [
    "SIGMA_MIN",
    "SIGMA_MAX",
    "DiagGaussian",
    "GaussianParamHead",
    "rsample",
    "kl_diag_gaussians",
    "PredictiveHead",
    "logsumexp",
]

SIGMA_MIN = 1e-3
SIGMA_MAX = 5.0
_LOG_2PI = float(np.log(2.0 * np.pi))


class DiagGaussian:
    """Mean/std tensor pair; the std is clamped into [1e-3, 5] on construction."""

    def __init__(self, mean: Tensor, std: Tensor, clamp_std: bool = True):
        if mean.shape != std.shape:
            raise ValueError(f"mean shape {mean.shape} != std shape {std.shape}")
        self.mean = mean
        self.std = T.clamp(std, SIGMA_MIN, SIGMA_MAX) if clamp_std else std

    @property
    def shape(self):
        return self.mean.shape

    def log_prob(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.mean.dtype))
        d = (x - self.mean) / self.std
        return -0.5 * T.square(d) - T.log(self.std) - 0.5 * _LOG_2PI


def rsample(d: DiagGaussian, noise) -> Tensor:
    """Reparameterized draw z = mean + std*eps; gradients flow to both."""
    eps = noise if isinstance(noise, Tensor) else Tensor(np.asarray(noise, dtype=d.mean.dtype))
    if eps.shape != d.mean.shape:
        raise ValueError(f"noise shape {eps.shape} != distribution shape {d.mean.shape}")
    return d.mean + d.std * eps


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Per-dimension KL(q || p) in closed form:
    log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2."""
    if q.shape != p.shape:
        raise ValueError(f"KL shapes differ: {q.shape} vs {p.shape}")
    var_p = T.square(p.std)
    quad = (T.square(q.std) + T.square(q.mean - p.mean)) / (var_p * 2.0)
    return (T.log(p.std) - T.log(q.std)) + quad - 0.5


class GaussianParamHead:
    """Two independent 1x1 convolutions mapping features to a DiagGaussian:
    mean is linear, std is clamp(softplus(linear))."""

    def __init__(self, graph: Graph, name: str, in_channels: int, out_channels: int):
        self.mean_conv = CausalConv1d(graph, f"{name}.mean", Conv1dSpec(in_channels, out_channels, 1))
        self.std_conv = CausalConv1d(graph, f"{name}.std", Conv1dSpec(in_channels, out_channels, 1))

    def __call__(self, h: Tensor) -> DiagGaussian:
        return DiagGaussian(self.mean_conv(h), T.softplus(self.std_conv(h)))

    def conv_specs(self) -> list[Conv1dSpec]:
        return [self.mean_conv.spec, self.std_conv.spec]


def logsumexp(x: Tensor, axis: int) -> Tensor:
    """Max-shifted log-sum-exp along one axis (the shift is detached)."""
    m = np.max(x.data, axis=axis, keepdims=True)
    shift = Tensor(np.broadcast_to(m, x.shape).astype(x.dtype, copy=True))
    s = T.tsum(T.exp(x - shift), axis=axis)
    return T.log(s) + Tensor(np.squeeze(m, axis=axis).astype(x.dtype, copy=True))


def _tile_components(y: Tensor, num_components: int) -> Tensor:
    # [B, p, T] -> [B, n_c, p, T] by explicit copies (no implicit broadcasting)
    B, p, t = y.shape
    yr = T.reshape(y, (B, 1, p, t))
    if num_components == 1:
        return yr
    return T.concat([yr] * num_components, axis=1)


def _bernoulli_lp(logits: Tensor, y: Tensor) -> Tensor:
    # y*logit - softplus(logit), elementwise; stable for saturated logits
    return y * logits - T.softplus(logits)


@dataclass(frozen=True)
class PredictiveHead:
    """Distribution over one observation frame, parameterized by a feature
    vector eta of size feature_dim per timestep.

    kinds: gaussian (eta = [means, std features]), bernoulli (eta = logits),
    gaussian_mixture / bernoulli_mixture (eta = [component weight logits,
    component parameters]).
    """

    kind: str
    data_dim: int
    num_components: int = 1

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli", "gaussian_mixture", "bernoulli_mixture"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.kind.endswith("_mixture") and self.num_components < 1:
            raise ValueError("mixture heads need at least one component")

    @property
    def feature_dim(self) -> int:
        p, n = self.data_dim, self.num_components
        if self.kind == "gaussian":
            return 2 * p
        if self.kind == "bernoulli":
            return p
        if self.kind == "gaussian_mixture":
            return 2 * p * n + n
        return p * n + n

    def _check_eta(self, eta_channels: int) -> None:
        if eta_channels != self.feature_dim:
            raise ValueError(
                f"{self.kind} head needs {self.feature_dim} features, got {eta_channels}"
            )

    def log_prob(self, eta: Tensor, y) -> Tensor:
        """Per-timestep log-likelihood [batch, time], summed over data dims."""
        self._check_eta(eta.shape[1])
        y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=eta.dtype))
        B, _, t = eta.shape
        p, n = self.data_dim, self.num_components
        if self.kind == "gaussian":
            mean = T.narrow(eta, 1, 0, p)
            std = T.clamp(T.softplus(T.narrow(eta, 1, p, p)), SIGMA_MIN, SIGMA_MAX)
            d = DiagGaussian(mean, std, clamp_std=False)
            return T.tsum(d.log_prob(y), axis=1)
        if self.kind == "bernoulli":
            return T.tsum(_bernoulli_lp(eta, y), axis=1)
        # mixtures: component log-densities [B, n, T] plus log weights
        w_logits = T.narrow(eta, 1, 0, n)
        log_w = w_logits - _tile_like(logsumexp(w_logits, axis=1), n)
        yt = _tile_components(y, n)
        if self.kind == "gaussian_mixture":
            mean = T.reshape(T.narrow(eta, 1, n, n * p), (B, n, p, t))
            std = T.clamp(
                T.softplus(T.reshape(T.narrow(eta, 1, n + n * p, n * p), (B, n, p, t))),
                SIGMA_MIN,
                SIGMA_MAX,
            )
            d = DiagGaussian(mean, std, clamp_std=False)
            comp = T.tsum(d.log_prob(yt), axis=2)
        else:
            logits = T.reshape(T.narrow(eta, 1, n, n * p), (B, n, p, t))
            comp = T.tsum(_bernoulli_lp(logits, yt), axis=2)
        return logsumexp(comp + log_w, axis=1)

    # -- sampling paths operate on raw arrays; no gradients are needed there

    def _split_np(self, eta: np.ndarray):
        p, n = self.data_dim, self.num_components
        B, _, t = eta.shape
        if self.kind == "gaussian":
            mean = eta[:, :p]
            std = np.clip(np.logaddexp(0.0, eta[:, p:]), SIGMA_MIN, SIGMA_MAX)
            return mean, std
        if self.kind == "bernoulli":
            return (eta,)
        w = _softmax_np(eta[:, :n], axis=1)
        if self.kind == "gaussian_mixture":
            mean = eta[:, n : n + n * p].reshape(B, n, p, t)
            std = np.clip(np.logaddexp(0.0, eta[:, n + n * p :]), SIGMA_MIN, SIGMA_MAX).reshape(
                B, n, p, t
            )
            return w, mean, std
        logits = eta[:, n:].reshape(B, n, p, t)
        return w, logits

    def sample(self, eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Ancestral sample [batch, data_dim, time]: pick a mixture component
        from the softmax weights, then draw from it."""
        self._check_eta(eta.shape[1])
        if self.kind == "gaussian":
            mean, std = self._split_np(eta)
            return mean + std * rng.standard_normal(mean.shape)
        if self.kind == "bernoulli":
            prob = T._sigmoid_stable(eta)
            return (rng.random(prob.shape) < prob).astype(eta.dtype)
        if self.kind == "gaussian_mixture":
            w, mean, std = self._split_np(eta)
            idx = _pick_component(w, rng)
            m = np.take_along_axis(mean, idx[:, None, None, :], axis=1)[:, 0]
            s = np.take_along_axis(std, idx[:, None, None, :], axis=1)[:, 0]
            return m + s * rng.standard_normal(m.shape)
        w, logits = self._split_np(eta)
        idx = _pick_component(w, rng)
        l = np.take_along_axis(logits, idx[:, None, None, :], axis=1)[:, 0]
        prob = T._sigmoid_stable(l)
        return (rng.random(prob.shape) < prob).astype(eta.dtype)

    def mean(self, eta: np.ndarray) -> np.ndarray:
        """Expected value of the head; the deterministic generation path."""
        self._check_eta(eta.shape[1])
        if self.kind == "gaussian":
            return self._split_np(eta)[0].copy()
        if self.kind == "bernoulli":
            return T._sigmoid_stable(eta)
        if self.kind == "gaussian_mixture":
            w, mean, _ = self._split_np(eta)
            return (w[:, :, None, :] * mean).sum(axis=1)
        w, logits = self._split_np(eta)
        return (w[:, :, None, :] * T._sigmoid_stable(logits)).sum(axis=1)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _pick_component(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # w: [B, n_c, T] softmax weights -> index [B, T]
    cdf = np.cumsum(w, axis=1)
    u = rng.random((w.shape[0], 1, w.shape[2]))
    return np.minimum((u > cdf).sum(axis=1), w.shape[1] - 1)


def _tile_like(x: Tensor, n: int) -> Tensor:
    # [B, T] -> [B, n, T] by explicit copies
    B, t = x.shape
    xr = T.reshape(x, (B, 1, t))
    if n == 1:
        return xr
    return T.concat([xr] * n, axis=1)
