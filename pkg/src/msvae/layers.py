"""Causal 1-d convolution primitives and gated residual (Wavenet-style) blocks.

All activations are laid out [batch, channels, time]. Convolutions are
always causal: output position t never sees input positions > t*stride.
Downsampling blocks average the identity path over non-overlapping windows
and stride the gate convolution; upsampling blocks nearest-neighbor repeat
the identity path and run the gate as a strided transposed convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import tensor as T
from .tensor import Graph, Tensor

__all__ = [
    "Conv1dSpec",
    "CausalConv1d",
    "TransposedConv1d",
    "WavenetBlock",
    "WavenetStackSpec",
    "WavenetStack",
    "receptive_field",
]


@dataclass(frozen=True)
class Conv1dSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    dilation: int = 1
    stride: int = 1
    causal: bool = True
    transposed: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size, self.dilation, self.stride) < 1:
            raise ValueError(f"Conv1dSpec extents must be positive: {self}")

    @property
    def span(self) -> int:
        """Number of input steps one output step can see."""
        return (self.kernel_size - 1) * self.dilation + 1

    @property
    def param_count(self) -> int:
        return self.in_channels * self.out_channels * self.kernel_size + self.out_channels


class CausalConv1d:
    def __init__(self, graph: Graph, name: str, spec: Conv1dSpec):
        self.spec = spec
        self.w = graph.parameter(
            f"{name}.w",
            (spec.out_channels, spec.in_channels, spec.kernel_size),
            fan_in=spec.in_channels * spec.kernel_size,
        )
        self.b = graph.parameter(f"{name}.b", (spec.out_channels,))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"conv expects {self.spec.in_channels} channels, input has {x.shape[1]}"
            )
        return T.conv1d(x, self.w, self.b, stride=self.spec.stride, dilation=self.spec.dilation)


class TransposedConv1d:
    """Upsampling convolution; kernel width equals the stride, so output
    length is exactly time*stride and no cropping is needed."""

    def __init__(self, graph: Graph, name: str, in_channels: int, out_channels: int, stride: int):
        self.spec = Conv1dSpec(in_channels, out_channels, stride, stride=stride, transposed=True)
        self.w = graph.parameter(
            f"{name}.w", (out_channels, in_channels, stride), fan_in=in_channels * stride
        )
        self.b = graph.parameter(f"{name}.b", (out_channels,))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"transposed conv expects {self.spec.in_channels} channels, input has {x.shape[1]}"
            )
        return T.conv_transpose1d(x, self.w, self.b, stride=self.spec.stride)


class WavenetBlock:
    """Gated residual unit: x + Conv1x1(tanh(g_a) * sigmoid(g_b)).

    g_a, g_b are the two halves of one gate convolution over [x, c] (c is the
    optional conditioning sequence, concatenated on the feature axis; the
    identity path carries x alone). With down_stride=S the gate convolution
    is strided and the identity path is the non-overlapping window-S average;
    with up_stride=S the gate is a transposed convolution and the identity
    path is a nearest-neighbor repeat.
    """

    def __init__(
        self,
        graph: Graph,
        name: str,
        filters: int,
        kernel_size: int,
        dilation: int = 1,
        cond_channels: int = 0,
        down_stride: int = 1,
        up_stride: int = 1,
    ):
        if down_stride > 1 and up_stride > 1:
            raise ValueError("a block cannot both downsample and upsample")
        self.filters = filters
        self.cond_channels = cond_channels
        self.down_stride = down_stride
        self.up_stride = up_stride
        gate_in = filters + cond_channels
        if up_stride > 1:
            self.gate = TransposedConv1d(graph, f"{name}.gate", gate_in, 2 * filters, up_stride)
        else:
            self.gate = CausalConv1d(
                graph,
                f"{name}.gate",
                Conv1dSpec(gate_in, 2 * filters, kernel_size, dilation=dilation, stride=down_stride),
            )
        self.out = CausalConv1d(graph, f"{name}.out", Conv1dSpec(filters, filters, 1))

    def __call__(self, x: Tensor, c: Optional[Tensor] = None) -> Tensor:
        if x.shape[1] != self.filters:
            raise ValueError(f"block expects {self.filters} channels, input has {x.shape[1]}")
        if self.cond_channels:
            if c is None:
                raise ValueError("conditional block called without conditioning sequence")
            if c.shape[2] != x.shape[2] or c.shape[0] != x.shape[0]:
                raise ValueError(
                    f"conditioning extents {c.shape} do not match input {x.shape}"
                )
            xc = T.concat([x, c], axis=1)
        else:
            xc = x
        g = self.gate(xc)
        a = T.narrow(g, 1, 0, self.filters)
        b = T.narrow(g, 1, self.filters, self.filters)
        res = self.out(T.mul(T.tanh(a), T.sigmoid(b)))
        if self.down_stride > 1:
            identity = T.avg_pool1d(x, self.down_stride)
        elif self.up_stride > 1:
            identity = T.repeat1d(x, self.up_stride)
        else:
            identity = x
        return T.add(identity, res)

    def conv_specs(self) -> list[Conv1dSpec]:
        return [self.gate.spec, self.out.spec]

    def param_count(self) -> int:
        return sum(s.param_count for s in self.conv_specs())


@dataclass(frozen=True)
class WavenetStackSpec:
    num_blocks: int
    filters: int
    dilations: tuple
    kernel_size: int
    in_channels: int
    conditional: bool = False
    cond_channels: int = 0
    one_by_one: bool = False
    resample: str = "none"  # none | down | up
    resample_stride: int = 1

    def __post_init__(self):
        if len(self.dilations) != self.num_blocks:
            raise ValueError(
                f"{self.num_blocks} blocks need {self.num_blocks} dilation rates, got {len(self.dilations)}"
            )
        if self.resample not in ("none", "down", "up"):
            raise ValueError(f"unknown resample mode {self.resample!r}")
        if self.conditional != (self.cond_channels > 0):
            raise ValueError("conditional stacks must declare cond_channels > 0")
        if self.resample == "down" and self.conditional:
            raise ValueError("downsampling stacks are unconditional here")

    @property
    def block_kernel(self) -> int:
        return 1 if self.one_by_one else self.kernel_size

    def block_dilation(self, i: int) -> int:
        return 1 if self.one_by_one else int(self.dilations[i])


class WavenetStack:
    """1x1 input projection followed by a pile of gated residual blocks.

    Resampling happens inside the first block. Every block consumes the same
    conditioning sequence; once the first block has upsampled, the shared
    conditioning is nearest-neighbor repeated so later blocks see it at the
    fine rate.
    """

    def __init__(self, graph: Graph, name: str, spec: WavenetStackSpec):
        self.spec = spec
        self.in_proj = CausalConv1d(
            graph, f"{name}.in_proj", Conv1dSpec(spec.in_channels, spec.filters, 1)
        )
        self.blocks = []
        for i in range(spec.num_blocks):
            first = i == 0
            self.blocks.append(
                WavenetBlock(
                    graph,
                    f"{name}.block{i}",
                    spec.filters,
                    spec.block_kernel,
                    dilation=spec.block_dilation(i),
                    cond_channels=spec.cond_channels,
                    down_stride=spec.resample_stride if (first and spec.resample == "down") else 1,
                    up_stride=spec.resample_stride if (first and spec.resample == "up") else 1,
                )
            )

    def __call__(self, x: Tensor, c: Optional[Tensor] = None) -> Tensor:
        h = self.in_proj(x)
        cur_c = c
        for i, block in enumerate(self.blocks):
            h = block(h, cur_c)
            if i == 0 and self.spec.resample == "up" and self.spec.resample_stride > 1 and cur_c is not None:
                cur_c = T.repeat1d(cur_c, self.spec.resample_stride)
        return h

    def conv_specs(self) -> list[Conv1dSpec]:
        specs = [self.in_proj.spec]
        for block in self.blocks:
            specs.extend(block.conv_specs())
        return specs

    def param_count(self) -> int:
        return sum(s.param_count for s in self.conv_specs())


def receptive_field(spec: WavenetStackSpec) -> int:
    """Number of past steps that can influence one output of the stack:
    1 + sum over blocks of (kernel-1)*dilation."""
    k = spec.block_kernel
    return 1 + sum((k - 1) * spec.block_dilation(i) for i in range(spec.num_blocks))
