"""Gated fusion units: learned per-channel mixing of color and thermal maps.

Both variants consume two C-channel maps of equal spatial size and return one
C-channel joint map.  v1 gates each modality by a 3x3 conv over the stacked
pair; v2 gates each modality by a 3x3 conv over itself, widened to 2C so the
sum lands on the stacked pair.  All 3x3 convs are stride 1 / pad 1 and the
final 1x1 conv is stride 1 / pad 0; spatial size is always preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, add, concat_channels, conv2d, fan_uniform, relu

VERSIONS = ("v1", "v2")


@dataclass
class GfuParams:
    """The six learned groups of one fusion unit."""

    version: str
    channels: int
    w_c: Parameter
    b_c: Parameter
    w_t: Parameter
    b_t: Parameter
    w_j: Parameter
    b_j: Parameter

    @property
    def params(self) -> list[Parameter]:
        return [self.w_c, self.b_c, self.w_t, self.b_t, self.w_j, self.b_j]


def init_gfu_params(
    channels: int,
    version: str,
    seed: int | np.random.Generator,
    prefix: str = "gfu",
) -> GfuParams:
    """Fan-balanced uniform weights, zero biases, deterministic in the seed.

    v1 gate convs map 2C->C (they read the stacked pair); v2 gate convs map
    C->2C (their output is added to the stacked pair).  The joint 1x1 conv
    maps 2C->C in v1 and 4C->C in v2.
    """
    if version not in VERSIONS:
        raise ValueError(f"unknown gfu version {version!r}, expected one of {VERSIONS}")
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c = channels
    if version == "v1":
        gate_shape, joint_in = (c, 2 * c, 3, 3), 2 * c
    else:
        gate_shape, joint_in = (2 * c, c, 3, 3), 4 * c
    gate_out = gate_shape[0]

    def bias(n, name):
        return Parameter(np.zeros((1, n, 1, 1)), f"{prefix}.{name}")

    return GfuParams(
        version=version,
        channels=c,
        w_c=Parameter(fan_uniform(rng, gate_shape), f"{prefix}.w_c.weight"),
        b_c=bias(gate_out, "b_c.bias"),
        w_t=Parameter(fan_uniform(rng, gate_shape), f"{prefix}.w_t.weight"),
        b_t=bias(gate_out, "b_t.bias"),
        w_j=Parameter(fan_uniform(rng, (c, joint_in, 1, 1)), f"{prefix}.w_j.weight"),
        b_j=bias(c, "b_j.bias"),
    )


def _check_inputs(fc: Tensor, ft: Tensor, params: GfuParams) -> None:
    if fc.shape != ft.shape:
        raise ShapeError(f"modality maps differ: {fc.shape} vs {ft.shape}")
    if fc.shape[1] != params.channels:
        raise ShapeError(
            f"maps have {fc.shape[1]} channels, unit was built for {params.channels}"
        )


def _gfu_v1_parts(fc: Tensor, ft: Tensor, p: GfuParams) -> tuple[Tensor, Tensor, Tensor]:
    _check_inputs(fc, ft, p)
    fg = concat_channels(fc, ft)
    a_c = relu(conv2d(fg, p.w_c, p.b_c, stride=1, padding=1))
    a_t = relu(conv2d(fg, p.w_t, p.b_t, stride=1, padding=1))
    ff = concat_channels(add(fc, a_c), add(ft, a_t))
    fj = relu(conv2d(ff, p.w_j, p.b_j, stride=1, padding=0))
    return fj, a_c, a_t


def _gfu_v2_parts(fc: Tensor, ft: Tensor, p: GfuParams) -> tuple[Tensor, Tensor, Tensor]:
    _check_inputs(fc, ft, p)
    fg = concat_channels(fc, ft)
    a_c = relu(conv2d(fc, p.w_c, p.b_c, stride=1, padding=1))
    a_t = relu(conv2d(ft, p.w_t, p.b_t, stride=1, padding=1))
    ff = concat_channels(add(fg, a_c), add(fg, a_t))
    fj = relu(conv2d(ff, p.w_j, p.b_j, stride=1, padding=0))
    return fj, a_c, a_t


def gfu_v1_forward(fc: Tensor, ft: Tensor, params: GfuParams) -> Tensor:
    """Joint map from gates computed on the stacked pair."""
    if params.version != "v1":
        raise ValueError(f"params built for {params.version}, not v1")
    return _gfu_v1_parts(fc, ft, params)[0]


def gfu_v2_forward(fc: Tensor, ft: Tensor, params: GfuParams) -> Tensor:
    """Joint map from gates computed per modality, summed onto the stack."""
    if params.version != "v2":
        raise ValueError(f"params built for {params.version}, not v2")
    return _gfu_v2_parts(fc, ft, params)[0]


def gfu_forward(fc: Tensor, ft: Tensor, params: GfuParams) -> Tensor:
    return gfu_v1_forward(fc, ft, params) if params.version == "v1" else gfu_v2_forward(fc, ft, params)
