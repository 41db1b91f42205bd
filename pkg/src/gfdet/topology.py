"""Fusion topologies over a two-stream feature pyramid.

A topology assigns each pyramid level one of three modes: Single (one
modality, one head map), Stacked (both modality maps kept, two head maps,
double anchors), or Gated (one fused map from a fusion unit, one head map).
The seven variants cover the all-single, all-stacked, all-gated and four
mixed assignments; anchor accounting follows directly from the modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, conv2d, he_uniform, relu
from .detection import Box
from .gfu import GfuParams, gfu_forward


class LevelMode(Enum):
    SINGLE = "single"
    STACKED = "stacked"
    GATED = "gated"


VARIANTS = ("single", "stack", "gated", "mixed_even", "mixed_odd", "mixed_early", "mixed_late")

# Suffix notation for head maps: modality streams keep _C/_T, fused maps _G.
_SUFFIX = {LevelMode.SINGLE: ("",), LevelMode.STACKED: ("_C", "_T"), LevelMode.GATED: ("_G",)}


@dataclass(frozen=True)
class PyramidLevel:
    name: str
    height: int
    width: int
    channels: int
    anchors_per_loc: int


@dataclass(frozen=True)
class FusionTopology:
    variant: str
    levels: tuple[PyramidLevel, ...]
    modes: tuple[LevelMode, ...]

    def head_map_specs(self) -> list[tuple[int, str]]:
        """(level index, suffix) per head map, in forward emission order."""
        specs = []
        for i, mode in enumerate(self.modes):
            specs.extend((i, sfx) for sfx in _SUFFIX[mode])
        return specs

    def head_map_names(self) -> list[str]:
        return [self.levels[i].name + sfx for i, sfx in self.head_map_specs()]


def reference_geometry(size: int = 300) -> list[PyramidLevel]:
    """The fixed 300/512 reference pyramid grids, for anchor accounting only."""
    if size == 300:
        rows = [("conv4_3", 38, 512, 4), ("conv7", 19, 1024, 6), ("conv8_2", 10, 512, 6),
                ("conv9_2", 5, 256, 6), ("conv10_2", 3, 256, 4), ("conv11_2", 1, 256, 4)]
    elif size == 512:
        rows = [("conv4_3", 64, 512, 4), ("conv7", 32, 1024, 6), ("conv8_2", 16, 512, 6),
                ("conv9_2", 8, 256, 6), ("conv10_2", 4, 256, 6), ("conv11_2", 2, 256, 4),
                ("conv12_2", 1, 256, 4)]
    else:
        raise ValueError(f"reference geometry is defined for 300 and 512, not {size}")
    return [PyramidLevel(n, s, s, c, a) for n, s, c, a in rows]


def toy_geometry(input_size: int = 64, channels: int = 8, anchors_per_loc: int = 4,
                 num_levels: int = 4) -> list[PyramidLevel]:
    """A small trainable pyramid: sizes input/8, /16, ... for num_levels taps."""
    if num_levels < 1:
        raise ValueError("need at least one level")
    levels = []
    for i in range(num_levels):
        size = input_size // (8 * 2 ** i)
        if size < 1:
            raise ValueError(f"input {input_size} too small for {num_levels} levels")
        levels.append(PyramidLevel(f"p{i}", size, size, channels, anchors_per_loc))
    return levels


def build_topology(variant: str, geometry: Sequence[PyramidLevel]) -> FusionTopology:
    """Assign per-level modes for one of the seven variants.

    mixed_even/mixed_odd gate the even/odd 0-indexed level positions (the
    even/odd-numbered conv blocks of the reference pyramid); mixed_early
    gates the first floor(K/2) levels and mixed_late the last ceil(K/2).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    levels = tuple(geometry)
    if not levels:
        raise ValueError("geometry has no levels")
    k = len(levels)
    if variant == "single":
        modes = [LevelMode.SINGLE] * k
    elif variant == "stack":
        modes = [LevelMode.STACKED] * k
    elif variant == "gated":
        modes = [LevelMode.GATED] * k
    else:
        if variant == "mixed_even":
            gated = {i for i in range(k) if i % 2 == 0}
        elif variant == "mixed_odd":
            gated = {i for i in range(k) if i % 2 == 1}
        elif variant == "mixed_early":
            gated = set(range(k // 2))
        else:  # mixed_late
            gated = set(range(k - (k + 1) // 2, k))
        modes = [LevelMode.GATED if i in gated else LevelMode.STACKED for i in range(k)]
    return FusionTopology(variant, levels, tuple(modes))


def anchor_count(t: FusionTopology) -> int:
    """Total anchors: Stacked levels contribute twice their grid, others once."""
    total = 0
    for level, mode in zip(t.levels, t.modes):
        mult = 2 if mode is LevelMode.STACKED else 1
        total += mult * level.height * level.width * level.anchors_per_loc
    return total


def _level_scales(k: int, scale_range: tuple[float, float]) -> list[float]:
    s_min, s_max = scale_range
    if not (0 < s_min <= s_max):
        raise ValueError(f"bad scale range {scale_range}")
    if k == 1:
        return [s_min]
    return [s_min + (s_max - s_min) * i / (k - 1) for i in range(k)]


def _location_anchors(level: PyramidLevel, s: float, s_next: float) -> list[tuple[float, float]]:
    """(w, h) pairs per location: ratios {1, 1 at sqrt(s*s'), 2, 1/2} and,
    for six-anchor levels, {3, 1/3}."""
    if level.anchors_per_loc not in (4, 6):
        raise ValueError(
            f"{level.name}: anchors_per_loc must be 4 or 6, got {level.anchors_per_loc}"
        )
    extra = math.sqrt(s * s_next)
    pairs = [(s, s), (extra, extra)]
    ratios = [2.0, 0.5] if level.anchors_per_loc == 4 else [2.0, 0.5, 3.0, 1.0 / 3.0]
    for ar in ratios:
        root = math.sqrt(ar)
        pairs.append((s * root, s / root))
    return pairs


def enumerate_anchors(
    geometry: Sequence[PyramidLevel],
    t: FusionTopology,
    scale_range: tuple[float, float] = (0.2, 0.9),
) -> list[Box]:
    """Every anchor box in head-map order: per map, row-major location, slot.

    Centers sit at ((i+0.5)/W, (j+0.5)/H); level k of K uses scale
    s_k = s_min + (s_max-s_min)*k/(K-1) with an extra ratio-1 anchor at
    sqrt(s_k*s_{k+1}) (s_K := 1).  Stacked levels emit their grid twice,
    once per modality head, so the list lines up with head-map rows.
    """
    if tuple(geometry) != t.levels:
        raise ValueError("geometry does not match the topology's levels")
    scales = _level_scales(len(t.levels), scale_range)
    scales_next = scales[1:] + [1.0]
    per_level: dict[int, list[Box]] = {}
    for idx, level in enumerate(t.levels):
        pairs = _location_anchors(level, scales[idx], scales_next[idx])
        boxes = []
        for j in range(level.height):
            cy = (j + 0.5) / level.height
            for i in range(level.width):
                cx = (i + 0.5) / level.width
                boxes.extend(Box(cx, cy, w, h) for w, h in pairs)
        per_level[idx] = boxes
    out: list[Box] = []
    for idx, _sfx in t.head_map_specs():
        out.extend(per_level[idx])
    return out


class ToyBackbone:
    """A per-modality conv stack whose stride-2 taps emit the pyramid levels.

    The downsampling plan halves spatial size (3x3 conv, stride 2, pad 1)
    until each declared level size is reached; a conv that lands on a level's
    size widens to that level's channel count and its output is tapped.
    """

    def __init__(self, input_size: int, in_channels: int, geometry: Sequence[PyramidLevel],
                 seed: int | np.random.Generator, prefix: str = "backbone"):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.input_size = input_size
        self.in_channels = in_channels
        self.geometry = list(geometry)
        self.prefix = prefix
        self.blocks: list[dict] = []
        self.params: list[Parameter] = []
        size, ch = input_size, in_channels
        for level in self.geometry:
            if level.height != level.width:
                raise ValueError(f"{level.name}: toy backbone needs square levels")
            if size < level.height:
                raise ValueError(f"cannot reach {level.name} ({level.height}) from {size}")
            tapped = False
            while size > level.height:
                nxt = -(-size // 2)  # ceil halving via stride-2 3x3 pad 1
                if nxt < level.height:
                    raise ValueError(
                        f"{level.name}: size {size} cannot halve to {level.height}"
                    )
                tapped = nxt == level.height
                self._add_block(rng, ch, level.channels, stride=2, tap=tapped)
                size, ch = nxt, level.channels
            if not tapped:
                # level already at current size: give it its own stride-1 conv
                self._add_block(rng, ch, level.channels, stride=1, tap=True)
                ch = level.channels

    def _add_block(self, rng, in_ch: int, out_ch: int, stride: int, tap: bool) -> None:
        i = len(self.blocks)
        w = Parameter(he_uniform(rng, (out_ch, in_ch, 3, 3)), f"{self.prefix}.block{i}.weight")
        b = Parameter(np.zeros((1, out_ch, 1, 1)), f"{self.prefix}.block{i}.bias")
        self.params.extend([w, b])
        self.blocks.append({"w": w, "b": b, "stride": stride, "tap": tap, "out": out_ch})

    def forward(self, x: Tensor) -> list[Tensor]:
        b, c, h, w = x.shape
        if c != self.in_channels or h != self.input_size or w != self.input_size:
            raise ShapeError(
                f"backbone expects (*, {self.in_channels}, {self.input_size}, "
                f"{self.input_size}), got {x.shape}"
            )
        taps = []
        for block in self.blocks:
            x = relu(conv2d(x, block["w"], block["b"], stride=block["stride"], padding=1))
            if block["tap"]:
                taps.append(x)
        return taps


def forward_pyramid(
    color: Tensor | None,
    thermal: Tensor | None,
    backbones: Mapping[str, ToyBackbone],
    gfus: Sequence[GfuParams | None],
    t: FusionTopology,
) -> list[Tensor]:
    """Head maps for one batch, in head_map_specs() order.

    Single topologies take exactly one modality (whichever of color/thermal
    is not None); every other topology needs both streams.  Gated levels
    consume gfus[level_index]; Stacked levels emit color then thermal.
    """
    if len(gfus) != len(t.levels):
        raise ShapeError(f"need {len(t.levels)} gfu slots (None for ungated), got {len(gfus)}")
    single_only = all(m is LevelMode.SINGLE for m in t.modes)
    if single_only:
        present = [(n, x) for n, x in (("color", color), ("thermal", thermal)) if x is not None]
        if len(present) != 1:
            raise ShapeError("single topology takes exactly one modality input")
        name, x = present[0]
        taps = {name: backbones[name].forward(x)}
    else:
        if color is None or thermal is None:
            raise ShapeError(f"{t.variant} topology needs both modality inputs")
        taps = {"color": backbones["color"].forward(color),
                "thermal": backbones["thermal"].forward(thermal)}

    for stream in taps.values():
        if len(stream) != len(t.levels):
            raise ShapeError(f"backbone emitted {len(stream)} levels, topology has {len(t.levels)}")
        for tap, level in zip(stream, t.levels):
            want = (tap.shape[0], level.channels, level.height, level.width)
            if tap.shape != want:
                raise ShapeError(f"{level.name}: emitted {tap.shape}, declared {want}")

    maps: list[Tensor] = []
    for idx, mode in enumerate(t.modes):
        if mode is LevelMode.SINGLE:
            maps.append(next(iter(taps.values()))[idx])
        elif mode is LevelMode.STACKED:
            maps.append(taps["color"][idx])
            maps.append(taps["thermal"][idx])
        else:
            unit = gfus[idx]
            if unit is None:
                raise ShapeError(f"level {t.levels[idx].name} is gated but gfus[{idx}] is None")
            maps.append(gfu_forward(taps["color"][idx], taps["thermal"][idx], unit))
    return maps
