"""Model assembly, the SGD loop, training logs, and checkpoints.

Everything downstream of the random seed is deterministic: component inits,
batch order, and per-sample augmentation seeds all derive from the config
seed by hashing, so identical configs produce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Parameter, Tensor, backward, sgd_step
from .data import DatasetSample, ImagePair, augment, clahe
from .detection import Box, DetectionHeads, Detection, predict
from .gfu import VERSIONS, GfuParams, init_gfu_params
from .losses import LossBreakdown, LossWeights, detection_loss
from .metrics import EvalResult, evaluate
from .topology import (
    VARIANTS,
    LevelMode,
    ToyBackbone,
    build_topology,
    enumerate_anchors,
    forward_pyramid,
    toy_geometry,
)

MODALITIES = ("color", "thermal")
CHECKPOINT_MAGIC = b"GFDT1\n"
LOG_FIELDS = ("step", "l_cls", "l_loc", "l2", "l_total", "n_pos", "n_neg")


class TrainingDiverged(RuntimeError):
    pass


def derive_seed(*parts) -> int:
    """Stable sub-seed from hashable parts, e.g. (seed, image_id, step)."""
    return zlib.crc32(":".join(str(p) for p in parts).encode())


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "gated"
    gfu_version: str = "v1"
    input_size: int = 64
    channels: int = 8
    num_levels: int = 4
    anchors_per_loc: int = 4
    modality: str = "color"  # stream used by the `single` variant
    alpha: float = 5.0
    beta: float = 10.0
    gamma: float = 1.0
    ohem_ratio: float = 3.0
    iou_threshold: float = 0.5
    lr: float = 2e-3
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    enhance_thermal: bool = False
    ignore_classes: str = ""  # comma-separated raw classes matched as ignore
    min_gt_height: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.gfu_version not in VERSIONS:
            raise ValueError(f"unknown gfu version {self.gfu_version!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.ohem_ratio <= 0:
            raise ValueError(f"ohem_ratio must be positive, got {self.ohem_ratio}")

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def ignore_set(self) -> frozenset[str]:
        return frozenset(c for c in self.ignore_classes.split(",") if c)

    def fingerprint(self) -> str:
        """Architecture identity; checkpoints refuse to load across changes."""
        return (f"gfdt:variant={self.variant}:gfu={self.gfu_version}"
                f":size={self.input_size}:channels={self.channels}"
                f":levels={self.num_levels}:apl={self.anchors_per_loc}"
                f":modality={self.modality}")


def pair_to_arrays(pair: ImagePair, enhance_thermal: bool) -> tuple[np.ndarray, np.ndarray]:
    """(1,3,H,W) and (1,1,H,W) float arrays, centered to [-0.5, 0.5]."""
    thermal = clahe(pair.thermal) if enhance_thermal else pair.thermal
    c = pair.color.astype(np.float64).transpose(2, 0, 1)[None] / 255.0 - 0.5
    t = thermal.astype(np.float64)[None, None] / 255.0 - 0.5
    return c, t


def normalized_gts(gts, width: int, height: int, ignore_classes=frozenset(),
                   min_gt_height: float = 0.0) -> tuple[list[Box], list[bool]]:
    """Pixel ground truths -> unit-square boxes plus per-gt ignore flags."""
    boxes, flags = [], []
    for g in gts:
        boxes.append(Box(g.box.cx / width, g.box.cy / height,
                         g.box.w / width, g.box.h / height))
        flags.append(g.raw_class in ignore_classes or g.box.h < min_gt_height)
    return boxes, flags


class DetectionModel:
    """Backbones, fusion units, and heads for one topology, with named params."""

    def __init__(self, config: TrainConfig):
        self.config = config
        geometry = toy_geometry(config.input_size, config.channels,
                                config.anchors_per_loc, config.num_levels)
        self.topology = build_topology(config.variant, geometry)
        self.single = all(m is LevelMode.SINGLE for m in self.topology.modes)
        streams = (config.modality,) if self.single else MODALITIES
        in_ch = {"color": 3, "thermal": 1}
        self.backbones = {
            name: ToyBackbone(config.input_size, in_ch[name], geometry,
                              derive_seed(config.seed, "backbone", name),
                              prefix=f"backbone_{name}")
            for name in streams
        }
        self.gfus: list[GfuParams | None] = []
        for level, mode in zip(self.topology.levels, self.topology.modes):
            if mode is LevelMode.GATED:
                self.gfus.append(init_gfu_params(
                    level.channels, config.gfu_version,
                    derive_seed(config.seed, "gfu", level.name),
                    prefix=f"gfu.{level.name}"))
            else:
                self.gfus.append(None)
        specs = [(name, self.topology.levels[i].channels,
                  self.topology.levels[i].anchors_per_loc)
                 for (i, _), name in zip(self.topology.head_map_specs(),
                                         self.topology.head_map_names())]
        self.heads = DetectionHeads(specs, derive_seed(config.seed, "heads"))
        self.anchors = enumerate_anchors(geometry, self.topology)
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in model")

    @property
    def params(self) -> list[Parameter]:
        out = []
        for name in MODALITIES:
            if name in self.backbones:
                out.extend(self.backbones[name].params)
        for unit in self.gfus:
            if unit is not None:
                out.extend(unit.params)
        out.extend(self.heads.params)
        return out

    def forward(self, color: Tensor | None, thermal: Tensor | None) -> list[Tensor]:
        if self.single:
            color = color if self.config.modality == "color" else None
            thermal = thermal if self.config.modality == "thermal" else None
        return forward_pyramid(color, thermal, self.backbones, self.gfus,
                               self.topology)


def _batch_tensors(config: TrainConfig, picks: Sequence[DatasetSample],
                   step: int) -> tuple[Tensor, Tensor, list, list]:
    colors, thermals, gts_pi, flags_pi = [], [], [], []
    ignore = config.ignore_set()
    for s in picks:
        pair, gts = s.pair, s.gts
        if config.augment:
            pair, gts = augment(pair, gts,
                                derive_seed(config.seed, pair.image_id, step))
        c, t = pair_to_arrays(pair, config.enhance_thermal)
        colors.append(c)
        thermals.append(t)
        boxes, flags = normalized_gts(gts, pair.width, pair.height, ignore,
                                      config.min_gt_height)
        gts_pi.append(boxes)
        flags_pi.append(flags)
    return (Tensor(np.concatenate(colors)), Tensor(np.concatenate(thermals)),
            gts_pi, flags_pi)


def train(config: TrainConfig, samples: Sequence[DatasetSample],
          log_path=None, checkpoint_path=None
          ) -> tuple[DetectionModel, LossBreakdown]:
    """Run the SGD loop; returns the model and the last step's breakdown."""
    if not samples:
        raise ValueError("empty dataset")
    model = DetectionModel(config)
    order = np.random.default_rng(derive_seed(config.seed, "batches"))
    rows: list[tuple[int, LossBreakdown]] = []
    breakdown = None
    for step in range(config.steps):
        picks = [samples[i] for i in
                 order.integers(0, len(samples), size=config.batch_size)]
        color, thermal, gts_pi, flags_pi = _batch_tensors(config, picks, step)
        maps = model.forward(color, thermal)
        table = model.heads.anchor_table(maps)
        try:
            total, breakdown, _ = detection_loss(
                table, model.anchors, gts_pi, model.params,
                weights=config.weights(), ohem_ratio=config.ohem_ratio,
                iou_threshold=config.iou_threshold,
                ignore_per_image=flags_pi)
        except ValueError as e:
            raise TrainingDiverged(f"aborted at step {step}: {e}") from e
        backward(total)
        sgd_step(model.params, config.lr)
        rows.append((step, breakdown))
    if log_path is not None:
        write_training_log(log_path, rows)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.params, config)
    return model, breakdown


def write_training_log(path, rows: Sequence[tuple[int, LossBreakdown]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for step, bd in rows:
            writer.writerow([step, repr(bd.l_cls), repr(bd.l_loc), repr(bd.l2),
                             repr(bd.l_total), bd.n_pos, bd.n_neg])


def read_training_log(path) -> list[dict]:
    with open(path, newline="") as f:
        out = []
        for row in csv.DictReader(f):
            rec = {k: float(v) for k, v in row.items() if k not in ("step",)}
            rec["step"] = int(row["step"])
            out.append(rec)
        return out


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: Sequence[Parameter], config: TrainConfig) -> None:
    """Magic, JSON manifest, little-endian float64 payload, sha256 trailer."""
    manifest = [[p.name, list(p.data.shape)] for p in params]
    header = json.dumps({"fingerprint": config.fingerprint(), "params": manifest},
                        sort_keys=True, separators=(",", ":")).encode() + b"\n"
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes()
                       for p in params)
    body = (CHECKPOINT_MAGIC + len(header).to_bytes(8, "little")
            + header + payload)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path, params: Sequence[Parameter], config: TrainConfig) -> None:
    """Fill `params` in place; rejects wrong fingerprints and corrupt files."""
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise ValueError(f"{path}: too short to be a checkpoint")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:6]!r}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch (file truncated or corrupt)")
    at = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(body[at:at + 8], "little")
    at += 8
    header = json.loads(body[at:at + header_len])
    at += header_len
    if header["fingerprint"] != config.fingerprint():
        raise ValueError(
            f"{path}: fingerprint mismatch: checkpoint is "
            f"{header['fingerprint']!r}, config wants {config.fingerprint()!r}")
    manifest = [[p.name, list(p.data.shape)] for p in params]
    if header["params"] != manifest:
        raise ValueError(f"{path}: parameter manifest does not match the model")
    for p in params:
        n = int(np.prod(p.data.shape))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=at)
        p.data = arr.reshape(p.data.shape).astype(np.float64)
        at += n * 8
    if at != len(body):
        raise ValueError(f"{path}: trailing bytes after parameter payload")


# -------------------------------------------------------------- evaluation


def predict_pair(model: DetectionModel, pair: ImagePair,
                 score_threshold: float = 0.05, nms_threshold: float = 0.45
                 ) -> list[Detection]:
    c, t = pair_to_arrays(pair, model.config.enhance_thermal)
    maps = model.forward(Tensor(c), Tensor(t))
    return predict(maps, model.heads, model.anchors,
                   score_threshold=score_threshold,
                   nms_threshold=nms_threshold, image_id=pair.image_id)


def evaluate_dataset(model: DetectionModel, samples: Sequence[DatasetSample],
                     iou_threshold: float = 0.5, score_threshold: float = 0.05,
                     nms_threshold: float = 0.45, fppi_samples: int = 9,
                     fppi_range: tuple[float, float] = (1e-2, 1.0)
                     ) -> tuple[EvalResult, list[list[Detection]]]:
    """Detect on every sample and reduce to the benchmark metric."""
    ignore = model.config.ignore_set()
    dets_pi, gts_pi, flags_pi = [], [], []
    for s in samples:
        dets_pi.append(predict_pair(model, s.pair, score_threshold, nms_threshold))
        boxes, flags = normalized_gts(s.gts, s.pair.width, s.pair.height,
                                      ignore, model.config.min_gt_height)
        gts_pi.append(boxes)
        flags_pi.append(flags)
    result = evaluate(dets_pi, gts_pi, ignore_per_image=flags_pi,
                      iou_threshold=iou_threshold, samples=fppi_samples,
                      fppi_range=fppi_range)
    return result, dets_pi
