"""Flat key=value experiment configs shared by the CLI subcommands.

One schema drives everything: config-file parsing, per-subcommand flag
generation, and the defaults shown in --help.  Resolution order for every
key is flag, then config file, then (for seed only) the GFD_SEED
environment variable, then the schema default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Mapping

from .data import VISIBILITY_MODES, SynthSpec
from .gfu import VERSIONS
from .topology import VARIANTS
from .training import MODALITIES, TrainConfig


class ConfigError(ValueError):
    """A usage-level problem: bad key, bad value, malformed file."""


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], object]
    default: object
    help: str


SCHEMA: dict[str, Field] = {
    # model and trainer
    "variant": Field(_choice(VARIANTS), "gated",
                     "fusion topology (" + ", ".join(VARIANTS) + ")"),
    "gfu_version": Field(_choice(VERSIONS), "v1", "fusion unit gating form"),
    "input_size": Field(int, 64, "square input size in pixels"),
    "channels": Field(int, 8, "channel width of every pyramid level"),
    "num_levels": Field(int, 4, "number of pyramid levels"),
    "anchors_per_loc": Field(int, 4, "anchor slots per map location (4 or 6)"),
    "modality": Field(_choice(MODALITIES), "color",
                      "stream used by the single topology"),
    "alpha": Field(float, 5.0, "classification loss weight"),
    "beta": Field(float, 10.0, "localization loss weight"),
    "gamma": Field(float, 1.0, "weight decay loss weight"),
    "ohem_ratio": Field(float, 3.0, "hard negatives kept per positive"),
    "iou_threshold": Field(float, 0.5, "overlap for anchor matching and eval"),
    "lr": Field(float, 2e-3, "SGD learning rate"),
    "steps": Field(int, 200, "training steps"),
    "batch_size": Field(int, 4, "image pairs per step"),
    "seed": Field(int, 0, "master seed (GFD_SEED is the fallback)"),
    "augment": Field(parse_bool, True, "apply training-time augmentation"),
    "enhance_thermal": Field(parse_bool, False,
                             "histogram-equalize thermal inputs"),
    "ignore_classes": Field(str, "",
                            "comma-separated classes scored as ignore regions"),
    "min_gt_height": Field(float, 0.0,
                           "ground truths shorter than this (pixels) are ignore"),
    # evaluation
    "score_threshold": Field(float, 0.05, "drop detections scoring below this"),
    "nms_threshold": Field(float, 0.45, "suppression overlap for predictions"),
    "fppi_samples": Field(int, 9, "log-spaced curve samples in [0.01, 1]"),
    # synthetic data
    "num_pairs": Field(int, 8, "image pairs to generate"),
    "image_size": Field(int, 64, "square size of generated pairs"),
    "min_objects": Field(int, 1, "fewest objects per pair"),
    "max_objects": Field(int, 3, "most objects per pair"),
    "visibility": Field(_choice(VISIBILITY_MODES), "mixed",
                        "which modality renders objects ("
                        + ", ".join(VISIBILITY_MODES) + ")"),
    "mixed_color_fraction": Field(float, 0.5,
                                  "color-only object share in mixed mode"),
    "noise_level": Field(float, 6.0, "pixel noise sigma"),
}

TRAIN_KEYS = ("variant", "gfu_version", "input_size", "channels", "num_levels",
              "anchors_per_loc", "modality", "alpha", "beta", "gamma",
              "ohem_ratio", "iou_threshold", "lr", "steps", "batch_size",
              "seed", "augment", "enhance_thermal", "ignore_classes",
              "min_gt_height")
SYNTH_KEYS = ("num_pairs", "image_size", "min_objects", "max_objects",
              "visibility", "mixed_color_fraction", "noise_level", "seed")


def read_config_file(path) -> dict[str, str]:
    """key=value lines; blank lines and full-line # comments are skipped."""
    try:
        text = open(path).read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        values[key] = value
    return values


def resolve(file_values: Mapping[str, str] | None = None,
            flag_values: Mapping[str, str] | None = None,
            env: Mapping[str, str] | None = None) -> dict[str, object]:
    """Apply the precedence rules and parse every key to its final type."""
    env = os.environ if env is None else env
    out = {key: field.default for key, field in SCHEMA.items()}
    layers = [("config file", file_values or {}), ("flag", flag_values or {})]
    if "seed" not in (file_values or {}) and (flag_values or {}).get("seed") is None:
        if "GFD_SEED" in env:
            layers.insert(0, ("GFD_SEED", {"seed": env["GFD_SEED"]}))
    for source, values in layers:
        for key, text in values.items():
            if text is None:
                continue
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r} (from {source})")
            try:
                out[key] = SCHEMA[key].parse(str(text))
            except ValueError as e:
                raise ConfigError(f"bad value for {key} (from {source}): {e}") from e
    return out


def train_config(values: Mapping[str, object]) -> TrainConfig:
    try:
        return TrainConfig(**{k: values[k] for k in TRAIN_KEYS})
    except ValueError as e:
        raise ConfigError(str(e)) from e


def synth_spec(values: Mapping[str, object]) -> SynthSpec:
    try:
        return SynthSpec(**{k: values[k] for k in SYNTH_KEYS})
    except ValueError as e:
        raise ConfigError(str(e)) from e
