"""The gfdet command: synth, train, eval, anchors, and enhance subcommands.

Every experiment knob lives in a key=value config file; any key can be
overridden by the flag of the same name, and flags win.  Seeded commands
produce byte-identical artifacts run to run.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import report
from .config import SCHEMA, ConfigError, read_config_file, resolve, synth_spec, train_config
from .data import load_dataset, read_pgm, save_dataset, synth_dataset, write_pgm, clahe
from .detection import write_detections_csv
from .metrics import write_curve_csv
from .topology import anchor_count, build_topology, reference_geometry, toy_geometry
from .training import (
    DetectionModel,
    evaluate_dataset,
    load_checkpoint,
    read_training_log,
    train,
)


def _parse_tiles(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        tx, ty = (int(p) for p in parts)
        return tx, ty
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected COLSxROWS, e.g. 8x8, got {text!r}") from None


def _add_schema_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config keys (override the config file)")
    for key, field in SCHEMA.items():
        group.add_argument("--" + key.replace("_", "-"), dest=key,
                           default=None, metavar="V",
                           help=f"{field.help} (default: {field.default})")


def _resolved(args: argparse.Namespace) -> dict[str, object]:
    file_values = read_config_file(args.config) if args.config else None
    flags = {key: getattr(args, key) for key in SCHEMA}
    return resolve(file_values, flags)


def _check_image_size(samples, input_size: int) -> None:
    for s in samples:
        if (s.pair.height, s.pair.width) != (input_size, input_size):
            raise RuntimeError(
                f"dataset image {s.pair.image_id} is "
                f"{s.pair.width}x{s.pair.height}, config wants "
                f"{input_size}x{input_size}; regenerate or set --input-size")


def cmd_synth(args: argparse.Namespace) -> None:
    values = _resolved(args)
    samples = synth_dataset(synth_spec(values))
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} pairs to {args.out}")


def cmd_train(args: argparse.Namespace) -> None:
    values = _resolved(args)
    cfg = train_config(values)
    samples = load_dataset(args.data)
    _check_image_size(samples, cfg.input_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "training_log.csv"
    ckpt_path = out / "checkpoint.ckpt"
    _, breakdown = train(cfg, samples, log_path=log_path, checkpoint_path=ckpt_path)
    report.save_loss_figure(read_training_log(log_path), out / "loss_curve.png")
    print(f"wrote {ckpt_path}")
    print(f"wrote {log_path}")
    print(f"wrote {out / 'loss_curve.png'}")
    print(f"final l_total={breakdown.l_total!r} "
          f"(l_cls={breakdown.l_cls!r} l_loc={breakdown.l_loc!r} "
          f"l2={breakdown.l2!r})")


def cmd_eval(args: argparse.Namespace) -> None:
    values = _resolved(args)
    cfg = train_config(values)
    samples = load_dataset(args.data)
    _check_image_size(samples, cfg.input_size)
    model = DetectionModel(cfg)
    load_checkpoint(args.checkpoint, model.params, cfg)
    result, dets_per_image = evaluate_dataset(
        model, samples,
        iou_threshold=values["iou_threshold"],
        score_threshold=values["score_threshold"],
        nms_threshold=values["nms_threshold"],
        fppi_samples=values["fppi_samples"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(result.curve, out / "curve.csv")
    flat = [d for dets in dets_per_image for d in dets]
    size = (samples[0].pair.width, samples[0].pair.height)
    write_detections_csv(flat, out / "detections.csv", size)
    report.save_curve_figure(result.curve, out / "curve.png")
    print(f"evaluated {len(samples)} images, {len(flat)} detections, "
          f"{len(result.curve)} curve points")
    print(f"wrote {out / 'curve.csv'}, {out / 'detections.csv'}, "
          f"{out / 'curve.png'}")
    print(f"logMR={result.log_avg_miss_rate!r}")


def cmd_anchors(args: argparse.Namespace) -> None:
    values = _resolved(args)
    if args.toy:
        geometry = toy_geometry(values["input_size"], values["channels"],
                                values["anchors_per_loc"], values["num_levels"])
    else:
        geometry = reference_geometry(args.size)
    topology = build_topology(values["variant"], geometry)
    names = topology.head_map_names()
    counts = [topology.levels[i].height * topology.levels[i].width
              * topology.levels[i].anchors_per_loc
              for i, _ in topology.head_map_specs()]
    width = max(len(n) for n in names + ["total"])
    for name, count in zip(names, counts):
        print(f"{name:<{width}} {count}")
    total = anchor_count(topology)
    print(f"{'total':<{width}} {total}")
    assert total == sum(counts)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "anchors.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["head_map", "count"])
            writer.writerows(zip(names, counts))
        report.save_anchor_figure(names, counts, out / "anchors.png",
                                  title=f"{topology.variant} anchors")
        print(f"wrote {out / 'anchors.csv'} and {out / 'anchors.png'}")


def cmd_enhance(args: argparse.Namespace) -> None:
    img = read_pgm(args.input)
    write_pgm(args.output, clahe(img, tiles=args.tiles, clip_limit=args.clip))
    print(f"wrote {args.output}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfdet",
        description="Gated two-modality object detection at toy scale: "
                    "generate data, train, evaluate, and inspect anchors.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-modality dataset",
                       description="Generate aligned color/thermal pairs with "
                                   "box annotations under --out.")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="dataset directory to create")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector on a dataset",
                       description="Train the configured topology; writes "
                                   "checkpoint.ckpt, training_log.csv, and "
                                   "loss_curve.png under --out.")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset",
                       description="Run detection and the miss-rate benchmark; "
                                   "writes curve.csv, detections.csv, and "
                                   "curve.png under --out, and prints "
                                   "logMR=<value> as the last line.")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("anchors", help="print the anchor accounting table",
                       description="Print per-head-map anchor counts (_C/_T "
                                   "for stacked maps, _G for gated) plus the "
                                   "total; optionally write CSV and figure.")
    p.add_argument("--size", type=int, choices=(300, 512), default=300,
                   help="reference pyramid geometry (default: 300)")
    p.add_argument("--toy", action="store_true",
                   help="use the toy pyramid from the config keys instead")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="directory for anchors.csv and anchors.png")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("enhance", help="contrast-enhance a grayscale image",
                       description="Tile-based adaptive histogram equalization "
                                   "with clipping, for 8-bit PGM images.")
    p.add_argument("input", help="input .pgm")
    p.add_argument("output", help="output .pgm")
    p.add_argument("--tiles", type=_parse_tiles, default=(8, 8), metavar="CxR",
                   help="tile grid, columns x rows (default: 8x8)")
    p.add_argument("--clip", type=float, default=2.0,
                   help="histogram clip limit (default: 2.0)")
    p.set_defaults(func=cmd_enhance)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.func(args)
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
