"""Paired color/thermal images: files, annotations, enhancement, augmentation.

Images live as uint8 numpy arrays, (H, W, 3) color and (H, W) thermal, moved
through binary PPM/PGM files so every byte is accountable in tests.  Boxes in
this module are in pixel units; normalization to [0,1] happens where tensors
are built.  The synthetic generator renders rectangles that are bright in
thermal and/or textured in color, so single-modality detectors have a
measurable blind spot.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from matplotlib import colors as mcolors

from .detection import Box, iou

CLASS_TOKENS = ("person", "people", "cyclist", "person?")
TRAIN_CLASS = "pedestrian"
TIME_TAGS = ("day", "night", "unknown")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    """One annotated object; box is center-form in pixels."""

    box: Box
    raw_class: str

    @property
    def train_class(self) -> str:
        return TRAIN_CLASS


@dataclass(frozen=True)
class ImagePair:
    color: np.ndarray
    thermal: np.ndarray
    image_id: str
    time_tag: str = "unknown"

    def __post_init__(self):
        c, t = self.color, self.thermal
        if c.dtype != np.uint8 or t.dtype != np.uint8:
            raise ValueError("images must be uint8")
        if c.ndim != 3 or c.shape[2] != 3 or t.ndim != 2:
            raise ValueError(f"bad image shapes {c.shape} / {t.shape}")
        if c.shape[:2] != t.shape:
            raise ValueError(f"modalities misaligned: {c.shape[:2]} vs {t.shape}")
        if self.time_tag not in TIME_TAGS:
            raise ValueError(f"unknown time tag {self.time_tag!r}")

    @property
    def height(self) -> int:
        return self.thermal.shape[0]

    @property
    def width(self) -> int:
        return self.thermal.shape[1]


# ------------------------------------------------------------- annotations


def parse_annotations(text: str) -> list[GroundTruth]:
    """One object per line: `<class> <x> <y> <w> <h>`, x/y the top-left corner.

    Blank lines and `#` comments are skipped; every malformed line is
    collected and reported together, with its line number.
    """
    gts, faults = [], []
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 5:
            faults.append(f"line {ln}: expected 5 fields, got {len(parts)}")
            continue
        cls = parts[0]
        if cls not in CLASS_TOKENS:
            faults.append(f"line {ln}: unknown class {cls!r}")
            continue
        try:
            x, y, w, h = (float(v) for v in parts[1:])
        except ValueError:
            faults.append(f"line {ln}: non-numeric coordinate")
            continue
        if not (w > 0 and h > 0):
            faults.append(f"line {ln}: non-positive size {w}x{h}")
            continue
        gts.append(GroundTruth(Box(x + w / 2, y + h / 2, w, h), cls))
    if faults:
        raise AnnotationError("bad annotation lines:\n" + "\n".join(faults))
    return gts


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_annotations(gts) -> str:
    lines = []
    for gt in gts:
        b = gt.box
        lines.append(" ".join([
            gt.raw_class,
            _fmt(b.cx - b.w / 2), _fmt(b.cy - b.h / 2), _fmt(b.w), _fmt(b.h),
        ]))
    return "\n".join(lines) + ("\n" if lines else "")


# ----------------------------------------------------------------- PNM I/O


def _pnm_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Parse `<magic> W H MAXVAL` honoring '#' comments; returns (w, h, start)."""
    if data[:2] != magic:
        raise ValueError(f"{path}: bad magic {data[:2]!r}, wanted {magic!r}")
    pos, tokens = 2, []
    while len(tokens) < 3:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace() \
                    and data[end:end + 1] != b"#":
                end += 1
            tokens.append(data[pos:end])
            pos = end
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ValueError(f"{path}: non-numeric header fields {tokens}") from None
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    if w < 1 or h < 1:
        raise ValueError(f"{path}: bad dimensions {w}x{h}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ValueError(f"{path}: missing whitespace before payload")
    return w, h, pos + 1


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, start = _pnm_header(data, magic, path)
    need = w * h * channels
    payload = data[start:start + need]
    if len(payload) < need:
        raise ValueError(f"{path}: payload {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def write_ppm(path, arr: np.ndarray) -> None:
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"P6 wants uint8 (H,W,3), got {arr.dtype} {arr.shape}")
    h, w = arr.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_pgm(path, arr: np.ndarray) -> None:
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError(f"P5 wants uint8 (H,W), got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def load_image_pair(color_path, thermal_path, image_id: str | None = None,
                    time_tag: str = "unknown") -> ImagePair:
    color = read_ppm(color_path)
    thermal = read_pgm(thermal_path)
    if color.shape[:2] != thermal.shape:
        raise ValueError(
            f"pair misaligned: {color_path} is {color.shape[:2]}, "
            f"{thermal_path} is {thermal.shape}")
    return ImagePair(color, thermal,
                     image_id if image_id is not None else Path(color_path).stem,
                     time_tag)


# ------------------------------------------------------------------- CLAHE


def _tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-entry intensity map for one tile: clip, redistribute, equalize."""
    hist = np.bincount(tile.ravel(), minlength=256).astype(float)
    if np.count_nonzero(hist) <= 1:
        # one occupied bin: equalization is undefined (and would drift the
        # value); map it through unchanged so constant regions are fixpoints
        return np.arange(256, dtype=float)
    limit = clip_limit * tile.size / 256.0
    excess = np.clip(hist - limit, 0.0, None).sum()
    hist = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(hist)
    cdf_min = cdf[int(tile.min())]
    out = (cdf - cdf_min) / (cdf[-1] - cdf_min) * 255.0
    return np.clip(np.rint(out), 0.0, 255.0)


def _axis_blend(n: int, centers: np.ndarray):
    """Per-coordinate (lower tile, upper tile, upper weight) along one axis."""
    coords = np.arange(n, dtype=float)
    hi = np.searchsorted(centers, coords)
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def clahe(img: np.ndarray, tiles: tuple[int, int] = (8, 8),
          clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a grayscale image.

    Per-tile histograms are clipped at clip_limit x (tile_pixels/256) with the
    excess spread uniformly, equalized, and the resulting per-tile maps
    blended bilinearly between tile centers.
    """
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError(f"clahe wants uint8 (H,W), got {arr.dtype} {arr.shape}")
    tx, ty = tiles
    if tx < 1 or ty < 1:
        raise ValueError(f"bad tile grid {tiles}")
    if not clip_limit > 0:
        raise ValueError(f"clip limit must be positive, got {clip_limit}")
    h, w = arr.shape
    if h < ty or w < tx:
        raise ValueError(f"image {h}x{w} smaller than tile grid {ty}x{tx}")
    row_edges = [h * r // ty for r in range(ty + 1)]
    col_edges = [w * c // tx for c in range(tx + 1)]
    maps = np.empty((ty, tx, 256))
    for r in range(ty):
        for c in range(tx):
            maps[r, c] = _tile_mapping(
                arr[row_edges[r]:row_edges[r + 1], col_edges[c]:col_edges[c + 1]],
                clip_limit)
    centers_y = np.array([(row_edges[r] + row_edges[r + 1]) / 2 - 0.5
                          for r in range(ty)])
    centers_x = np.array([(col_edges[c] + col_edges[c + 1]) / 2 - 0.5
                          for c in range(tx)])
    r0, r1, wy = _axis_blend(h, centers_y)
    c0, c1, wx = _axis_blend(w, centers_x)
    v = arr.astype(np.intp)
    top = (maps[r0[:, None], c0[None, :], v] * (1 - wx)[None, :]
           + maps[r0[:, None], c1[None, :], v] * wx[None, :])
    bottom = (maps[r1[:, None], c0[None, :], v] * (1 - wx)[None, :]
              + maps[r1[:, None], c1[None, :], v] * wx[None, :])
    out = top * (1 - wy)[:, None] + bottom * wy[:, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ------------------------------------------------------------ augmentation


def hflip(pair: ImagePair, gts) -> tuple[ImagePair, list[GroundTruth]]:
    """Mirror both modalities; box centers reflect about the vertical axis."""
    flipped = ImagePair(pair.color[:, ::-1].copy(), pair.thermal[:, ::-1].copy(),
                        pair.image_id, pair.time_tag)
    w = pair.width
    out = [replace(g, box=Box(w - g.box.cx, g.box.cy, g.box.w, g.box.h))
           for g in gts]
    return flipped, out


def _nearest_rows(n_out: int, n_src: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_src / n_out).astype(int),
                      n_src - 1)


def _clamp_boxes(gts, width: int, height: int) -> list[GroundTruth]:
    kept, dropped = [], 0
    for g in gts:
        x0, y0, x1, y1 = g.box.corners()
        x0, x1 = max(0.0, x0), min(float(width), x1)
        y0, y1 = max(0.0, y0), min(float(height), y1)
        if x1 - x0 > 0 and y1 - y0 > 0:
            kept.append(replace(g, box=Box((x0 + x1) / 2, (y0 + y1) / 2,
                                           x1 - x0, y1 - y0)))
        else:
            dropped += 1
    if dropped:
        warnings.warn(f"dropped {dropped} box(es) clamped to nothing")
    return kept


def resize_letterbox(pair: ImagePair, gts, scale: float):
    """Nearest-neighbor rescale, then center-pad or center-crop back to size.

    Padding is zero-filled.  Boxes follow the content; those pushed fully
    outside by a crop are dropped with a warning.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = pair.height, pair.width
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    rows, cols = _nearest_rows(nh, h), _nearest_rows(nw, w)
    rc = pair.color[rows][:, cols]
    rt = pair.thermal[rows][:, cols]
    oy, ox = (h - nh) // 2, (w - nw) // 2
    canvas_c = np.zeros_like(pair.color)
    canvas_t = np.zeros_like(pair.thermal)
    dy, sy = max(0, oy), max(0, -oy)
    dx, sx = max(0, ox), max(0, -ox)
    ch, cw = min(h, nh), min(w, nw)
    canvas_c[dy:dy + ch, dx:dx + cw] = rc[sy:sy + ch, sx:sx + cw]
    canvas_t[dy:dy + ch, dx:dx + cw] = rt[sy:sy + ch, sx:sx + cw]
    moved = [replace(g, box=Box(g.box.cx * nw / w + ox, g.box.cy * nh / h + oy,
                                g.box.w * nw / w, g.box.h * nh / h))
             for g in gts]
    out = ImagePair(canvas_c, canvas_t, pair.image_id, pair.time_tag)
    return out, _clamp_boxes(moved, w, h)


def augment(pair: ImagePair, gts, seed: int):
    """Each transform fires independently with probability 0.5.

    Photometric changes (brightness +-32, contrast x[0.5,1.5], hue shift
    +-18/180, saturation x[0.5,1.5], channel permutation) touch only the
    color stream; flip and rescale move both modalities and the boxes.
    """
    rng = np.random.default_rng(seed)
    color = pair.color.astype(np.float64)
    if rng.random() < 0.5:
        color = color + rng.uniform(-32.0, 32.0)
    if rng.random() < 0.5:
        color = (color - 128.0) * rng.uniform(0.5, 1.5) + 128.0
    hue_on = rng.random() < 0.5
    dh = rng.uniform(-18.0 / 180.0, 18.0 / 180.0) if hue_on else 0.0
    sat_on = rng.random() < 0.5
    fs = rng.uniform(0.5, 1.5) if sat_on else 1.0
    if hue_on or sat_on:
        hsv = mcolors.rgb_to_hsv(np.clip(color, 0.0, 255.0) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * fs, 0.0, 1.0)
        color = mcolors.hsv_to_rgb(hsv) * 255.0
    if rng.random() < 0.5:
        color = color[:, :, rng.permutation(3)]
    out = ImagePair(np.clip(np.rint(color), 0, 255).astype(np.uint8),
                    pair.thermal, pair.image_id, pair.time_tag)
    out_gts = list(gts)
    if rng.random() < 0.5:
        out, out_gts = hflip(out, out_gts)
    if rng.random() < 0.5:
        out, out_gts = resize_letterbox(out, out_gts, rng.uniform(0.8, 1.2))
    return out, out_gts


# --------------------------------------------------------------- synthesis

VISIBILITY_MODES = ("both", "color_only", "thermal_only", "mixed")


@dataclass(frozen=True)
class SynthSpec:
    num_pairs: int = 8
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    visibility: str = "mixed"
    mixed_color_fraction: float = 0.5
    noise_level: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.visibility not in VISIBILITY_MODES:
            raise ValueError(f"unknown visibility {self.visibility!r}")
        if not (0 <= self.min_objects <= self.max_objects):
            raise ValueError("object count range must satisfy 0 <= min <= max")
        if self.image_size < 16:
            raise ValueError(f"image size {self.image_size} too small")


@dataclass
class DatasetSample:
    pair: ImagePair
    gts: list[GroundTruth]

    @property
    def time_tag(self) -> str:
        return self.pair.time_tag


def _smooth_field(rng, h: int, w: int, cells: int = 6) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0[:, None], x0[None, :]]
    c01 = coarse[y0[:, None], x0[None, :] + 1]
    c10 = coarse[y0[:, None] + 1, x0[None, :]]
    c11 = coarse[y0[:, None] + 1, x0[None, :] + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def _place_boxes(rng, size: int, count: int) -> list[Box]:
    placed: list[Box] = []
    give_up = False
    for _ in range(count):
        for _ in range(100):
            bw = rng.uniform(0.14, 0.3) * size
            bh = min(bw * rng.uniform(1.2, 1.9), size - 4.0)
            cx = rng.uniform(bw / 2 + 1, size - bw / 2 - 1)
            cy = rng.uniform(bh / 2 + 1, size - bh / 2 - 1)
            cand = Box(cx, cy, bw, bh)
            if all(iou(cand, p) <= 0.2 for p in placed):
                placed.append(cand)
                break
        else:
            give_up = True
            break
    if give_up:
        warnings.warn(f"placed only {len(placed)} of {count} objects "
                      "within the overlap limit")
    return placed


def _render_object(rng, color: np.ndarray, thermal: np.ndarray, box: Box,
                   in_color: bool, in_thermal: bool) -> None:
    x0, y0, x1, y1 = (int(round(v)) for v in box.corners())
    sl = (slice(y0, y1), slice(x0, x1))
    hh, ww = y1 - y0, x1 - x0
    if in_thermal:
        patch = 190.0 + rng.normal(0.0, 4.0, (hh, ww))
        thermal[sl] = np.clip(patch, 0, 255).astype(np.uint8)
    if in_color:
        base = np.where(rng.random(3) < 0.5, rng.uniform(20, 55, 3),
                        rng.uniform(200, 235, 3))
        patch = np.tile(base, (hh, ww, 1)) + rng.normal(0.0, 6.0, (hh, ww, 3))
        stripe = (np.arange(y0, y1) % 4 < 2)[:, None, None]
        patch = np.where(stripe, patch * 0.78, patch)
        color[sl] = np.clip(patch, 0, 255).astype(np.uint8)


def synth_dataset(spec: SynthSpec) -> list[DatasetSample]:
    """Render reproducible color/thermal pairs with rectangle 'pedestrians'.

    Ground truth records every placed object, including ones invisible to one
    modality; mixed visibility draws color_only with the configured fraction
    and thermal_only otherwise, per object.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    samples = []
    for i in range(spec.num_pairs):
        color = np.empty((size, size, 3))
        for ch, base in enumerate((118.0, 122.0, 126.0)):
            color[:, :, ch] = base + 18.0 * _smooth_field(rng, size, size)
        thermal = 70.0 + 12.0 * _smooth_field(rng, size, size)
        color += rng.normal(0.0, spec.noise_level, color.shape)
        thermal += rng.normal(0.0, spec.noise_level, thermal.shape)
        color = np.clip(color, 0, 255).astype(np.uint8)
        thermal = np.clip(thermal, 0, 255).astype(np.uint8)
        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        boxes = _place_boxes(rng, size, count)
        gts = []
        for box in boxes:
            mode = spec.visibility
            if mode == "mixed":
                mode = ("color_only" if rng.random() < spec.mixed_color_fraction
                        else "thermal_only")
            _render_object(rng, color, thermal, box,
                           in_color=mode != "thermal_only",
                           in_thermal=mode != "color_only")
            gts.append(GroundTruth(box, "person"))
        pair = ImagePair(color, thermal, f"{i:04d}",
                         "day" if i % 2 == 0 else "night")
        samples.append(DatasetSample(pair, gts))
    return samples


# ----------------------------------------------------------- dataset trees


def save_dataset(samples, root) -> None:
    """Write `<root>/{color,thermal,ann}/<id>.*` plus meta.csv (id,time_tag)."""
    root = Path(root)
    for sub in ("color", "thermal", "ann"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    with open(root / "meta.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "time_tag"])
        for s in samples:
            pid = s.pair.image_id
            write_ppm(root / "color" / f"{pid}.ppm", s.pair.color)
            write_pgm(root / "thermal" / f"{pid}.pgm", s.pair.thermal)
            (root / "ann" / f"{pid}.txt").write_text(serialize_annotations(s.gts))
            writer.writerow([pid, s.pair.time_tag])


def load_dataset(root) -> list[DatasetSample]:
    root = Path(root)
    color_dir = root / "color"
    if not color_dir.is_dir():
        raise FileNotFoundError(f"{color_dir} is not a directory")
    tags: dict[str, str] = {}
    meta = root / "meta.csv"
    if meta.exists():
        with open(meta, newline="") as f:
            for row in csv.DictReader(f):
                tags[row["id"]] = row["time_tag"]
    samples = []
    for ppm in sorted(color_dir.glob("*.ppm")):
        pid = ppm.stem
        pair = load_image_pair(ppm, root / "thermal" / f"{pid}.pgm", pid,
                               tags.get(pid, "unknown"))
        ann = root / "ann" / f"{pid}.txt"
        gts = parse_annotations(ann.read_text()) if ann.exists() else []
        samples.append(DatasetSample(pair, gts))
    return samples
