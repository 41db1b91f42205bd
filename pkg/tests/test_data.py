"""Annotation parsing, PNM files, CLAHE, augmentation, synthetic data."""

import numpy as np
import pytest

from gfdet.data import (
    AnnotationError,
    DatasetSample,
    GroundTruth,
    ImagePair,
    SynthSpec,
    augment,
    clahe,
    hflip,
    load_dataset,
    load_image_pair,
    parse_annotations,
    read_pgm,
    read_ppm,
    resize_letterbox,
    save_dataset,
    serialize_annotations,
    synth_dataset,
    write_pgm,
    write_ppm,
)
from gfdet.detection import Box


def _pair(h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    return ImagePair(
        rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
        rng.integers(0, 256, (h, w), dtype=np.uint8),
        "t0",
    )


# ------------------------------------------------------------- annotations


def test_parse_single_person_line():
    (gt,) = parse_annotations("person 10 20 30 60")
    assert gt.raw_class == "person"
    assert gt.train_class == "pedestrian"
    assert (gt.box.cx, gt.box.cy, gt.box.w, gt.box.h) == (25.0, 50.0, 30.0, 60.0)


def test_parse_skips_blanks_and_comments():
    text = "\n# header comment\n\nperson 0 0 4 8\n  # indented comment\n"
    assert len(parse_annotations(text)) == 1


def test_parse_empty_file():
    assert parse_annotations("") == []


@pytest.mark.parametrize("cls", ["person", "people", "cyclist", "person?"])
def test_all_raw_classes_train_as_pedestrian(cls):
    (gt,) = parse_annotations(f"{cls} 1 2 3 4")
    assert gt.raw_class == cls
    assert gt.train_class == "pedestrian"


def test_parse_unknown_class_reports_line_number():
    with pytest.raises(AnnotationError, match="line 2"):
        parse_annotations("person 1 2 3 4\ndog 1 2 3 4")


def test_parse_collects_every_fault():
    bad = "person 1 2 3\nperson a 2 3 4\nperson 1 2 0 4"
    with pytest.raises(AnnotationError) as exc:
        parse_annotations(bad)
    msg = str(exc.value)
    assert "line 1" in msg and "line 2" in msg and "line 3" in msg


def test_parse_rejects_negative_height():
    with pytest.raises(AnnotationError, match="non-positive"):
        parse_annotations("person 1 2 3 -4")


def test_serialize_parse_round_trip():
    text = "person 10 20 30 60\nperson? 5.5 5 10 20.25\ncyclist 0 0 3 4\n"
    first = parse_annotations(text)
    again = parse_annotations(serialize_annotations(first))
    assert again == first


def test_serialize_empty():
    assert serialize_annotations([]) == ""


# ----------------------------------------------------------------- PNM I/O


def test_ppm_round_trip(tmp_path):
    arr = np.random.default_rng(1).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    p = tmp_path / "x.ppm"
    write_ppm(p, arr)
    assert np.array_equal(read_ppm(p), arr)


def test_pgm_round_trip(tmp_path):
    arr = np.random.default_rng(2).integers(0, 256, (6, 4), dtype=np.uint8)
    p = tmp_path / "x.pgm"
    write_pgm(p, arr)
    assert np.array_equal(read_pgm(p), arr)


def test_pnm_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 # width\n2\n255\n" + bytes([1, 2, 3, 4]))
    assert read_pgm(p).tolist() == [[1, 2], [3, 4]]


def test_pnm_bad_magic(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n2 2\n255\n1 2 3 4")
    with pytest.raises(ValueError, match="magic"):
        read_pgm(p)


def test_pnm_truncated_payload(tmp_path):
    p = tmp_path / "short.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
    with pytest.raises(ValueError, match="payload"):
        read_pgm(p)


def test_pnm_wrong_maxval(tmp_path):
    p = tmp_path / "deep.pgm"
    p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(ValueError, match="maxval"):
        read_pgm(p)


def test_load_image_pair_checks_alignment(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
    write_pgm(tmp_path / "a.pgm", np.zeros((8, 8), dtype=np.uint8))
    with pytest.raises(ValueError, match="misaligned"):
        load_image_pair(tmp_path / "a.ppm", tmp_path / "a.pgm")


def test_load_image_pair_defaults_id_from_filename(tmp_path):
    write_ppm(tmp_path / "set05.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
    write_pgm(tmp_path / "set05.pgm", np.zeros((4, 4), dtype=np.uint8))
    pair = load_image_pair(tmp_path / "set05.ppm", tmp_path / "set05.pgm")
    assert pair.image_id == "set05"
    assert pair.time_tag == "unknown"


def test_image_pair_validates_shapes_and_tag():
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    gray = np.zeros((4, 4), dtype=np.uint8)
    with pytest.raises(ValueError):
        ImagePair(rgb.astype(np.float64), gray, "x")
    with pytest.raises(ValueError):
        ImagePair(np.zeros((4, 4, 4), dtype=np.uint8), gray, "x")
    with pytest.raises(ValueError):
        ImagePair(rgb, gray, "x", time_tag="dusk")


# ------------------------------------------------------------------- CLAHE


def test_clahe_constant_image_is_fixpoint():
    img = np.full((32, 32), 97, dtype=np.uint8)
    out = clahe(img)
    assert np.array_equal(out, img)
    assert np.array_equal(clahe(out), out)


def test_clahe_widens_low_contrast_ramp():
    ramp = np.tile(np.linspace(100, 140, 48).astype(np.uint8), (48, 1))
    out = clahe(ramp, tiles=(4, 4), clip_limit=4.0)
    assert int(out.max()) - int(out.min()) > int(ramp.max()) - int(ramp.min())


def test_clahe_matches_global_equalization_oracle():
    # 1x1 tiles and an unreachable clip limit reduce CLAHE to plain
    # histogram equalization, checked against a direct CDF mapping.
    rng = np.random.default_rng(3)
    for _ in range(5):
        img = rng.integers(40, 200, (24, 20), dtype=np.uint8)
        got = clahe(img, tiles=(1, 1), clip_limit=1e9)
        hist = np.bincount(img.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        cdf_min = cdf[int(img.min())]
        table = np.clip(np.rint(
            (cdf - cdf_min) / (cdf[-1] - cdf_min) * 255.0), 0, 255)
        assert np.array_equal(got, table[img].astype(np.uint8))


def test_clahe_output_range_and_dtype():
    img = np.random.default_rng(5).integers(0, 256, (40, 40), dtype=np.uint8)
    out = clahe(img)
    assert out.dtype == np.uint8 and out.shape == img.shape


def test_clahe_rejects_bad_inputs():
    img = np.zeros((8, 8), dtype=np.uint8)
    with pytest.raises(ValueError):
        clahe(img, tiles=(0, 4))
    with pytest.raises(ValueError):
        clahe(img, clip_limit=0.0)
    with pytest.raises(ValueError):
        clahe(np.zeros((4, 4), dtype=np.uint8), tiles=(8, 8))
    with pytest.raises(ValueError):
        clahe(img.astype(np.int32))


# ------------------------------------------------------------ augmentation


def test_hflip_mirrors_pixels_and_boxes():
    pair = _pair()
    gts = [GroundTruth(Box(3.0, 8.0, 4.0, 6.0), "person")]
    flipped, fgts = hflip(pair, gts)
    assert np.array_equal(flipped.color, pair.color[:, ::-1])
    assert np.array_equal(flipped.thermal, pair.thermal[:, ::-1])
    assert fgts[0].box == Box(13.0, 8.0, 4.0, 6.0)


def test_hflip_twice_is_identity():
    pair = _pair(seed=9)
    gts = [GroundTruth(Box(3.0, 8.0, 4.0, 6.0), "person")]
    back, bgts = hflip(*hflip(pair, gts))
    assert np.array_equal(back.color, pair.color)
    assert np.array_equal(back.thermal, pair.thermal)
    assert bgts == gts


def test_resize_letterbox_half_scale_centers_content():
    pair = _pair()
    gts = [GroundTruth(Box(8.0, 8.0, 8.0, 8.0), "person")]
    out, ogts = resize_letterbox(pair, gts, 0.5)
    assert out.color.shape == pair.color.shape
    # 16 -> 8 content centered with 4px borders
    assert np.all(out.thermal[:4] == 0) and np.all(out.thermal[:, :4] == 0)
    assert ogts[0].box == Box(8.0, 8.0, 4.0, 4.0)


def test_resize_letterbox_upscale_crops_and_drops_outside_boxes():
    pair = _pair()
    edge = GroundTruth(Box(0.5, 0.5, 1.0, 1.0), "person")
    with pytest.warns(UserWarning, match="dropped"):
        out, ogts = resize_letterbox(pair, [edge], 2.0)
    assert out.thermal.shape == pair.thermal.shape
    assert ogts == []


def test_resize_letterbox_clamps_straddling_boxes_into_bounds():
    pair = _pair()
    gts = [GroundTruth(Box(2.0, 8.0, 4.0, 6.0), "person")]
    _, ogts = resize_letterbox(pair, gts, 1.5)
    (g,) = ogts
    x0, y0, x1, y1 = g.box.corners()
    assert 0 <= x0 < x1 <= 16 and 0 <= y0 < y1 <= 16


def _coin_count_seed(predicate, limit=5000):
    for seed in range(limit):
        if predicate(np.random.default_rng(seed)):
            return seed
    raise AssertionError("no seed found")


def test_augment_identity_when_every_coin_declines():
    seed = _coin_count_seed(lambda r: all(r.random() >= 0.5 for _ in range(7)))
    pair = _pair(seed=4)
    gts = [GroundTruth(Box(8.0, 8.0, 4.0, 6.0), "person")]
    out, ogts = augment(pair, gts, seed)
    assert np.array_equal(out.color, pair.color)
    assert np.array_equal(out.thermal, pair.thermal)
    assert ogts == gts


def test_augment_same_seed_is_bit_identical():
    pair = _pair(seed=6)
    gts = [GroundTruth(Box(8.0, 8.0, 4.0, 6.0), "person")]
    a_pair, a_gts = augment(pair, gts, 1234)
    b_pair, b_gts = augment(pair, gts, 1234)
    assert np.array_equal(a_pair.color, b_pair.color)
    assert np.array_equal(a_pair.thermal, b_pair.thermal)
    assert a_gts == b_gts


def test_augment_photometric_transforms_leave_thermal_alone():
    # brightness fires visibly; flip and resize coins decline
    def pred(r):
        bright = r.random() < 0.5
        delta = r.uniform(-32.0, 32.0) if bright else 0.0
        if r.random() < 0.5:
            r.uniform(0.5, 1.5)
        if r.random() < 0.5:
            r.uniform(-0.1, 0.1)
        if r.random() < 0.5:
            r.uniform(0.5, 1.5)
        if r.random() < 0.5:
            r.permutation(3)
        flip = r.random() < 0.5
        resize = r.random() < 0.5
        return bright and abs(delta) > 2.0 and not flip and not resize

    seed = _coin_count_seed(pred)
    pair = _pair(seed=8)
    out, _ = augment(pair, [], seed)
    assert np.array_equal(out.thermal, pair.thermal)
    assert not np.array_equal(out.color, pair.color)


def test_augment_keeps_boxes_inside_bounds():
    rng = np.random.default_rng(21)
    pair = _pair(h=24, w=24, seed=10)
    gts = [GroundTruth(Box(6.0, 6.0, 8.0, 10.0), "person"),
           GroundTruth(Box(18.0, 16.0, 6.0, 9.0), "person")]
    for _ in range(30):
        with warnings_as_allowed():
            _, ogts = augment(pair, gts, int(rng.integers(0, 1 << 31)))
        assert len(ogts) <= len(gts)
        for g in ogts:
            x0, y0, x1, y1 = g.box.corners()
            assert -1e-9 <= x0 < x1 <= 24 + 1e-9
            assert -1e-9 <= y0 < y1 <= 24 + 1e-9


import contextlib
import warnings as _warnings


@contextlib.contextmanager
def warnings_as_allowed():
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        yield


# --------------------------------------------------------------- synthesis


def test_synth_is_reproducible():
    spec = SynthSpec(num_pairs=3, seed=42)
    a = synth_dataset(spec)
    b = synth_dataset(spec)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.pair.color, sb.pair.color)
        assert np.array_equal(sa.pair.thermal, sb.pair.thermal)
        assert sa.gts == sb.gts
        assert sa.time_tag == sb.time_tag


def test_synth_zero_objects_yields_background_only():
    (s,) = synth_dataset(SynthSpec(num_pairs=1, min_objects=0, max_objects=0))
    assert s.gts == []
    assert s.pair.thermal.mean() < 120  # no bright rectangles anywhere


def _region_mean(img, box):
    x0, y0, x1, y1 = (int(round(v)) for v in box.corners())
    return img[y0:y1, x0:x1].mean()


def _color_channel_deviation(color, box):
    """Largest per-RGB-channel |object mean - background median|."""
    devs = []
    for ch in range(3):
        plane = color[:, :, ch]
        devs.append(abs(_region_mean(plane, box) - float(np.median(plane))))
    return devs


def test_synth_both_visibility_contrasts_in_both_modalities():
    spec = SynthSpec(num_pairs=4, visibility="both", seed=7, noise_level=6.0)
    for s in synth_dataset(spec):
        t_bg = float(np.median(s.pair.thermal))
        for gt in s.gts:
            t_obj = _region_mean(s.pair.thermal, gt.box)
            assert abs(t_obj - t_bg) > 4 * spec.noise_level
            # every color channel is pushed far from the background
            assert min(_color_channel_deviation(s.pair.color, gt.box)) \
                > 4 * spec.noise_level


def test_synth_color_only_objects_are_thermally_invisible():
    spec = SynthSpec(num_pairs=4, visibility="color_only", seed=11)
    for s in synth_dataset(spec):
        t_bg = float(np.median(s.pair.thermal))
        for gt in s.gts:
            assert abs(_region_mean(s.pair.thermal, gt.box) - t_bg) < 25
            assert min(_color_channel_deviation(s.pair.color, gt.box)) > 24


def test_synth_thermal_only_objects_are_invisible_in_color():
    spec = SynthSpec(num_pairs=4, visibility="thermal_only", seed=13)
    for s in synth_dataset(spec):
        for gt in s.gts:
            assert _region_mean(s.pair.thermal, gt.box) > 150
            assert max(_color_channel_deviation(s.pair.color, gt.box)) < 25


def test_synth_mixed_fraction_is_binomial():
    spec = SynthSpec(num_pairs=400, image_size=48, min_objects=2, max_objects=3,
                     visibility="mixed", mixed_color_fraction=0.5, seed=17)
    color_only = total = 0
    for s in synth_dataset(spec):
        t_bg = float(np.median(s.pair.thermal))
        for gt in s.gts:
            total += 1
            if abs(_region_mean(s.pair.thermal, gt.box) - t_bg) < 40:
                color_only += 1
    assert total >= 800
    assert 0.44 <= color_only / total <= 0.56


def test_synth_day_night_tags_alternate():
    tags = [s.time_tag for s in synth_dataset(SynthSpec(num_pairs=4))]
    assert tags == ["day", "night", "day", "night"]


def test_synth_emits_warning_when_placement_fails():
    spec = SynthSpec(num_pairs=1, image_size=16, min_objects=30, max_objects=30,
                     seed=3)
    with pytest.warns(UserWarning, match="placed only"):
        (s,) = synth_dataset(spec)
    assert len(s.gts) < 30


def test_synth_rejects_bad_spec():
    with pytest.raises(ValueError):
        synth_dataset(SynthSpec(visibility="night_vision"))
    with pytest.raises(ValueError):
        synth_dataset(SynthSpec(min_objects=3, max_objects=1))
    with pytest.raises(ValueError):
        synth_dataset(SynthSpec(image_size=8))


# ----------------------------------------------------------- dataset trees


def test_save_load_round_trip(tmp_path):
    samples = synth_dataset(SynthSpec(num_pairs=3, seed=23))
    save_dataset(samples, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert len(loaded) == 3
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.pair.color, b.pair.color)
        assert np.array_equal(a.pair.thermal, b.pair.thermal)
        assert a.pair.image_id == b.pair.image_id
        assert a.time_tag == b.time_tag
        assert len(a.gts) == len(b.gts)
        for ga, gb in zip(a.gts, b.gts):
            assert ga.raw_class == gb.raw_class
            assert abs(ga.box.cx - gb.box.cx) < 1e-12
            assert abs(ga.box.w - gb.box.w) < 1e-12


def test_load_dataset_without_meta_tags_unknown(tmp_path):
    samples = synth_dataset(SynthSpec(num_pairs=1, seed=29))
    save_dataset(samples, tmp_path / "ds")
    (tmp_path / "ds" / "meta.csv").unlink()
    (loaded,) = load_dataset(tmp_path / "ds")
    assert loaded.time_tag == "unknown"


def test_load_dataset_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
