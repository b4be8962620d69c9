import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seyolo.detect import Detection, GroundTruthBox
from seyolo.evalkit import (
    LabelFormatError,
    average_precision,
    format_label,
    generate_shapes_dataset,
    load_dataset,
    map_eval,
    parse_label_file,
)
from seyolo.ppm import read_ppm

import oracles
from cases import five_image_case, per_class


def test_hand_derived_ap_five_sixths():
    g1, g2 = (0.25, 0.25, 0.2, 0.2), (0.75, 0.75, 0.2, 0.2)
    gts = [("a", g1), ("a", g2)]
    dets = [("a", 0.9, g1), ("a", 0.8, (0.5, 0.1, 0.1, 0.1)), ("a", 0.7, g2)]
    assert average_precision(dets, gts) == pytest.approx(5 / 6, abs=1e-12)


def test_ap_trivial_cases():
    gts = [("a", (0.5, 0.5, 0.2, 0.2))]
    assert average_precision([("a", 0.5, (0.5, 0.5, 0.2, 0.2))], gts) == 1.0
    assert average_precision([], gts) == 0.0
    assert math.isnan(average_precision([], []))


def test_ap_matches_threshold_sweep_oracle():
    for seed in range(20):
        preds, gts = five_image_case(seed)
        for c in range(3):
            dets, boxes = per_class(preds, gts, c)
            got = average_precision(dets, boxes)
            want = oracles.ap_threshold_sweep(dets, boxes)
            if math.isnan(want):
                assert math.isnan(got)
            else:
                assert abs(got - want) <= 1e-9


def test_map_oracle_detector_is_one():
    _, gts = five_image_case(3)
    preds = {k: [Detection(g.class_id, 1.0, g.box) for g in v] for k, v in gts.items()}
    rep = map_eval(preds, gts, 3)
    assert abs(rep.map - 1.0) <= 1e-9
    assert all(rep.fp[c] == 0 and rep.fn[c] == 0 for c in rep.ap)


def test_map_empty_predictions_is_zero():
    _, gts = five_image_case(4)
    assert map_eval({}, gts, 3).map == 0.0


def test_map_monotone_in_false_positives():
    _, gts = five_image_case(5)
    maps = []
    for n_fp in range(4):
        preds = {}
        for i, (k, v) in enumerate(sorted(gts.items())):
            # TPs of image i score 1 - 0.1 i; each image's strays are its lowest
            # scores yet still outrank later images' TPs
            top = 1.0 - 0.1 * i
            preds[k] = [Detection(g.class_id, top, g.box) for g in v]
            preds[k] += [Detection(g.class_id, top - 0.05 - 0.01 * j, (0.02, 0.02, 0.01, 0.01))
                         for g in v[:1] for j in range(n_fp)]
        maps.append(map_eval(preds, gts, 3).map)
    assert maps[0] == 1.0
    assert all(a > b for a, b in zip(maps, maps[1:]))


def test_map_rejects_bad_class():
    with pytest.raises(ValueError):
        map_eval({"a": [Detection(5, 0.5, (0.5, 0.5, 0.1, 0.1))]}, {}, 3)


def test_map_order_independent():
    preds, gts = five_image_case(6)
    rev_p = dict(reversed(list(preds.items())))
    rev_g = dict(reversed(list(gts.items())))
    assert map_eval(preds, gts, 3).to_json() == map_eval(rev_p, rev_g, 3).to_json()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["square", "exp", "affine"]))
def test_ap_invariant_under_monotone_rescale(seed, kind):
    preds, gts = five_image_case(seed)
    f = {"square": lambda s: s * s, "exp": math.exp, "affine": lambda s: 3 * s + 1}[kind]
    for c in range(3):
        dets, boxes = per_class(preds, gts, c)
        rescaled = [(k, f(s), b) for k, s, b in dets]
        a, b = average_precision(dets, boxes), average_precision(rescaled, boxes)
        assert (math.isnan(a) and math.isnan(b)) or a == b


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_lowest_fp_never_helps(seed):
    preds, gts = five_image_case(seed)
    for c in range(3):
        dets, boxes = per_class(preds, gts, c)
        if boxes:
            worse = dets + [("zzz", -1.0, (0.5, 0.5, 0.1, 0.1))]
            assert average_precision(worse, boxes) <= average_precision(dets, boxes)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_removing_a_tp_never_helps(seed):
    rng = np.random.default_rng(seed)
    _, gts = five_image_case(seed)
    boxes = [(k, g.box) for k in sorted(gts) for g in gts[k]]
    # exact hits with random scores plus strays far from every ground truth
    dets = [(k, float(rng.uniform()), b) for k, b in boxes]
    dets += [(k, float(rng.uniform()), (0.02, 0.02, 0.01, 0.01)) for k, _ in boxes[: int(rng.integers(0, 4))]]
    base = average_precision(dets, boxes)
    drop = int(rng.integers(len(boxes)))
    assert average_precision(dets[:drop] + dets[drop + 1:], boxes) <= base


def test_dataset_determinism(tmp_path):
    generate_shapes_dataset(6, 42, 64, tmp_path / "a")
    generate_shapes_dataset(6, 42, 64, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in ("images", "labels"):
        c = filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, c.common_files, shallow=False)
        assert not mismatch and not errors
    generate_shapes_dataset(6, 43, 64, tmp_path / "c")
    assert (tmp_path / "a/images/00000.ppm").read_bytes() != (tmp_path / "c/images/00000.ppm").read_bytes()


def test_1500_images_with_valid_labels(tmp_path):
    items = generate_shapes_dataset(1500, 0, 128, tmp_path)
    assert len(items) == 1500
    assert len(list((tmp_path / "images").glob("*.ppm"))) == 1500
    assert len(list((tmp_path / "labels").glob("*.txt"))) == 1500
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 1500
    for item in loaded:
        assert 1 <= len(item.ground_truths) <= 4
        for g in item.ground_truths:
            assert 0 <= g.class_id <= 2
            cx, cy, w, h = g.box
            assert w > 0 and h > 0 and all(0 <= v <= 1 for v in g.box)
    assert read_ppm(loaded[0].image_path).shape == (128, 128, 3)


def test_label_roundtrip_and_errors(tmp_path):
    gts = [GroundTruthBox(1, (0.5, 0.25, 0.125, 0.0625))]
    p = tmp_path / "x.txt"
    p.write_text(format_label(gts))
    assert parse_label_file(p) == gts
    for bad in ("1 0.5 0.5 0.1\n", "x 0.5 0.5 0.1 0.1\n", "0 1.5 0.5 0.1 0.1\n", "0 0.5 0.5 0 0.1\n", "-1 0.5 0.5 0.1 0.1\n"):
        p.write_text("0 0.5 0.5 0.1 0.1\n" + bad)
        with pytest.raises(LabelFormatError, match=r"x\.txt:2"):
            parse_label_file(p)
