import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seyolo.detect import Detection, decode, decode_heads, iou, nms
from seyolo.graph import NetConfig

import oracles
from cases import random_detections

ANCHORS = ((8, 8), (16, 12), (12, 16))


def test_decode_zero_logits_cell_00():
    head = np.zeros((24, 16, 16))
    dets = decode(head, ANCHORS, 16, conf_threshold=0.0)
    first = dets[0]
    assert first.box[0] == pytest.approx(0.03125) and first.box[1] == pytest.approx(0.03125)
    assert first.score == pytest.approx(0.25)
    assert first.box[2] == pytest.approx(8 / 128)
    assert first.class_id == 0
    assert len(dets) == 16 * 16 * 3


def test_decode_suppressed_objectness():
    head = np.zeros((24, 8, 8))
    head[4::8] = -20
    assert decode(head, ANCHORS, 8) == []


def test_decode_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for grid, classes in ((8, 3), (16, 1), (4, 5)):
        per = 5 + classes
        head = rng.normal(0, 2, size=(3 * per, grid, grid))
        got = decode(head, ANCHORS, grid, conf_threshold=0.0, image_size=128)
        want = []
        for i in range(grid):
            for j in range(grid):
                for a in range(3):
                    want.append(oracles.decode_cell(head, ANCHORS, grid, 128, a, i, j, per))
        assert len(got) == len(want)
        for d, (cls, score, box) in zip(got, want):
            assert d.class_id == cls
            assert d.score == pytest.approx(score, rel=1e-12)
            assert d.box == pytest.approx(box, rel=1e-12)
        thr = 0.3
        kept = decode(head, ANCHORS, grid, conf_threshold=thr)
        assert len(kept) == sum(s >= thr for _, s, _ in want)


def test_decode_errors():
    with pytest.raises(ValueError):
        decode(np.zeros((23, 8, 8)), ANCHORS, 8)
    with pytest.raises(ValueError):
        decode(np.zeros((24, 8, 8)), ANCHORS, 16)


def test_decode_heads_uses_both_grids():
    heads = (np.zeros((24, 8, 8)), np.zeros((24, 16, 16)))
    assert len(decode_heads(heads, NetConfig(), 0.0)) == 3 * (64 + 256)


def test_class_argmax_invariant_under_uniform_shift():
    rng = np.random.default_rng(1)
    head = rng.normal(size=(24, 8, 8))
    shifted = head.copy()
    for a in range(3):
        shifted[a * 8 + 5:a * 8 + 8] += 1.7
    a_dets = decode(head, ANCHORS, 8, 0.0)
    b_dets = decode(shifted, ANCHORS, 8, 0.0)
    assert [d.class_id for d in a_dets] == [d.class_id for d in b_dets]
    assert [d.box for d in a_dets] == [d.box for d in b_dets]


def test_iou_examples():
    a = (0.5, 0.5, 0.2, 0.2)
    assert iou(a, a) == 1.0
    assert iou(a, (0.1, 0.1, 0.1, 0.1)) == 0.0
    # unit squares overlapping half their area
    assert iou((0.0, 0.0, 1.0, 1.0), (0.5, 0.0, 1.0, 1.0)) == pytest.approx(1 / 3)


def test_nms_examples():
    box = (0.5, 0.5, 0.2, 0.2)
    kept = nms([Detection(0, 0.8, box), Detection(0, 0.9, box)], 0.5)
    assert kept == [Detection(0, 0.9, box)]
    disjoint = [Detection(0, 0.5, (0.1 + 0.2 * k, 0.5, 0.1, 0.1)) for k in range(4)]
    assert len(nms(disjoint, 0.5)) == 4
    # different classes never suppress each other
    assert len(nms([Detection(0, 0.9, box), Detection(1, 0.8, box)], 0.5)) == 2


def test_nms_matches_quadratic_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        dets = random_detections(rng, int(rng.integers(1, 80)))
        thr = float(rng.uniform(0.2, 0.7))
        assert nms(dets, thr) == oracles.nms(dets, thr)


box_st = st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.01, 0.5), st.floats(0.01, 0.5))


@settings(max_examples=300, deadline=None)
@given(box_st, box_st)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))
    assert v == pytest.approx(oracles.iou(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.floats(0, 1), box_st), max_size=30), st.floats(0.1, 0.9))
def test_nms_subset_and_sorted(items, thr):
    dets = [Detection(c, s, b) for c, s, b in items]
    kept = nms(dets, thr)
    assert all(k in dets for k in kept)
    for c in range(3):
        scores = [k.score for k in kept if k.class_id == c]
        assert scores == sorted(scores, reverse=True)
    for x in kept:
        for y in kept:
            if x is not y and x.class_id == y.class_id:
                assert iou(x.box, y.box) < thr or math.isclose(iou(x.box, y.box), thr)
