import struct

import numpy as np
import pytest

from seyolo.graph import build_squeezed_edge_yolo, count_params, execute, NetConfig
from seyolo.modelio import (
    ArchiveError,
    CorruptArchiveError,
    MissingTensorError,
    TensorRecord,
    TensorShapeError,
    bind,
    decode_archive,
    encode_archive,
    graph_tensors,
    init_random_weights,
    load_model,
    load_weights,
    read_archive,
    save_weights,
)
from seyolo.ptq import quantize_graph
from seyolo.qtensor import QuantParams


@pytest.fixture(scope="module")
def float_graph():
    return init_random_weights(build_squeezed_edge_yolo(), seed=0)


@pytest.fixture(scope="module")
def int8_graph(float_graph):
    rng = np.random.default_rng(0)
    return quantize_graph(float_graph, [rng.uniform(size=(3, 128, 128)) for _ in range(2)])


def _same_records(a, b):
    assert list(a) == list(b)
    for name in a:
        ra, rb = a[name], b[name]
        assert ra.dtype == rb.dtype and ra.array.dtype == rb.array.dtype
        assert np.array_equal(ra.array, rb.array)
        if ra.qparams is None:
            assert rb.qparams is None
        else:
            assert np.array_equal(np.asarray(ra.qparams.scale), np.asarray(rb.qparams.scale))
            assert ra.qparams.zero_point == rb.qparams.zero_point
            assert ra.qparams.axis == rb.qparams.axis


@pytest.mark.parametrize("which", ["float_graph", "int8_graph"])
def test_roundtrip_bit_exact(which, request, tmp_path):
    g = request.getfixturevalue(which)
    p = tmp_path / "m.seyw"
    save_weights(g, p)
    t0, m0 = graph_tensors(g)
    t1, m1 = read_archive(p)
    _same_records(t0, t1)
    assert m0 == m1
    g2 = load_model(p)
    t2, m2 = graph_tensors(g2)
    _same_records(t0, t2)
    save_weights(g2, tmp_path / "again.seyw")
    assert (tmp_path / "again.seyw").read_bytes() == p.read_bytes()


def test_int8_reload_runs_identically(int8_graph, tmp_path):
    p = tmp_path / "q.seyw"
    save_weights(int8_graph, p)
    x = np.random.default_rng(5).uniform(size=(3, 128, 128))
    a = execute(int8_graph, x)
    b = execute(load_model(p, mode="int8"), x)
    assert all(np.array_equal(h1.data, h2.data) for h1, h2 in zip(a, b))


def test_every_dtype_roundtrips():
    tensors = {
        "a": TensorRecord("a", "f32", np.array([[1.5, -2.25], [np.pi, 0.0]])),
        "b": TensorRecord("b", "i8", np.array([-128, 0, 127]), QuantParams(0.125, -3)),
        "c": TensorRecord("c", "i32", np.array([2 ** 31 - 1, -2 ** 31])),
        "d": TensorRecord("d", "i8", np.zeros((2, 1)), QuantParams(np.array([0.5, 0.25]), 0, axis=0)),
    }
    back, meta = decode_archive(encode_archive(tensors, {"k": 1}))
    _same_records(tensors, back)
    assert meta == {"k": 1}


def test_empty_archive():
    buf = encode_archive({})
    assert buf[:4] == b"SEYW"
    assert struct.unpack("<I", buf[4:8]) == (1,)
    assert decode_archive(buf) == ({}, {})


def test_overhead_below_two_percent(int8_graph):
    tensors, meta = graph_tensors(int8_graph)
    buf = encode_archive(tensors, meta)
    payload = sum(r.array.nbytes for r in tensors.values())
    n_bias = sum(r.array.size for r in tensors.values() if r.dtype == "i32")
    # int8 weights take one byte per parameter, int32 biases four
    assert payload == count_params(int8_graph) + 3 * n_bias
    assert (len(buf) - payload) / payload < 0.02


def test_missing_bias_is_named(float_graph, tmp_path):
    tensors, meta = graph_tensors(float_graph)
    del tensors["neck.12.conv.bias"]
    p = tmp_path / "m.seyw"
    p.write_bytes(encode_archive(tensors, meta))
    with pytest.raises(MissingTensorError, match="neck.12.conv.bias"):
        load_model(p)


def test_shape_mismatch_and_extra_are_named(float_graph):
    g = build_squeezed_edge_yolo()
    tensors, meta = graph_tensors(float_graph)
    bad = dict(tensors)
    bad["backbone.0.conv.bias"] = TensorRecord("backbone.0.conv.bias", "f32", np.zeros(3))
    with pytest.raises(TensorShapeError, match="backbone.0.conv.bias"):
        bind(g, bad, meta)
    extra = dict(tensors)
    extra["stray"] = TensorRecord("stray", "f32", np.zeros(1))
    with pytest.raises(ArchiveError, match="stray"):
        bind(g, extra, meta)


def test_truncated_and_corrupt(float_graph, tmp_path):
    tensors, meta = graph_tensors(float_graph)
    buf = encode_archive(tensors, meta)
    for cut in (0, 3, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CorruptArchiveError):
            decode_archive(buf[:cut])
    with pytest.raises(CorruptArchiveError):
        decode_archive(b"NOPE" + buf[4:])
    with pytest.raises(CorruptArchiveError):
        decode_archive(buf + b"\0\0\0\0")
    p = tmp_path / "t.seyw"
    p.write_bytes(buf[:100])
    g = build_squeezed_edge_yolo()
    with pytest.raises(CorruptArchiveError):
        load_weights(p, g)
    assert not g.bound


def test_mode_mismatch(float_graph, tmp_path):
    p = tmp_path / "f.seyw"
    save_weights(float_graph, p)
    with pytest.raises(ArchiveError):
        load_model(p, mode="int8")


def test_seeds():
    g = build_squeezed_edge_yolo()
    enc = lambda s: encode_archive(*graph_tensors(init_random_weights(g, s)))
    assert enc(3) == enc(3)
    assert enc(3) != enc(4)


def test_random_init_bounds(float_graph):
    tensors, _ = graph_tensors(float_graph)
    w = tensors["neck.3.conv.weight"].array
    assert np.abs(w).max() <= 1 / np.sqrt(128)
    assert np.all(tensors["neck.3.conv.bias"].array == 0)


def test_config_travels_with_archive(tmp_path):
    g = init_random_weights(build_squeezed_edge_yolo(NetConfig(num_classes=1, param_factor=2)), 0)
    p = tmp_path / "c.seyw"
    save_weights(g, p)
    assert load_model(p).config == g.config
