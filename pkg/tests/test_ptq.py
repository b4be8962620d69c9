import numpy as np
import pytest

from seyolo.detect import decode_heads
from seyolo.graph import build_squeezed_edge_yolo, execute, heads_as_float
from seyolo.modelio import init_random_weights
from seyolo.ptq import calibrated_random_weights, collect_ranges, quantize_graph
from seyolo.qtensor import UncalibratedError


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(0)
    return [rng.uniform(size=(3, 128, 128)) for _ in range(3)]


@pytest.fixture(scope="module")
def pair(images):
    g = init_random_weights(build_squeezed_edge_yolo(), seed=2)
    return g, quantize_graph(g, images)


def _layer_outputs(graph, image):
    seen = {}
    execute(graph, image, observer=lambda name, v: seen.setdefault(name, v))
    return seen


def _out_scale(node):
    if node.kind == "Conv":
        return node.spec.output_qparams.scale
    if node.kind == "Route" and node.spec.out_qparams is not None:
        return node.spec.out_qparams.scale
    return None


def test_per_layer_error_within_three_steps(pair, images):
    g, q = pair
    for img in images:
        ref = _layer_outputs(g, img)
        got = _layer_outputs(q, img)
        for node in q.nodes:
            scale = _out_scale(node)
            if scale is None:
                continue
            mae = np.abs(got[node.name] - ref[node.name]).mean()
            assert mae <= 3 * scale, (node.name, mae / scale)


def test_ranges_cover_every_activation(pair, images):
    g, _ = pair
    ranges = collect_ranges(g, images[:1])
    for node in g.nodes[:-1]:
        assert node.name in ranges
    assert "backbone.2.hidden" in ranges and "backbone.2.logit" in ranges


def test_zero_image_is_degenerate(pair):
    g, _ = pair
    with pytest.raises(UncalibratedError):
        quantize_graph(g, [np.zeros((3, 128, 128))])


def test_empty_calibration_set(pair):
    with pytest.raises(ValueError):
        quantize_graph(pair[0], [])


def test_quantize_needs_float_graph(pair, images):
    with pytest.raises(ValueError):
        quantize_graph(pair[1], images)


def test_calibrated_random_weights_hit_candidate_target(images):
    g = calibrated_random_weights(build_squeezed_edge_yolo(), images, seed=0, target_candidates=1.0)
    counts = [len(decode_heads(heads_as_float(execute(g, x)), g.config)) for x in images]
    assert 0.5 <= np.mean(counts) <= 2.0
    again = calibrated_random_weights(build_squeezed_edge_yolo(), images, seed=0, target_candidates=1.0)
    x = images[0]
    assert all(np.array_equal(a, b) for a, b in zip(heads_as_float(execute(g, x)), heads_as_float(execute(again, x))))
