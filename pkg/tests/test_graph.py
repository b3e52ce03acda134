from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eecnn import graph as G
from eecnn.errors import ParameterError, UsageError

# Output column of the architecture table, one row per (sepconv, conv) block
TABLE_OUTPUTS = [(16, 16, 8), (16, 16, 4), (8, 8, 16), (8, 8, 8), (4, 4, 20), (4, 4, 12), (2, 2, 32), (2, 2, 16)]
# [DERIVED] per-layer multiply counts from an independent hand count (out_h*out_w*...)
LAYER_MACS = [
    16 * 16 * 3 * 9 + 16 * 16 * 8 * 3,
    16 * 16 * 4 * 8,
    8 * 8 * 8 * 9 + 8 * 8 * 16 * 8,
    8 * 8 * 8 * 16,
    4 * 4 * 32 * 9 + 4 * 4 * 20 * 32,
    4 * 4 * 12 * 20,
    2 * 2 * 96 * 9 + 2 * 2 * 32 * 96,
    2 * 2 * 16 * 32,
    64 * 3,
]


@pytest.fixture(scope="module")
def g():
    return G.build_ball_cnn(0)


@pytest.fixture(scope="module")
def gee(g):
    return G.attach_early_exit(g)


def _x(n, seed=0):
    return np.random.default_rng(seed).random((n, 32, 32, 3), dtype=np.float32)


@pytest.mark.parametrize("seed", [0, 1, 12345])
def test_totals(seed):
    g = G.build_ball_cnn(seed)
    assert G.total_params(g) == 6686
    assert G.total_macs(g) == 78912


def test_per_layer_macs_and_shapes(g):
    rows = [r for r in g.layer_table() if r["kind"] in ("sepconv", "conv", "dense")]
    assert [r["macs"] for r in rows] == LAYER_MACS
    assert sum(LAYER_MACS) == 78912
    assert [tuple(r["output"]) for r in rows[:-1]] == TABLE_OUTPUTS
    assert tuple(rows[-1]["output"]) == (3,)


def test_every_conv_followed_by_bn_then_act(g):
    kinds = [layer.kind for layer in g.layers]
    for i, k in enumerate(kinds):
        if k in ("sepconv", "conv"):
            assert kinds[i + 1 : i + 3] == ["batchnorm", "leaky_relu"]
    assert g.layers[-1].kind == "dense" and g.layers[-1].params["weight"].shape == (64, 3)


def test_attach_adds_513(g, gee):
    assert G.total_params(gee) - G.total_params(g) == 513
    assert 100 * 513 / 6686 == pytest.approx(7.67, abs=0.01)
    assert gee.shapes()[gee.ee_tap] == (16, 16, 8)
    assert gee.layers[gee.ee_tap].kind == "leaky_relu"
    assert [layer.kind for layer in gee.ee_branch] == ["maxpool", "flatten", "dense"]
    assert gee.ee_shapes() == [(8, 8, 8), (512,), (1,)]
    assert G.total_macs(gee, "ee") == 512


def test_attach_twice_is_usage_error(gee):
    with pytest.raises(UsageError):
        G.attach_early_exit(gee)


def test_attach_leaves_input_untouched_and_main_output_identical(g, gee):
    x = _x(8)
    assert g.ee_tap is None
    np.testing.assert_array_equal(g.main_logits(x), gee.main_logits(x))


def test_head_macs_fraction(gee):
    assert G.head_macs(gee) == 13056 + 512
    assert 100 * G.head_macs(gee) / 78912 == pytest.approx(17.2, abs=0.2)


def test_freeze(gee):
    f = G.freeze_trunk(gee)
    assert all(layer.frozen for layer in f.layers)
    assert not any(layer.frozen for layer in f.ee_branch)
    assert not any(layer.frozen for layer in gee.layers)


def test_split_requires_exit(g):
    with pytest.raises(UsageError):
        G.split_at_exit(g)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_split_is_bitwise_sound(seed):
    gee = G.attach_early_exit(G.build_ball_cnn(seed % 7), seed=seed % 5)
    split = G.split_at_exit(gee)
    x = _x(40, seed)
    feats, ee = split.head_forward(x)
    np.testing.assert_array_equal(split.tail_logits(feats), gee.main_logits(x))
    np.testing.assert_array_equal(split.ee_logits(x), gee.ee_logits(x))
    np.testing.assert_array_equal(ee, G.forward_ee(gee, x))


def test_split_on_1000_inputs(gee):
    split = G.split_at_exit(gee)
    x = _x(1000, 99)
    np.testing.assert_array_equal(split.tail_logits(split.features(x)), gee.main_logits(x))


def test_forward_main_contract(g):
    conf, x, y = G.forward_main(g, _x(16))
    assert conf.shape == x.shape == y.shape == (16,)
    assert np.all((conf > 0) & (conf < 1))
    with pytest.raises(ParameterError):
        G.forward_main(g, np.zeros((1, 16, 16, 3), np.float32))


def test_zero_head_gives_half_confidence(g):
    z = G.astype(g, np.float32)
    head = z.layers[-1]
    head.params["weight"][:] = 0
    head.params["bias"][:] = 0
    conf, x, y = G.forward_main(z, _x(3))
    np.testing.assert_array_equal(conf, 0.5)
    np.testing.assert_array_equal(x, 0.0)
    np.testing.assert_array_equal(y, 0.0)


def test_initial_biases(g, gee):
    bias = g.layers[-1].params["bias"]
    assert G.logistic(bias[:1])[0] == pytest.approx(G.MAIN_PRIOR, rel=1e-5)
    assert bias[1] == bias[2] == G.PATCH_CENTER
    assert G.logistic(gee.ee_branch[-1].params["bias"])[0] == pytest.approx(G.EE_PRIOR, rel=1e-5)


def test_logistic_strictly_inside_unit_interval():
    out = G.logistic(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    assert np.all((out > 0) & (out < 1))
    assert out[2] == 0.5


def test_forward_deterministic(g):
    x = _x(4)
    np.testing.assert_array_equal(g.main_logits(x), g.main_logits(x.copy()))


def test_checksum_changes_with_weights(g):
    a = G.weights_checksum(g.layers)
    h = G.astype(g, np.float32)
    assert G.weights_checksum(h.layers) == a
    h.layers[0].params["depthwise"][0, 0, 0, 0] += 1
    assert G.weights_checksum(h.layers) != a
