from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eecnn.errors import ParameterError
from eecnn.losses import (
    LossWeights,
    composite_loss,
    focal_loss,
    positional_loss,
    quadrant_weight,
    sample_difficulty_weight,
)
from helpers import FD_RTOL, composite_gradient_worst, full_graph_gradient_check, numeric_gradient, rel_error

PAPER = LossWeights()


def test_paper_weights():
    # [PAPER] w_c = 1.0, w_p = 0.5, w_fp = 1000; exit stage w_fn = 100
    assert (PAPER.w_c, PAPER.w_p, PAPER.w_fp) == (1.0, 0.5, 1000.0)
    assert LossWeights.early_exit().w_fn == 100.0


def test_focal_examples():
    assert focal_loss(0.5, 1, 0.0) == pytest.approx(math.log(2))
    assert focal_loss(0.9, 1, 2.0) == pytest.approx(0.01 * -math.log(0.9))
    assert focal_loss(0.1, 0, 2.0) == pytest.approx(focal_loss(0.9, 1, 2.0))
    p = np.linspace(0.01, 0.99, 99)
    assert np.all(np.diff(focal_loss(p, np.ones_like(p))) < 0)
    assert focal_loss(1.0 - 1e-12, 1) < 1e-12


def test_focal_clamps_out_of_range():
    assert np.isfinite(focal_loss(0.0, 1)) and focal_loss(0.0, 1) == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert focal_loss(1.5, 0) == pytest.approx(focal_loss(1 - 1e-7, 0))


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_positional_symmetric(a, b, c, d):
    assert positional_loss((a, b), (c, d)) == positional_loss((c, d), (a, b)) >= 0


def test_positional_examples():
    assert positional_loss((10, 12), (8, 15)) == 5
    assert positional_loss((3, 4), (3, 4)) == 0


@pytest.mark.parametrize("vis,conc,expected", [(3, False, 1.0), (0, False, 0.25), (3, True, 0.5), (1, True, 0.25)])
def test_difficulty(vis, conc, expected):
    assert sample_difficulty_weight(1, vis, conc) == expected
    assert sample_difficulty_weight(0, vis, conc) == 1.0


def test_quadrant_examples():
    assert quadrant_weight(0.8, 0, PAPER, 0.5) == 1000
    assert quadrant_weight(0.3, 1, LossWeights.early_exit()) == 100
    assert quadrant_weight(0.9, 1) == 1
    assert quadrant_weight(0.2, 0) == 1
    assert quadrant_weight(0.5, 0) == 1000  # threshold belongs to the positive side


def test_composite_example():
    # focal 0.2 is hit by solving for the logit; manhattan 4, multipliers 1 -> 1.0*0.2 + 0.5*4
    from scipy.optimize import brentq

    z = brentq(lambda t: focal_loss(1 / (1 + math.exp(-t)), 1) - 0.2, -5, 5)
    res = composite_loss(np.array([[z, 12.0, 10.0]]), np.array([1]), np.array([[10.0, 8.0]]))
    assert res.loss == pytest.approx(2.2, rel=1e-9)


def test_background_ignores_position():
    a = composite_loss(np.array([[-1.0, 0.0, 0.0]]), np.array([0]), np.array([[5.0, 5.0]]))
    b = composite_loss(np.array([[-1.0, 99.0, -40.0]]), np.array([0]), np.array([[5.0, 5.0]]))
    assert a.loss == b.loss and not b.grad[:, 1:].any()


def test_fp_weight_plumbing():
    out = np.array([[2.0, 1.0, 1.0], [-2.0, 0.0, 0.0], [1.0, 3.0, 3.0], [-1.0, 5.0, 5.0]])
    cls = np.array([0, 0, 1, 1])
    ctr = np.zeros((4, 2))
    base = composite_loss(out, cls, ctr, weights=PAPER.with_(w_fp=1.0))
    k = composite_loss(out, cls, ctr, weights=PAPER.with_(w_fp=7.0))
    fp = np.array([True, False, False, False])
    np.testing.assert_allclose(k.per_sample[fp], 7 * base.per_sample[fp])
    np.testing.assert_array_equal(k.per_sample[~fp], base.per_sample[~fp])


def test_shape_errors():
    with pytest.raises(ParameterError):
        composite_loss(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ParameterError):
        composite_loss(np.zeros((3, 3)), np.zeros(2), np.zeros((3, 2)))
    with pytest.raises(ParameterError):
        composite_loss(np.zeros((3, 3)), np.zeros(3))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_composite_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    res = composite_loss(rng.normal(0, 5, (n, 3)), rng.integers(0, 2, n), rng.uniform(-4, 36, (n, 2)), rng.integers(0, 4, n), rng.random(n) < 0.3)
    assert res.loss >= 0 and np.all(res.per_sample >= 0)


def test_composite_gradient_wrt_outputs():
    assert composite_gradient_worst(100) < FD_RTOL


def test_confidence_only_gradient():
    rng = np.random.default_rng(8)
    w = LossWeights.early_exit()
    for _ in range(100):
        n = int(rng.integers(1, 9))
        z = rng.normal(0, 3, n)
        z = np.where(np.abs(z) < 0.05, z + 0.5, z)
        cls = rng.integers(0, 2, n)
        f = lambda: composite_loss(z, cls, weights=w).loss  # noqa: E731
        assert rel_error(composite_loss(z, cls, weights=w).grad, numeric_gradient(f, z)) < FD_RTOL


def test_full_graph_gradient_directional():
    """Composite loss through the whole network: directional derivative vs central differences."""
    checked, skipped, worst = full_graph_gradient_check(100)
    assert worst < FD_RTOL and skipped < checked
