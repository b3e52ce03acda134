from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eecnn import graph as G
from eecnn.cascade import CascadeConfig
from eecnn.data import PatchSet
from eecnn.errors import UsageError
from eecnn.metrics import ConfusionMatrix, evaluate, exit_rate, recall_delta

# [PAPER] validation confusion counts of the original CNN and the EE-CNN
ORIGINAL = ConfusionMatrix(tp=25134, fp=0, tn=38581, fn=3869)
EE_CNN = ConfusionMatrix(tp=25033, fp=0, tn=38581, fn=3970)
EXITS, TOTAL = 28750, 67532  # exit rate is taken over the split size, not the confusion total


def _oracle(cm):
    """Precision and recall in percent, written out longhand."""
    return 100.0 * cm.tp / (cm.tp + cm.fp), 100.0 * cm.tp / (cm.tp + cm.fn)


def test_original_model_counts():
    p, r = _oracle(ORIGINAL)
    assert (round(100 * ORIGINAL.precision, 2), round(100 * ORIGINAL.recall, 2)) == (100.00, 86.66)
    assert 100 * ORIGINAL.recall == pytest.approx(r) and 100 * ORIGINAL.precision == p
    # [PAPER] the confusion counts sum to 52 more patches than the validation split holds
    assert ORIGINAL.total == EE_CNN.total == 67584 == TOTAL + 52


def test_ee_model_counts_and_exit_rate():
    assert round(100 * EE_CNN.recall, 2) == 86.31 and EE_CNN.precision == 1.0
    assert round(100 * exit_rate(EXITS, TOTAL), 2) == 42.57


def test_recall_delta_between_tables():
    d = recall_delta(ORIGINAL, EE_CNN)
    # [PAPER] -0.35 pp recall, -0.40 % true positives
    assert round(d.recall_pp, 2) == -0.35 and round(d.tp_rel_pct, 2) == -0.40
    assert d.fn_rel_pct == pytest.approx(100 * (3970 - 3869) / 3869)


def test_recall_delta_trivial_cases():
    a = ConfusionMatrix(100, 0, 0, 100)
    assert recall_delta(a, a).recall_pp == 0
    assert recall_delta(a, ConfusionMatrix(99, 0, 0, 101)).recall_pp == pytest.approx(-0.5)
    with pytest.raises(UsageError):
        recall_delta(a, ConfusionMatrix(99, 0, 1, 101))


def test_precision_undefined_is_flagged():
    cm = ConfusionMatrix(0, 0, 5, 3)
    assert cm.precision == 1.0 and not cm.precision_defined and cm.recall == 0.0
    with pytest.raises(ValueError):
        ConfusionMatrix(-1, 0, 0, 0)
    with pytest.raises(UsageError):
        exit_rate(0, 0)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), max_size=200))
@settings(max_examples=100)
def test_from_predictions_matches_recount(pairs):
    pred = np.array([p for p, _ in pairs], bool)
    y = np.array([int(t) for _, t in pairs])
    cm = ConfusionMatrix.from_predictions(pred, y)
    assert cm.total == len(pairs)
    assert cm.tp == sum(p and t for p, t in pairs) and cm.fp == sum(p and not t for p, t in pairs)
    assert cm.fn == sum(t and not p for p, t in pairs)


class _Perfect:
    """Stand-in graph that answers with the label itself; used to hit the all-correct case."""


def test_all_correct_toy_set(monkeypatch):
    rng = np.random.default_rng(0)
    n = 20
    cls = rng.integers(0, 2, n).astype(np.uint8)
    center = np.where(cls[:, None] == 1, rng.uniform(0, 31, (n, 2)), 0).astype(np.float32)
    data = PatchSet(np.zeros((n, 32, 32, 3), np.uint8), cls, center, np.zeros((n, 4)), np.zeros(n), np.zeros(n))
    g = G.build_ball_cnn(0)
    out = np.column_stack([np.where(cls == 1, 20.0, -20.0), center])
    monkeypatch.setattr(G.ModelGraph, "main_logits", lambda self, x: out[: len(x)])
    rep = evaluate(g, data)
    assert rep.confusion.precision == rep.confusion.recall == 1.0
    assert rep.center_euclid_mean == 0.0 and rep.center_euclid_std == 0.0 and rep.ee_exits == 0


def test_center_deviation_is_euclidean_over_true_positives(monkeypatch):
    cls = np.array([1, 1, 0, 1], np.uint8)
    center = np.array([[10, 10], [5, 5], [0, 0], [3, 3]], np.float32)
    data = PatchSet(np.zeros((4, 32, 32, 3), np.uint8), cls, center, np.zeros((4, 4)), np.zeros(4), np.zeros(4))
    # predictions: TP off by (3, 4); TP exact; FP; FN with a wild center that must be ignored
    out = np.array([[5.0, 13, 14], [5.0, 5, 5], [5.0, 0, 0], [-5.0, 99, 99]])
    monkeypatch.setattr(G.ModelGraph, "main_logits", lambda self, x: out)
    rep = evaluate(G.build_ball_cnn(0), data)
    assert (rep.confusion.tp, rep.confusion.fp, rep.confusion.fn) == (2, 1, 1)
    assert rep.center_euclid_mean == pytest.approx(2.5) and rep.center_euclid_std == pytest.approx(2.5)
    assert rep.center_manhattan_mean == pytest.approx(3.5)


def test_report_formats(monkeypatch):
    out = np.array([[5.0, 1, 1], [-5.0, 0, 0]])
    monkeypatch.setattr(G.ModelGraph, "main_logits", lambda self, x: out)
    data = PatchSet(np.zeros((2, 32, 32, 3), np.uint8), np.array([1, 0]), np.ones((2, 2)), np.zeros((2, 4)), np.zeros(2), np.zeros(2))
    rep = evaluate(G.build_ball_cnn(0), data, CascadeConfig())
    kv = dict(line.split("=", 1) for line in rep.key_values().splitlines())
    assert kv["tp"] == "1" and kv["tn"] == "1" and kv["precision"] == "1.000000" and kv["ee_rate"] == "0.000000"
    assert "precision          100.00%" in rep.text()


def test_empty_dataset_is_usage_error():
    with pytest.raises(UsageError):
        evaluate(G.build_ball_cnn(0), PatchSet.empty())
