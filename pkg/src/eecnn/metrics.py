"""Confusion-matrix metrics, center deviation and early-exit accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade import CascadeConfig, classify_batch_cascade
from .data import PatchSet
from .errors import UsageError
from .graph import ModelGraph, SplitModel, logistic


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, pred, labels) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=bool)
        y = np.asarray(labels) == 1
        return cls(int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & ~y)), int(np.sum(~pred & y)))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def precision_defined(self) -> bool:
        return self.tp + self.fp > 0

    @property
    def precision(self) -> float:
        """TP / (TP + FP); 1.0 when nothing was predicted positive (see ``precision_defined``)."""
        return self.tp / (self.tp + self.fp) if self.precision_defined else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0


@dataclass(frozen=True)
class RecallDelta:
    recall_pp: float  # percentage points, b - a
    tp_rel_pct: float  # relative TP change in percent
    fn_rel_pct: float


def recall_delta(a: ConfusionMatrix, b: ConfusionMatrix) -> RecallDelta:
    """How ``b`` changes recall against ``a`` on the same dataset."""
    if a.total != b.total or a.positives != b.positives:
        raise UsageError("confusion matrices come from different datasets")
    rel = lambda new, old: 100.0 * (new - old) / old if old else 0.0  # noqa: E731
    return RecallDelta(100.0 * (b.recall - a.recall), rel(b.tp, a.tp), rel(b.fn, a.fn))


def exit_rate(exits: int, total: int) -> float:
    if total <= 0:
        raise UsageError("exit rate of an empty set")
    return exits / total


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    center_euclid_mean: float
    center_euclid_std: float
    center_manhattan_mean: float
    center_manhattan_std: float
    ee_exits: int
    n: int
    predictions: np.ndarray
    confidences: np.ndarray

    @property
    def ee_rate(self) -> float:
        return self.ee_exits / self.n

    def records(self) -> list[tuple[str, str]]:
        cm = self.confusion
        return [
            ("n", str(self.n)),
            ("tp", str(cm.tp)),
            ("fp", str(cm.fp)),
            ("tn", str(cm.tn)),
            ("fn", str(cm.fn)),
            ("precision", f"{cm.precision:.6f}"),
            ("precision_defined", str(int(cm.precision_defined))),
            ("recall", f"{cm.recall:.6f}"),
            ("center_dev_euclid_mean", f"{self.center_euclid_mean:.4f}"),
            ("center_dev_euclid_std", f"{self.center_euclid_std:.4f}"),
            ("center_dev_manhattan_mean", f"{self.center_manhattan_mean:.4f}"),
            ("center_dev_manhattan_std", f"{self.center_manhattan_std:.4f}"),
            ("ee_exits", str(self.ee_exits)),
            ("ee_rate", f"{self.ee_rate:.6f}"),
        ]

    def text(self) -> str:
        cm = self.confusion
        lines = [
            f"records            {self.n}",
            f"TP {cm.tp}  FP {cm.fp}  TN {cm.tn}  FN {cm.fn}",
            f"precision          {100 * cm.precision:.2f}%" + ("" if cm.precision_defined else " (no positive predictions)"),
            f"recall             {100 * cm.recall:.2f}%",
            f"center deviation   {self.center_euclid_mean:.3f} +- {self.center_euclid_std:.3f} px (euclidean)",
            f"                   {self.center_manhattan_mean:.3f} +- {self.center_manhattan_std:.3f} px (manhattan)",
            f"early exits        {self.ee_exits} ({100 * self.ee_rate:.2f}%)",
        ]
        return "\n".join(lines)

    def key_values(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.records())


def _stats(v: np.ndarray) -> tuple[float, float]:
    return (float(v.mean()), float(v.std())) if len(v) else (0.0, 0.0)


def evaluate(
    model: ModelGraph | SplitModel,
    data: PatchSet,
    cfg: CascadeConfig = CascadeConfig(),
    chunk: int = 1024,
) -> EvalReport:
    """Classify every record and score it.

    A :class:`ModelGraph` is evaluated with its main head only; a
    :class:`SplitModel` runs the early-exit cascade. Center deviation is
    measured over true positives.
    """
    if not len(data):
        raise UsageError("cannot evaluate an empty dataset")
    pred, conf, xy, exits = [], [], [], 0
    for i in range(0, len(data), chunk):
        x = data.images(slice(i, i + chunk))
        if isinstance(model, SplitModel):
            r = classify_batch_cascade(model, x, cfg)
            pred.append(r["is_ball"])
            conf.append(r["confidence"])
            xy.append(np.stack([r["x"], r["y"]], axis=1))
            exits += int(r["exited"].sum())
        else:
            out = model.main_logits(x)
            c = logistic(out[:, 0])
            pred.append(c >= cfg.tau_accept)
            conf.append(c)
            xy.append(out[:, 1:3].astype(np.float64))
    pred_a, conf_a, xy_a = np.concatenate(pred), np.concatenate(conf), np.concatenate(xy)
    cm = ConfusionMatrix.from_predictions(pred_a, data.cls)
    tp = pred_a & (data.cls == 1)
    d = xy_a[tp] - data.center[tp].astype(np.float64)
    e_mean, e_std = _stats(np.hypot(d[:, 0], d[:, 1]))
    m_mean, m_std = _stats(np.abs(d).sum(axis=1))
    return EvalReport(cm, e_mean, e_std, m_mean, m_std, exits, len(data), pred_a, conf_a)
