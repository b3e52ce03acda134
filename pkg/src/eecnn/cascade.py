"""Early-exit inference: per-patch cascade, per-frame stop-on-detect, cost model, threshold calibration."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import PatchSet
from .errors import ParameterError, UsageError
from .graph import SplitModel, logistic

log = logging.getLogger(__name__)

MAX_HYPOTHESES = 80
_TAU_MAX = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class CascadeConfig:
    """Thresholds: exit below ``tau_ee``, accept a ball at ``tau_accept``, stop a frame at ``tau_detect``."""

    tau_ee: float = 0.1
    tau_detect: float = 0.9
    tau_accept: float = 0.5

    def __post_init__(self) -> None:
        for name in ("tau_ee", "tau_detect", "tau_accept"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ParameterError(f"{name} must lie in (0, 1), got {v}")
        if self.tau_accept > self.tau_detect:
            raise ParameterError("tau_accept must not exceed tau_detect")


@dataclass
class PatchDecision:
    is_ball: bool
    ee_confidence: float
    confidence: float | None  # main-head confidence, None if the tail was skipped
    center: tuple[float, float] | None
    exited_early: bool
    head_evaluated: bool = True
    tail_evaluated: bool = False


def _as_input(patch: np.ndarray) -> np.ndarray:
    x = np.asarray(patch)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / np.float32(255.0)
    if x.ndim == 3:
        x = x[None]
    return x.astype(np.float32, copy=False)


def classify_patch_cascade(split: SplitModel, patch: np.ndarray, cfg: CascadeConfig = CascadeConfig()) -> PatchDecision:
    """Run the head; skip the tail when the exit confidence is below ``tau_ee``."""
    x = _as_input(patch)
    if x.shape[0] != 1:
        raise UsageError("classify_patch_cascade takes a single patch")
    feats, ee = split.head_forward(x)
    ee_conf = float(ee[0])
    if ee_conf < cfg.tau_ee:
        return PatchDecision(False, ee_conf, None, None, True)
    out = split.tail_logits(feats)
    conf = float(logistic(out[:, 0])[0])
    is_ball = conf >= cfg.tau_accept
    center = (float(out[0, 1]), float(out[0, 2])) if is_ball else None
    return PatchDecision(is_ball, ee_conf, conf, center, False, True, True)


def classify_batch_cascade(split: SplitModel, x: np.ndarray, cfg: CascadeConfig = CascadeConfig()) -> dict[str, np.ndarray]:
    """Vectorized cascade over a batch; the tail runs only on non-exited rows.

    Returns arrays ``ee_confidence``, ``exited``, ``confidence`` (NaN where
    exited), ``is_ball``, ``x``, ``y``.
    """
    x = _as_input(x)
    feats, ee = split.head_forward(x)
    exited = ee < cfg.tau_ee
    conf = np.full(len(x), np.nan)
    pos = np.full((len(x), 2), np.nan)
    keep = np.flatnonzero(~exited)
    if len(keep):
        out = split.tail_logits(feats[keep])
        conf[keep] = logistic(out[:, 0])
        pos[keep] = out[:, 1:3]
    is_ball = ~exited & (np.nan_to_num(conf, nan=0.0) >= cfg.tau_accept)
    return {"ee_confidence": ee, "exited": exited, "confidence": conf, "is_ball": is_ball, "x": pos[:, 0], "y": pos[:, 1]}


@dataclass
class FrameResult:
    ball_index: int | None
    decision: PatchDecision | None
    patches_processed: int
    ee_trigger_count: int
    stopped_early: bool = False
    decisions: list[PatchDecision] = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.ball_index is not None


def process_frame(
    split: SplitModel | None,
    patches: Sequence[np.ndarray],
    cfg: CascadeConfig = CascadeConfig(),
    classify: Callable[[SplitModel, np.ndarray, CascadeConfig], PatchDecision] = classify_patch_cascade,
    max_hypotheses: int = MAX_HYPOTHESES,
) -> FrameResult:
    """Classify a frame's hypotheses in order and stop at the first confident ball.

    Without a confident hit the most confident accepted ball (if any) is
    returned after all patches were evaluated.
    """
    if len(patches) > max_hypotheses:
        raise ParameterError(f"{len(patches)} hypotheses exceed the per-frame budget of {max_hypotheses}")
    decisions: list[PatchDecision] = []
    exits = 0
    for i, patch in enumerate(patches):
        d = classify(split, patch, cfg)
        decisions.append(d)
        exits += d.exited_early
        if d.is_ball and d.confidence is not None and d.confidence >= cfg.tau_detect:
            return FrameResult(i, d, i + 1, exits, True, decisions)
    best = None
    for i, d in enumerate(decisions):
        if d.is_ball and (best is None or d.confidence > decisions[best].confidence):
            best = i
    return FrameResult(best, None if best is None else decisions[best], len(decisions), exits, False, decisions)


def expected_cost(p_exit: float, t_head: float, t_full_ee: float) -> float:
    """Mean per-patch time when a fraction ``p_exit`` stops after the head."""
    if not 0.0 <= p_exit <= 1.0:
        raise ParameterError(f"exit probability must lie in [0, 1], got {p_exit}")
    if t_head <= 0 or t_full_ee <= 0:
        raise ParameterError("stage times must be positive")
    return p_exit * t_head + (1.0 - p_exit) * t_full_ee


def relative_change(value: float, baseline: float) -> float:
    """Percent change of ``value`` against ``baseline``."""
    return 100.0 * (value - baseline) / baseline


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass
class Calibration:
    tau_ee: float
    exit_rate: float
    recall_full: float
    recall_cascade: float
    recall_drop_pp: float
    n: int


def stage_confidences(split: SplitModel, data: PatchSet, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Exit and main-head confidence for every record (tail run on all rows)."""
    ee, main = [], []
    for i in range(0, len(data), chunk):
        feats, e = split.head_forward(data.images(slice(i, i + chunk)))
        ee.append(e)
        main.append(logistic(split.tail_logits(feats)[:, 0]))
    return np.concatenate(ee), np.concatenate(main)


def sweep(ee_conf: np.ndarray, tail_pos: np.ndarray, cls: np.ndarray, taus: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Exit rate and end-to-end recall for each candidate ``tau_ee``."""
    cls = np.asarray(cls) == 1
    n_pos = max(int(cls.sum()), 1)
    rates, recalls = [], []
    for t in taus:
        exited = ee_conf < t
        rates.append(exited.mean())
        recalls.append(np.sum(tail_pos & ~exited & cls) / n_pos)
    return np.asarray(rates), np.asarray(recalls)


def calibrate_from_confidences(
    ee_conf: np.ndarray, main_conf: np.ndarray, cls: np.ndarray, max_recall_drop: float, tau_accept: float = 0.5
) -> Calibration:
    """Largest exit threshold whose recall loss against ``tau_ee = 0`` is at most ``max_recall_drop`` points."""
    cls = np.asarray(cls) == 1
    n_pos = int(cls.sum())
    tp = cls & (main_conf >= tau_accept)
    tp_ee = np.sort(ee_conf[tp])
    allowed = math.floor(max_recall_drop / 100.0 * n_pos + 1e-9)
    tau = float(tp_ee[allowed]) if allowed < len(tp_ee) else _TAU_MAX
    tau = min(max(tau, float(np.nextafter(0.0, 1.0))), _TAU_MAX)
    exited = ee_conf < tau
    r_full = tp.sum() / n_pos if n_pos else 1.0
    r_casc = (tp & ~exited).sum() / n_pos if n_pos else 1.0
    return Calibration(tau, float(exited.mean()), float(r_full), float(r_casc), float(100.0 * (r_full - r_casc)), len(cls))


def calibrate_exit_threshold(
    split: SplitModel, val_set: PatchSet, max_recall_drop: float = 1.0, tau_accept: float = 0.5
) -> Calibration:
    if not len(val_set):
        raise UsageError("calibration needs a non-empty validation set")
    ee, main = stage_confidences(split, val_set)
    return calibrate_from_confidences(ee, main, val_set.cls, max_recall_drop, tau_accept)
