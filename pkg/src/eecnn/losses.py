"""Composite detection loss: focal confidence term plus Manhattan position term.

Each sample's loss is scaled by two dynamic weights:

* a difficulty weight from its label (easy, fully visible balls count most);
* a confusion-quadrant weight from its current prediction (TP/FP/TN/FN).

The quadrant weight is treated as a constant during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_expit

from .errors import ParameterError

P_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_c: float = 1.0
    w_p: float = 0.5
    gamma: float = 2.0
    w_tp: float = 1.0
    w_fp: float = 1000.0
    w_tn: float = 1.0
    w_fn: float = 1.0
    t_q: float = 0.5
    visibility_mult: tuple[float, float, float, float] = field(default=(0.25, 0.5, 0.75, 1.0))
    concealed_mult: float = 0.5

    def __post_init__(self) -> None:
        ws = (self.w_c, self.w_p, self.gamma, self.w_tp, self.w_fp, self.w_tn, self.w_fn, self.concealed_mult)
        if min(ws) < 0 or min(self.visibility_mult) < 0:
            raise ParameterError("loss weights must be non-negative")
        if not 0.0 < self.t_q < 1.0:
            raise ParameterError(f"quadrant threshold must lie in (0, 1), got {self.t_q}")

    @classmethod
    def early_exit(cls, w_fn: float = 100.0, **kw) -> "LossWeights":
        """Confidence-only weighting for the exit branch: missing a ball is the costly error."""
        return cls(w_p=0.0, w_fp=1.0, w_fn=w_fn, **kw)

    def with_(self, **kw) -> "LossWeights":
        return replace(self, **kw)


def focal_loss(p, y, gamma: float = 2.0):
    """``-(1 - p_t)**gamma * ln(p_t)`` with ``p_t = p`` for y=1 else ``1 - p``.

    ``p`` is clamped to [1e-7, 1 - 1e-7].
    """
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    pt = np.where(np.asarray(y) == 1, p, 1.0 - p)
    out = -((1.0 - pt) ** gamma) * np.log(pt)
    return float(out) if out.ndim == 0 else out


def positional_loss(pred, target):
    """Manhattan distance in pixels between predicted and true centers (last axis = x, y)."""
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)).sum(axis=-1)
    return float(d) if d.ndim == 0 else d


def sample_difficulty_weight(cls, visibility, concealed, weights: LossWeights = LossWeights()):
    """Label-based multiplier: ``visibility_mult[v] * (concealed_mult if concealed)`` for balls, 1 otherwise."""
    cls = np.asarray(cls)
    vis_mult = np.asarray(weights.visibility_mult, dtype=np.float64)[np.asarray(visibility, dtype=np.intp)]
    conc = np.where(np.asarray(concealed, dtype=bool), weights.concealed_mult, 1.0)
    out = np.where(cls == 1, vis_mult * conc, 1.0)
    return float(out) if out.ndim == 0 else out


def quadrant_weight(p, y, weights: LossWeights = LossWeights(), t_q: float | None = None):
    """Confusion-quadrant multiplier of a prediction ``p`` for label ``y``."""
    t = weights.t_q if t_q is None else t_q
    pos = np.asarray(p) >= t
    y1 = np.asarray(y) == 1
    out = np.select(
        [y1 & pos, ~y1 & pos, ~y1 & ~pos, y1 & ~pos],
        [weights.w_tp, weights.w_fp, weights.w_tn, weights.w_fn],
    ).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def _focal_from_logits(z: np.ndarray, y: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Focal loss and its derivative w.r.t. the logit, computed without clamping."""
    p, q = expit(z), expit(-z)
    lp, lq = log_expit(z), log_expit(-z)
    # y=1: p_t = p ; y=0: p_t = q. By symmetry swap roles and flip the sign of dz.
    pt = np.where(y == 1, p, q)
    qt = np.where(y == 1, q, p)
    lpt = np.where(y == 1, lp, lq)
    loss = -(qt**gamma) * lpt
    dz = gamma * pt * qt**gamma * lpt - qt ** (gamma + 1)
    dz = np.where(y == 1, dz, -dz)
    return loss, dz


@dataclass
class LossResult:
    loss: float
    per_sample: np.ndarray
    focal: np.ndarray
    manhattan: np.ndarray
    difficulty: np.ndarray
    quadrant: np.ndarray
    grad: np.ndarray  # d loss / d outputs, same shape as outputs


def composite_loss(
    outputs: np.ndarray,
    cls: np.ndarray,
    center: np.ndarray | None = None,
    visibility: np.ndarray | None = None,
    concealed: np.ndarray | None = None,
    weights: LossWeights = LossWeights(),
) -> LossResult:
    """Batch mean of ``difficulty * quadrant * (w_c * focal + w_p * manhattan * [y=1])``.

    ``outputs`` is the raw head output: (N, 3) columns (confidence logit, x, y),
    or (N,) / (N, 1) logits for confidence-only heads. The position term is
    only applied to ball samples.
    """
    out = np.asarray(outputs, dtype=np.float64)
    n = len(out)
    conf_only = out.ndim == 1 or out.shape[1] == 1
    if out.ndim == 2 and out.shape[1] not in (1, 3):
        raise ParameterError(f"outputs must have 1 or 3 columns, got {out.shape}")
    cls = np.asarray(cls).astype(np.int64)
    if cls.shape != (n,):
        raise ParameterError(f"{n} outputs but {cls.shape} labels")
    if n == 0:
        raise ParameterError("empty batch")
    z = out.reshape(n, -1)[:, 0]
    vis = np.full(n, 3) if visibility is None else np.asarray(visibility)
    conc = np.zeros(n, bool) if concealed is None else np.asarray(concealed)

    focal, dfocal = _focal_from_logits(z, cls, weights.gamma)
    diff = sample_difficulty_weight(cls, vis, conc, weights) * np.ones(n)
    quad = quadrant_weight(expit(z), cls, weights) * np.ones(n)
    scale = diff * quad
    grad = np.zeros(out.shape, dtype=np.float64).reshape(n, -1)
    grad[:, 0] = scale * weights.w_c * dfocal / n

    manhattan = np.zeros(n)
    if not conf_only and weights.w_p > 0:
        if center is None:
            raise ParameterError("position outputs need target centers")
        center = np.asarray(center, dtype=np.float64).reshape(n, 2)
        delta = out[:, 1:3] - center
        mask = (cls == 1).astype(np.float64)
        manhattan = np.abs(delta).sum(axis=1) * mask
        grad[:, 1:3] = (scale * weights.w_p * mask / n)[:, None] * np.sign(delta)
    per_sample = scale * (weights.w_c * focal + weights.w_p * manhattan)
    return LossResult(float(per_sample.mean()), per_sample, focal, manhattan, diff, quad, grad.reshape(out.shape))
