"""Deterministic synthetic patches standing in for a hand-labeled corpus.

Positives are black-and-white soccer balls on a field background, sometimes
motion blurred or partly hidden behind a bar. Negatives reuse the same
backgrounds and add ball-free distractors: line crossings, plain white
blobs and robot-limb rectangles. All labels come from the construction
geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import PATCH, PATCH_HI, PATCH_LO, Label, PatchSet, compute_visibility

SS = 4  # supersampling factor per axis

_sub = (np.arange(PATCH * SS) + 0.5) / SS - 0.5
GRID_X, GRID_Y = np.meshgrid(_sub, _sub)


def _downsample(a: np.ndarray) -> np.ndarray:
    return a.reshape(PATCH, SS, PATCH, SS, *a.shape[2:]).mean(axis=(1, 3))


def _polygon_mask(x: np.ndarray, y: np.ndarray, cx: float, cy: float, radius: float, sides: int, theta: float) -> np.ndarray:
    """Inside test for a regular polygon with circumradius ``radius``."""
    apothem = radius * math.cos(math.pi / sides)
    inside = np.ones(x.shape, dtype=bool)
    for k in range(sides):
        a = theta + (k + 0.5) * 2 * math.pi / sides
        inside &= (x - cx) * math.cos(a) + (y - cy) * math.sin(a) <= apothem
    return inside


def _segment_coverage(x0: float, y0: float, x1: float, y1: float, width: float) -> np.ndarray:
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((GRID_X - x0) * dx + (GRID_Y - y0) * dy) / (dx * dx + dy * dy + 1e-12), 0.0, 1.0)
    d = np.hypot(GRID_X - (x0 + t * dx), GRID_Y - (y0 + t * dy))
    return _downsample((d <= width / 2).astype(np.float32))


def line_kernel(length: float, angle: float) -> np.ndarray:
    """Normalized motion-blur kernel: a line of ``length`` px at ``angle`` radians."""
    size = max(int(math.ceil(length)) | 1, 1)
    c = size // 2
    t = np.linspace(-(length - 1) / 2, (length - 1) / 2, max(int(length * 8), 1))
    x, y = c + t * math.cos(angle), c + t * math.sin(angle)
    ix, iy = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = x - ix, y - iy
    k = np.zeros((size + 1, size + 1))
    np.add.at(k, (iy, ix), (1 - fx) * (1 - fy))
    np.add.at(k, (iy, ix + 1), fx * (1 - fy))
    np.add.at(k, (iy + 1, ix), (1 - fx) * fy)
    np.add.at(k, (iy + 1, ix + 1), fx * fy)
    k = k[:size, :size]
    return k / k.sum()


# ---------------------------------------------------------------------------
# backgrounds
# ---------------------------------------------------------------------------


def render_background(rng: np.random.Generator) -> np.ndarray:
    """Green field with a lighting gradient and sometimes white line segments; float RGB in 0..255."""
    base = np.array([rng.uniform(30, 90), rng.uniform(100, 170), rng.uniform(25, 80)])
    ang = rng.uniform(0, 2 * math.pi)
    grad = ((np.arange(PATCH)[None, :] - 15.5) * math.cos(ang) + (np.arange(PATCH)[:, None] - 15.5) * math.sin(ang)) / 16
    img = base[None, None, :] * (1.0 + rng.uniform(0.0, 0.3) * grad[..., None])
    # low-frequency turf texture
    blot = ndimage.gaussian_filter(rng.normal(0, 1, (PATCH, PATCH)), 3.0)
    img = img * (1.0 + 0.6 * blot[..., None])
    if rng.random() < 0.3:
        _paint_line(img, rng)
    return img


def _paint_line(img: np.ndarray, rng: np.random.Generator, through: tuple[float, float] | None = None) -> None:
    cx, cy = through if through is not None else (rng.uniform(-4, 36), rng.uniform(-4, 36))
    a = rng.uniform(0, math.pi)
    half = 40.0
    cov = _segment_coverage(cx - half * math.cos(a), cy - half * math.sin(a), cx + half * math.cos(a), cy + half * math.sin(a), rng.uniform(1.5, 4.0))
    white = rng.uniform(170, 240)
    img += cov[..., None] * (white - img)


def _finish(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = img * rng.uniform(0.7, 1.2) + rng.normal(0, rng.uniform(1.0, 6.0), img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# balls
# ---------------------------------------------------------------------------


@dataclass
class BallSpec:
    cx: float
    cy: float
    radius: float
    spin: float = 0.0
    brightness: float = 230.0
    blur_length: float = 0.0
    blur_angle: float = 0.0
    occluder: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1 of the bar
    occluder_color: tuple[float, float, float] = (200.0, 200.0, 200.0)


def draw_ball_spec(rng: np.random.Generator) -> BallSpec:
    r = rng.uniform(6, 14)
    spec = BallSpec(
        cx=rng.uniform(-4, 36),
        cy=rng.uniform(-4, 36),
        radius=r,
        spin=rng.uniform(0, 2 * math.pi),
        brightness=rng.uniform(170, 250),
    )
    if rng.random() < 0.3:
        spec.blur_length = rng.uniform(2, 5)
        spec.blur_angle = rng.uniform(0, math.pi)
    if rng.random() < 0.2:
        w = rng.uniform(3, 8)
        off = rng.uniform(-r, r)
        if rng.random() < 0.5:
            x0 = spec.cx + off - w / 2
            spec.occluder = (x0, -10.0, x0 + w, 42.0)
        else:
            y0 = spec.cy + off - w / 2
            spec.occluder = (-10.0, y0, 42.0, y0 + w)
        g = rng.uniform(60, 220)
        spec.occluder_color = (g, g, g * rng.uniform(0.9, 1.1))
    return spec


def _ball_layer(spec: BallSpec) -> tuple[np.ndarray, np.ndarray]:
    """Supersampled coverage and color of the ball (pixel resolution)."""
    x, y = GRID_X, GRID_Y
    d2 = (x - spec.cx) ** 2 + (y - spec.cy) ** 2
    disc = d2 <= spec.radius**2
    r = spec.radius
    dark = _polygon_mask(x, y, spec.cx, spec.cy, 0.32 * r, 5, spec.spin)
    for k in range(5):
        a = spec.spin + math.pi / 5 + k * 2 * math.pi / 5
        px, py = spec.cx + 0.78 * r * math.cos(a), spec.cy + 0.78 * r * math.sin(a)
        dark |= _polygon_mask(x, y, px, py, 0.26 * r, 5, spec.spin + math.pi / 5)
    shade = 1.0 - 0.25 * np.clip((y - spec.cy) / r, -1, 1)  # light from above
    lum = np.where(dark, 35.0, spec.brightness) * shade
    color = np.stack([lum, lum, lum * 0.97], axis=-1) * disc[..., None]
    alpha = disc.astype(np.float64)
    return _downsample(alpha), _downsample(color)


def _disc_fractions(spec: BallSpec) -> tuple[float, float]:
    """(fraction of disc inside the patch, fraction of disc behind the occluder)."""
    r = spec.radius
    step = 0.125
    xs = np.arange(spec.cx - r + step / 2, spec.cx + r, step)
    ys = np.arange(spec.cy - r + step / 2, spec.cy + r, step)
    gx, gy = np.meshgrid(xs, ys)
    disc = (gx - spec.cx) ** 2 + (gy - spec.cy) ** 2 <= r * r
    total = disc.sum()
    inside = disc & (gx >= PATCH_LO) & (gx < PATCH_HI) & (gy >= PATCH_LO) & (gy < PATCH_HI)
    occluded = 0.0
    if spec.occluder is not None:
        x0, y0, x1, y1 = spec.occluder
        hidden = disc & (gx >= x0) & (gx <= x1) & (gy >= y0) & (gy <= y1)
        occluded = hidden.sum() / total
    return inside.sum() / total, float(occluded)


def render_positive(
    rng: np.random.Generator, spec: BallSpec | None = None, background: np.ndarray | None = None
) -> tuple[np.ndarray, Label, np.ndarray]:
    """Render a ball patch. Returns (uint8 pixels, label, ball coverage before occlusion/blur)."""
    if spec is None:
        spec = draw_ball_spec(rng)
    img = render_background(rng) if background is None else background.astype(np.float64).copy()
    alpha, color = _ball_layer(spec)
    coverage = alpha.copy()
    if spec.blur_length > 0:
        k = line_kernel(spec.blur_length, spec.blur_angle)
        alpha = ndimage.convolve(alpha, k, mode="constant")
        color = np.stack([ndimage.convolve(color[..., c], k, mode="constant") for c in range(3)], axis=-1)
    img = img * (1 - alpha[..., None]) + color
    if spec.occluder is not None:
        x0, y0, x1, y1 = spec.occluder
        occ = _downsample(((GRID_X >= x0) & (GRID_X <= x1) & (GRID_Y >= y0) & (GRID_Y <= y1)).astype(np.float64))
        img = img * (1 - occ[..., None]) + occ[..., None] * np.asarray(spec.occluder_color)
    inside, occluded = _disc_fractions(spec)
    label = Label.ball(
        (spec.cx, spec.cy), spec.radius, concealed=occluded > 0, visibility=compute_visibility(None, inside, occluded)
    )
    return _finish(img, rng) if background is None else np.clip(np.rint(img), 0, 255).astype(np.uint8), label, coverage


# ---------------------------------------------------------------------------
# negatives
# ---------------------------------------------------------------------------


def render_negative(rng: np.random.Generator) -> np.ndarray:
    img = render_background(rng)
    kind = rng.choice(4, p=[0.3, 0.2, 0.3, 0.2])
    if kind == 1:  # line crossing
        cx, cy = rng.uniform(4, 28), rng.uniform(4, 28)
        _paint_line(img, rng, (cx, cy))
        _paint_line(img, rng, (cx, cy))
    elif kind == 2:  # white blob, ball sized
        cx, cy, r = rng.uniform(-2, 34), rng.uniform(-2, 34), rng.uniform(5, 14)
        if rng.random() < 0.5:
            # elongated blobs: partially seen robots or goal posts
            sx, sy = rng.uniform(0.6, 1.6), rng.uniform(0.6, 1.6)
        else:
            sx = sy = 1.0
        d = np.hypot((GRID_X - cx) / sx, (GRID_Y - cy) / sy)
        cov = _downsample((d <= r).astype(np.float64))
        lum = rng.uniform(170, 250) * (1.0 - 0.25 * np.clip((np.arange(PATCH)[:, None] - cy) / r, -1, 1))
        img = img * (1 - cov[..., None]) + cov[..., None] * lum[..., None]
    elif kind == 3:  # robot limb: light rectangle with a dark joint band
        w, h = rng.uniform(6, 16), rng.uniform(14, 40)
        cx, cy, a = rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(0, math.pi)
        u = (GRID_X - cx) * math.cos(a) + (GRID_Y - cy) * math.sin(a)
        v = -(GRID_X - cx) * math.sin(a) + (GRID_Y - cy) * math.cos(a)
        body = (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)
        joint = body & (np.abs(v - rng.uniform(-h / 3, h / 3)) <= rng.uniform(1.5, 3.5))
        cov = _downsample(body.astype(np.float64))
        jcov = _downsample(joint.astype(np.float64))
        light, dark = rng.uniform(180, 240), rng.uniform(30, 90)
        img = img * (1 - cov[..., None]) + (cov - jcov)[..., None] * light + jcov[..., None] * dark
    return _finish(img, rng)


def generate_synthetic(n: int, positive_fraction: float = 0.43, seed: int = 0) -> PatchSet:
    """``n`` patches, ``round(n * positive_fraction)`` of them balls, in shuffled order."""
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_fraction))
    cls = np.zeros(n, np.uint8)
    cls[:n_pos] = 1
    rng.shuffle(cls)
    pixels = np.zeros((n, PATCH, PATCH, 3), np.uint8)
    center = np.zeros((n, 2), np.float32)
    bbox = np.zeros((n, 4), np.float32)
    concealed = np.zeros(n, bool)
    vis = np.zeros(n, np.uint8)
    for i in range(n):
        if cls[i]:
            pixels[i], label, _ = render_positive(rng)
            center[i], bbox[i] = label.center, label.bbox
            concealed[i], vis[i] = label.concealed, label.visibility
        else:
            pixels[i] = render_negative(rng)
    return PatchSet(pixels, cls, center, bbox, concealed, vis)
