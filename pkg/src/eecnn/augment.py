"""Patch augmentation with label-consistent geometry.

Phase 1 draws an affine warp (scale, translation, rotation, shear) and a
left-right flip. Phase 2 adds photometric changes: brightness, contrast,
per-channel gain, motion blur and JPEG-style 8x8 DCT quantization.
``strength`` in [0, 1] scales every magnitude; 0 is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft, ndimage

from .data import PATCH, Label
from .synth import line_kernel

CENTER = (PATCH - 1) / 2.0

# IJG luminance table
_JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass
class AugmentDraw:
    flip: bool = False
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    rotation: float = 0.0  # degrees
    shear: float = 0.0  # degrees
    brightness: float = 0.0  # relative
    contrast: float = 1.0
    gains: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blur_length: float = 0.0
    blur_angle: float = 0.0
    jpeg_quality: int | None = None

    def matrix(self) -> np.ndarray:
        """2x2 linear part acting on (x, y), flip excluded."""
        r, s = math.radians(self.rotation), math.radians(self.shear)
        rot = np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])
        shear = np.array([[1.0, math.tan(s)], [0.0, 1.0]])
        return rot @ shear * self.scale

    def is_geometric_identity(self) -> bool:
        return not self.flip and self.scale == 1.0 and self.tx == 0 and self.ty == 0 and self.rotation == 0 and self.shear == 0


def sample_draw(phase: int, rng: np.random.Generator, strength: float = 1.0) -> AugmentDraw:
    if phase not in (1, 2):
        raise ValueError(f"augmentation phase must be 1 or 2, got {phase}")
    s = float(strength)
    if s <= 0:
        return AugmentDraw()
    d = AugmentDraw(
        flip=bool(rng.random() < 0.5),
        scale=1.0 + s * rng.uniform(-0.2, 0.2),
        tx=s * rng.uniform(-4, 4),
        ty=s * rng.uniform(-4, 4),
        rotation=s * rng.uniform(-25, 25),
        shear=s * rng.uniform(-10, 10),
    )
    if phase == 2:
        d.brightness = s * rng.uniform(-0.25, 0.25)
        d.contrast = 1.0 + s * rng.uniform(-0.25, 0.25)
        d.gains = tuple(s * rng.uniform(-0.1, 0.1, 3))
        if rng.random() < 0.5:
            d.blur_length = 1.0 + s * rng.uniform(0, 4)
            d.blur_angle = rng.uniform(0, math.pi)
        if rng.random() < 0.5:
            d.jpeg_quality = int(round(95 - s * rng.uniform(0, 55)))
    return d


def transform_point(x: float, y: float, d: AugmentDraw) -> tuple[float, float]:
    if d.flip:
        x = 2 * CENTER - x
    a = d.matrix()
    px, py = a @ np.array([x - CENTER, y - CENTER])
    return px + CENTER + d.tx, py + CENTER + d.ty


def transform_label(label: Label, d: AugmentDraw) -> Label:
    if label.cls == 0 or d.is_geometric_identity():
        return label
    cx, cy = transform_point(*label.center, d)
    x0, y0, x1, y1 = label.bbox
    corners = np.array([transform_point(x, y, d) for x, y in ((x0, y0), (x1, y0), (x0, y1), (x1, y1))])
    (bx0, by0), (bx1, by1) = corners.min(axis=0), corners.max(axis=0)
    return Label(1, (cx, cy), (bx0, by0, bx1, by1), label.concealed, label.visibility)


_GY, _GX = np.mgrid[0:PATCH, 0:PATCH].astype(np.float64)


def _inverse_maps(draws: list[AugmentDraw]) -> tuple[np.ndarray, np.ndarray]:
    """Source (x, y) sampling positions per output pixel, shape (N, H, W) each."""
    n = len(draws)
    inv = np.stack([np.linalg.inv(d.matrix()) for d in draws]).reshape(n, 2, 2, 1, 1)
    t = np.array([(d.tx, d.ty) for d in draws]).reshape(n, 2, 1, 1)
    u, v = _GX - CENTER - t[:, 0], _GY - CENTER - t[:, 1]
    # output pixel o reads input inv @ (o - c - t) + c
    sx = inv[:, 0, 0] * u + inv[:, 0, 1] * v + CENTER
    sy = inv[:, 1, 0] * u + inv[:, 1, 1] * v + CENTER
    return sx, sy


def bilinear_sample(imgs: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample NHWC images at fractional (x, y) positions of shape (N, H', W'); outside reads as zero."""
    n, h, w, c = imgs.shape
    # one ring of zeros absorbs every out-of-range tap after clipping
    flat = np.pad(imgs, ((0, 0), (1, 1), (1, 1), (0, 0))).reshape(-1, c)
    x0, y0 = np.floor(sx), np.floor(sy)
    fx, fy = (sx - x0)[..., None], (sy - y0)[..., None]
    x0, y0 = x0.astype(np.intp), y0.astype(np.intp)
    base = (np.arange(n) * (h + 2) * (w + 2)).reshape(n, 1, 1)
    out = np.zeros(sx.shape + (c,), dtype=np.result_type(imgs.dtype, np.float32))
    fx, fy = fx.astype(out.dtype), fy.astype(out.dtype)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        yi = np.clip(y0 + dy, -1, h) + 1
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = np.clip(x0 + dx, -1, w) + 1
            out += flat[base + yi * (w + 2) + xi] * (wx * wy)
    return out


def warp_batch(imgs: np.ndarray, draws: list[AugmentDraw]) -> np.ndarray:
    """Flip and affine-warp a batch of HWC images, one draw per image."""
    imgs = np.stack([img[:, ::-1] if d.flip else img for img, d in zip(imgs, draws)])
    sx, sy = _inverse_maps(draws)
    return bilinear_sample(imgs, sx, sy).astype(imgs.dtype)


def _warp(img: np.ndarray, d: AugmentDraw) -> np.ndarray:
    return warp_batch(img[None], [d])[0]


def _quant_table(quality: int) -> np.ndarray:
    q = max(1, min(100, int(quality)))
    scale = 5000 / q if q < 50 else 200 - 2 * q
    return np.clip(np.floor((_JPEG_LUMA * scale + 50) / 100), 1, 255)


def jpeg_artifacts(img: np.ndarray, quality) -> np.ndarray:
    """Quantize 8x8 block DCT coefficients per channel with the IJG table at ``quality``.

    ``img`` is HWC or NHWC in [0, 1]; for a batch ``quality`` may hold one value per image.
    """
    single = img.ndim == 3
    x = img[None] if single else img
    n, h, w, c = x.shape
    tables = np.stack([_quant_table(q) for q in np.broadcast_to(np.asarray(quality), (n,))])
    tables = tables.reshape(n, 1, 1, 1, 8, 8)
    blocks = (x * 255.0 - 128.0).reshape(n, h // 8, 8, w // 8, 8, c).transpose(0, 1, 3, 5, 2, 4)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / tables) * tables
    out = fft.idctn(coef, axes=(-2, -1), norm="ortho").transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
    out = (out + 128.0) / 255.0
    return out[0] if single else out


def photometric_batch(imgs: np.ndarray, draws: list[AugmentDraw]) -> np.ndarray:
    """Phase-2 pixel changes for a batch of NHWC images in [0, 1], one draw per image."""
    out = imgs.astype(np.float64)
    tone = np.array([bool(d.brightness or d.contrast != 1.0 or any(d.gains)) for d in draws], dtype=bool)
    blur = np.array([d.blur_length > 1.0 for d in draws], dtype=bool)
    jpeg = np.array([d.jpeg_quality is not None for d in draws], dtype=bool)
    if tone.any():
        idx = np.flatnonzero(tone)
        bright = np.array([draws[i].brightness for i in idx]).reshape(-1, 1, 1, 1)
        contrast = np.array([draws[i].contrast for i in idx]).reshape(-1, 1, 1, 1)
        gains = np.array([draws[i].gains for i in idx]).reshape(-1, 1, 1, 3)
        x = out[idx] * (1.0 + bright)
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        out[idx] = ((x - mean) * contrast + mean) * (1.0 + gains)
    for i in np.flatnonzero(blur):
        k = line_kernel(draws[i].blur_length, draws[i].blur_angle)
        out[i] = np.stack([ndimage.convolve(out[i, ..., ch], k, mode="nearest") for ch in range(out.shape[-1])], axis=-1)
    if jpeg.any():
        idx = np.flatnonzero(jpeg)
        out[idx] = jpeg_artifacts(np.clip(out[idx], 0, 1), [draws[i].jpeg_quality for i in idx])
    changed = tone | blur | jpeg
    out[changed] = np.clip(out[changed], 0.0, 1.0)
    return out.astype(imgs.dtype, copy=False)


def _photometric(img: np.ndarray, d: AugmentDraw) -> np.ndarray:
    return photometric_batch(img[None], [d])[0]


def apply_draw(patch: np.ndarray, label: Label, d: AugmentDraw) -> tuple[np.ndarray, Label]:
    """Apply a drawn augmentation to a float patch in [0, 1]."""
    img = patch if d.is_geometric_identity() else _warp(patch, d)
    img = _photometric(img, d)
    return img.astype(patch.dtype, copy=False), transform_label(label, d)


def apply_draws(patches: np.ndarray, draws: list[AugmentDraw]) -> np.ndarray:
    """Batched pixel part of :func:`apply_draw` (labels via :func:`transform_label`)."""
    return photometric_batch(warp_batch(patches, draws), draws)


def augment(
    patch: np.ndarray, label: Label, phase: int, rng: np.random.Generator, strength: float = 1.0
) -> tuple[np.ndarray, Label]:
    """Draw and apply one augmentation. The class label never changes."""
    return apply_draw(patch, label, sample_draw(phase, rng, strength))
