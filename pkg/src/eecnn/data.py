"""Patch datasets: labels, the "PTCH" file format and train/validation splits.

Coordinates are in pixels with pixel centers at 0..31, so the patch covers
[-0.5, 31.5] on both axes. Centers and boxes may lie outside it.

File layout, little-endian::

    magic "PTCH" | u16 version | u32 count | u32 reserved
    per record: 3072 pixel bytes (32x32 RGB, row-major)
                u8 class | f32 center_x | f32 center_y | f32 x0, y0, x1, y1
                u8 concealed | u8 visibility
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import FormatError, ParameterError

PATCH = 32
PIXEL_BYTES = PATCH * PATCH * 3
MAGIC = b"PTCH"
VERSION = 1
HEADER = struct.Struct("<4sHII")
LABEL = struct.Struct("<Bff4fBB")
RECORD_BYTES = PIXEL_BYTES + LABEL.size
PATCH_LO, PATCH_HI = -0.5, PATCH - 0.5


def _f32(v: float) -> float:
    return float(np.float32(v))


@dataclass(frozen=True)
class Label:
    """Ground truth for one patch.

    ``visibility`` is the 25% bucket (0..3) of how much of the object is
    inside the patch and unconcealed. Background labels carry zero geometry.
    """

    cls: int
    center: tuple[float, float] = (0.0, 0.0)
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    concealed: bool = False
    visibility: int = 0

    def __post_init__(self) -> None:
        if self.cls not in (0, 1):
            raise ParameterError(f"class must be 0 or 1, got {self.cls}")
        if not 0 <= self.visibility <= 3:
            raise ParameterError(f"visibility quartile must be in 0..3, got {self.visibility}")
        x0, y0, x1, y1 = self.bbox
        if x0 > x1 or y0 > y1:
            raise ParameterError(f"bbox corners out of order: {self.bbox}")
        object.__setattr__(self, "center", tuple(_f32(v) for v in self.center))
        object.__setattr__(self, "bbox", tuple(_f32(v) for v in self.bbox))
        object.__setattr__(self, "concealed", bool(self.concealed))

    @classmethod
    def background(cls) -> "Label":
        return cls(0)

    @classmethod
    def ball(cls, center: tuple[float, float], radius: float, concealed: bool = False, visibility: int = 3) -> "Label":
        cx, cy = center
        return cls(1, (cx, cy), (cx - radius, cy - radius, cx + radius, cy + radius), concealed, visibility)


@dataclass(eq=False)
class PatchRecord:
    pixels: np.ndarray  # (32, 32, 3) uint8
    label: Label

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != (PATCH, PATCH, 3) or self.pixels.dtype != np.uint8:
            raise ParameterError(f"patch must be 32x32x3 uint8, got {self.pixels.shape} {self.pixels.dtype}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatchRecord):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.pixels, other.pixels)


class PatchSet(Sequence[PatchRecord]):
    """Array-backed collection of patches.

    Indexing with an integer yields a :class:`PatchRecord`; indexing with an
    index array or slice yields another :class:`PatchSet`.
    """

    def __init__(
        self,
        pixels: np.ndarray,
        cls: np.ndarray,
        center: np.ndarray,
        bbox: np.ndarray,
        concealed: np.ndarray,
        visibility: np.ndarray,
    ):
        self.pixels = np.ascontiguousarray(pixels, dtype=np.uint8).reshape(-1, PATCH, PATCH, 3)
        self.cls = np.asarray(cls, dtype=np.uint8)
        self.center = np.asarray(center, dtype=np.float32).reshape(-1, 2)
        self.bbox = np.asarray(bbox, dtype=np.float32).reshape(-1, 4)
        self.concealed = np.asarray(concealed, dtype=bool)
        self.visibility = np.asarray(visibility, dtype=np.uint8)
        n = len(self.pixels)
        for arr in (self.cls, self.center, self.bbox, self.concealed, self.visibility):
            if len(arr) != n:
                raise ParameterError("patch set arrays have inconsistent lengths")

    @classmethod
    def empty(cls) -> "PatchSet":
        return cls(np.zeros((0, PATCH, PATCH, 3)), [], np.zeros((0, 2)), np.zeros((0, 4)), [], [])

    @classmethod
    def from_records(cls, records: Iterable[PatchRecord]) -> "PatchSet":
        records = list(records)
        if not records:
            return cls.empty()
        return cls(
            np.stack([r.pixels for r in records]),
            [r.label.cls for r in records],
            [r.label.center for r in records],
            [r.label.bbox for r in records],
            [r.label.concealed for r in records],
            [r.label.visibility for r in records],
        )

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            i = int(idx)
            label = Label(
                int(self.cls[i]),
                tuple(float(v) for v in self.center[i]),
                tuple(float(v) for v in self.bbox[i]),
                bool(self.concealed[i]),
                int(self.visibility[i]),
            )
            return PatchRecord(self.pixels[i], label)
        return PatchSet(
            self.pixels[idx], self.cls[idx], self.center[idx], self.bbox[idx], self.concealed[idx], self.visibility[idx]
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatchSet):
            return NotImplemented
        return len(self) == len(other) and all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.pixels, self.cls, self.center, self.bbox, self.concealed, self.visibility),
                (other.pixels, other.cls, other.center, other.bbox, other.concealed, other.visibility),
            )
        )

    def images(self, idx=slice(None)) -> np.ndarray:
        """Pixels scaled to float32 in [0, 1]."""
        return self.pixels[idx].astype(np.float32) / np.float32(255.0)

    @property
    def positive_fraction(self) -> float:
        return float(self.cls.mean()) if len(self) else 0.0


def concat(sets: Sequence[PatchSet]) -> PatchSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        return PatchSet.empty()
    return PatchSet(
        *(np.concatenate([getattr(s, f) for s in sets]) for f in ("pixels", "cls", "center", "bbox", "concealed", "visibility"))
    )


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _pack(rec: PatchRecord) -> bytes:
    lb = rec.label
    return rec.pixels.tobytes() + LABEL.pack(lb.cls, *lb.center, *lb.bbox, int(lb.concealed), lb.visibility)


def write_dataset(records: Iterable[PatchRecord], path: str | os.PathLike) -> int:
    """Write records to ``path``; returns the record count.

    Unsized iterables are streamed and the count patched in afterwards.
    """
    n = 0
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, 0, 0))
        for rec in records:
            fh.write(_pack(rec))
            n += 1
        fh.seek(0)
        fh.write(HEADER.pack(MAGIC, VERSION, n, 0))
    return n


def _unpack(buf: bytes, index: int, offset: int) -> PatchRecord:
    pixels = np.frombuffer(buf, np.uint8, PIXEL_BYTES).reshape(PATCH, PATCH, 3).copy()
    cls, cx, cy, x0, y0, x1, y1, concealed, vis = LABEL.unpack_from(buf, PIXEL_BYTES)
    if cls > 1 or concealed > 1 or vis > 3:
        raise FormatError(f"invalid label fields class={cls} concealed={concealed} visibility={vis}", offset, index)
    values = (cx, cy, x0, y0, x1, y1)
    if not all(math.isfinite(v) for v in values) or x0 > x1 or y0 > y1:
        raise FormatError("invalid label geometry", offset, index)
    return PatchRecord(pixels, Label(cls, (cx, cy), (x0, y0, x1, y1), bool(concealed), vis))


def iter_dataset(path: str | os.PathLike) -> Iterator[PatchRecord]:
    """Stream records one at a time."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise FormatError("truncated header", offset=len(head))
        magic, version, count, _ = HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError("bad magic, not a PTCH dataset", offset=0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        for i in range(count):
            offset = HEADER.size + i * RECORD_BYTES
            buf = fh.read(RECORD_BYTES)
            if len(buf) < RECORD_BYTES:
                raise FormatError(f"truncated record, {len(buf)} of {RECORD_BYTES} bytes", offset + len(buf), i)
            yield _unpack(buf, i, offset)
        if fh.read(1):
            raise FormatError("trailing bytes after last record", HEADER.size + count * RECORD_BYTES, count)


def read_dataset(path: str | os.PathLike) -> PatchSet:
    return PatchSet.from_records(iter_dataset(path))


def dataset_file_size(n: int) -> int:
    return HEADER.size + n * RECORD_BYTES


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_dataset(records: PatchSet, train_fraction: float = 0.7, seed: int = 0) -> tuple[PatchSet, PatchSet]:
    """Seeded class-stratified split.

    The overall train size is ``round(train_fraction * n)``; it is shared
    between classes by largest remainder so both sides keep the positive
    fraction.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train fraction must lie in (0, 1), got {train_fraction}")
    if not isinstance(records, PatchSet):
        records = PatchSet.from_records(records)
    train_idx, val_idx = stratified_indices(records.cls, train_fraction, seed)
    return records[train_idx], records[val_idx]


def stratified_indices(cls: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    cls = np.asarray(cls)
    rng = np.random.default_rng(seed)
    n_train = int(round(train_fraction * len(cls)))
    groups = [np.flatnonzero(cls == c) for c in (0, 1)]
    quotas = [train_fraction * len(g) for g in groups]
    take = [int(math.floor(q)) for q in quotas]
    for c in sorted((0, 1), key=lambda c: -(quotas[c] - take[c])):
        if sum(take) < n_train and take[c] < len(groups[c]):
            take[c] += 1
    train, val = [], []
    for g, k in zip(groups, take):
        perm = rng.permutation(g)
        train.append(perm[:k])
        val.append(perm[k:])
    train_idx = rng.permutation(np.concatenate(train))
    val_idx = rng.permutation(np.concatenate(val))
    return train_idx, val_idx


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------


def bbox_inside_fraction(bbox: Sequence[float]) -> float:
    x0, y0, x1, y1 = bbox
    area = (x1 - x0) * (y1 - y0)
    if area <= 0:
        return 0.0
    w = max(0.0, min(x1, PATCH_HI) - max(x0, PATCH_LO))
    h = max(0.0, min(y1, PATCH_HI) - max(y0, PATCH_LO))
    return w * h / area


def compute_visibility(
    bbox: Sequence[float] | None, inside_fraction: float | None = None, occluded_fraction: float = 0.0
) -> int:
    """Quartile of the visible fraction ``inside * (1 - occluded)``.

    Without ``inside_fraction`` the share of ``bbox`` lying inside the patch
    is used.
    """
    if inside_fraction is None:
        inside_fraction = bbox_inside_fraction(bbox) if bbox is not None else 0.0
    visible = min(max(inside_fraction * (1.0 - occluded_fraction), 0.0), np.nextafter(1.0, 0.0))
    return int(math.floor(4.0 * visible))
