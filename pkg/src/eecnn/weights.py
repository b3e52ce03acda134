"""Binary weight files ("EEW1").

Layout, all little-endian::

    magic "EEW1" | u16 version | u32 layer_count | layer records...
    u32 ee_tap (0xFFFFFFFF if absent) | u32 ee_layer_count | layer records...

    layer record:
        u8 kind | u16 name_len | name (utf-8) | u8 frozen
        u8 attr_count | (u8 key, f32 value) * attr_count
        u32 blob_count | (u8 rank, u32 dims[rank], f32 data) * blob_count

Blobs are stored in a fixed order per kind (see ``BLOB_ORDER``).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError, ParameterError
from .graph import INPUT_SHAPE, ModelGraph
from .nn import Layer

MAGIC = b"EEW1"
VERSION = 1
NO_TAP = 0xFFFFFFFF

KIND_CODES = {"sepconv": 1, "conv": 2, "batchnorm": 3, "leaky_relu": 4, "maxpool": 5, "flatten": 6, "dense": 7}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
ATTR_CODES = {"stride": 1, "kernel": 2, "depth_mult": 3, "alpha": 4, "epsilon": 5, "pool": 6}
ATTR_NAMES = {v: k for k, v in ATTR_CODES.items()}
BLOB_ORDER = {
    "sepconv": ("depthwise", "pointwise"),
    "conv": ("kernel",),
    "batchnorm": ("gamma", "beta", "mean", "var"),
    "dense": ("weight", "bias"),
}


def _encode_layer(layer: Layer) -> bytes:
    name = layer.name.encode("utf-8")
    parts = [struct.pack("<BH", KIND_CODES[layer.kind], len(name)), name, struct.pack("<B", int(layer.frozen))]
    attrs = sorted((ATTR_CODES[k], v) for k, v in layer.attrs.items())
    parts.append(struct.pack("<B", len(attrs)))
    for code, value in attrs:
        parts.append(struct.pack("<Bf", code, value))
    names = BLOB_ORDER.get(layer.kind, ())
    parts.append(struct.pack("<I", len(names)))
    for key in names:
        arr = np.ascontiguousarray(layer.params[key], dtype="<f4")
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def dumps(g: ModelGraph) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(g.layers))]
    parts += [_encode_layer(layer) for layer in g.layers]
    parts.append(struct.pack("<II", NO_TAP if g.ee_tap is None else g.ee_tap, len(g.ee_branch)))
    parts += [_encode_layer(layer) for layer in g.ee_branch]
    return b"".join(parts)


def save_weights(g: ModelGraph, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(g))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_layer(r: _Reader) -> Layer:
    start = r.pos
    code, name_len = r.unpack("<BH", "layer header")
    if code not in KIND_NAMES:
        raise FormatError(f"unknown layer kind code {code}", offset=start)
    kind = KIND_NAMES[code]
    try:
        name = r.take(name_len, "layer name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("layer name is not valid utf-8", offset=start + 3) from exc
    (frozen,) = r.unpack("<B", "frozen flag")
    if frozen > 1:
        raise FormatError(f"bad frozen flag {frozen}", offset=r.pos - 1)
    (n_attrs,) = r.unpack("<B", "attribute count")
    attrs = {}
    for _ in range(n_attrs):
        at = r.pos
        key, value = r.unpack("<Bf", "attribute")
        if key not in ATTR_NAMES:
            raise FormatError(f"unknown attribute key {key}", offset=at)
        attrs[ATTR_NAMES[key]] = value
    names = BLOB_ORDER.get(kind, ())
    at = r.pos
    (n_blobs,) = r.unpack("<I", "blob count")
    if n_blobs != len(names):
        raise FormatError(f"{kind} layer needs {len(names)} blobs, file has {n_blobs}", offset=at)
    params = {}
    for key in names:
        (rank,) = r.unpack("<B", "blob rank")
        dims = r.unpack(f"<{rank}I", "blob dims")
        count = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * count, f"blob {key!r}")
        params[key] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    return Layer(name, kind, attrs, params, bool(frozen))


def loads(buf: bytes) -> ModelGraph:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an EEW1 weight file", offset=0)
    version, n_layers = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    layers = [_decode_layer(r) for _ in range(n_layers)]
    at = r.pos
    tap, n_ee = r.unpack("<II", "early-exit header")
    ee = [_decode_layer(r) for _ in range(n_ee)]
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", offset=r.pos)
    if tap == NO_TAP:
        if ee:
            raise FormatError("early-exit layers present without a tap index", offset=at)
        tap_idx = None
    elif tap >= n_layers:
        raise FormatError(f"tap index {tap} out of range", offset=at)
    else:
        tap_idx = tap
    last: Exception | None = None
    for shape in _candidate_inputs(layers):
        g = ModelGraph(layers, tap_idx, ee, shape)
        try:
            g.shapes()
            g.ee_shapes()
            return g
        except (ParameterError, IndexError, ValueError) as exc:
            last = exc
    raise FormatError(f"inconsistent layer shapes: {last}")


def _candidate_inputs(layers: list[Layer]) -> list[tuple[int, int, int]]:
    """Input shapes to try: the full patch first, then the square sizes a split tail can start at."""
    channels = None
    for layer in layers:
        p = layer.params
        if "depthwise" in p:
            channels = p["depthwise"].shape[2]
        elif "kernel" in p:
            channels = p["kernel"].shape[0]
        elif "gamma" in p:
            channels = p["gamma"].shape[0]
        if channels is not None:
            break
    if channels is None:
        return [INPUT_SHAPE]
    sizes = (32, 16, 8, 4, 2, 1)
    out = [INPUT_SHAPE] if channels == INPUT_SHAPE[2] else []
    return out + [(s, s, int(channels)) for s in sizes if (s, s, channels) != INPUT_SHAPE]


def load_weights(path: str | os.PathLike) -> ModelGraph:
    with open(path, "rb") as fh:
        return loads(fh.read())
