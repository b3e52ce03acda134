"""The ball-detection CNN, its early-exit branch, and model splitting.

A :class:`ModelGraph` is a linear trunk of layers ending in a 3-output dense
head (confidence logit, x, y) plus an optional early-exit branch that reads
the trunk activation after layer ``ee_tap`` and emits one logit.

Graph transforms (:func:`attach_early_exit`, :func:`freeze_trunk`,
:func:`split_at_exit`) return new graphs and leave their argument untouched.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ParameterError, UsageError

INPUT_SHAPE = (32, 32, 3)
PATCH_CENTER = 15.5
# initial ball probabilities: the main head starts out rejecting, the exit starts out passing
MAIN_PRIOR = 0.01
EE_PRIOR = 0.99

# (separable filters, depth multiplier, 1x1 filters) per block
BALL_CNN_BLOCKS = ((8, 1, 4), (16, 2, 8), (20, 4, 12), (32, 8, 16))

_LO = np.nextafter(0.0, 1.0)
_HI = np.nextafter(1.0, 0.0)


def logistic(z: np.ndarray) -> np.ndarray:
    """Sigmoid in float64, kept strictly inside (0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _LO, _HI)


@dataclass
class ModelGraph:
    layers: list[nn.Layer]
    ee_tap: int | None = None
    ee_branch: list[nn.Layer] = field(default_factory=list)
    input_shape: tuple[int, int, int] = INPUT_SHAPE

    # -- structure ----------------------------------------------------------

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every trunk layer."""
        out, shape = [], tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    def ee_shapes(self) -> list[tuple[int, ...]]:
        if self.ee_tap is None:
            return []
        out, shape = [], self.shapes()[self.ee_tap]
        for layer in self.ee_branch:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    def all_layers(self) -> list[nn.Layer]:
        return list(self.layers) + list(self.ee_branch)

    def layer_table(self) -> list[dict]:
        """One row per layer: name, kind, output shape, MACs, params, branch."""
        rows = []
        shape = tuple(self.input_shape)
        for layer in self.layers:
            rows.append(_row(layer, shape, "trunk"))
            shape = layer.output_shape(shape)
        if self.ee_tap is not None:
            shape = self.shapes()[self.ee_tap]
            for layer in self.ee_branch:
                rows.append(_row(layer, shape, "ee"))
                shape = layer.output_shape(shape)
        return rows

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ParameterError(f"expected input of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")

    def run_trunk(
        self,
        x: np.ndarray,
        caches: list[dict] | None = None,
        training: bool = False,
        stop: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray | None]:
        """Run trunk layers ``0 .. stop`` (all by default).

        Returns the last activation and the tap activation (None without an
        early exit, or when the trunk stops before the tap).
        """
        self._check_input(x)
        tap = None
        end = len(self.layers) if stop is None else stop + 1
        for i in range(end):
            cache = {} if caches is not None else None
            x = self.layers[i].forward(x, cache, training)
            if caches is not None:
                caches.append(cache)
            if i == self.ee_tap:
                tap = x
        return x, tap

    def run_branch(self, tap: np.ndarray, caches: list[dict] | None = None, training: bool = False) -> np.ndarray:
        if self.ee_tap is None:
            raise UsageError("graph has no early exit")
        x = tap
        for layer in self.ee_branch:
            cache = {} if caches is not None else None
            x = layer.forward(x, cache, training)
            if caches is not None:
                caches.append(cache)
        return x

    def main_logits(self, x: np.ndarray) -> np.ndarray:
        """Raw (N, 3) head output: confidence logit, x, y."""
        return self.run_trunk(x)[0]

    def ee_logits(self, x: np.ndarray) -> np.ndarray:
        if self.ee_tap is None:
            raise UsageError("graph has no early exit")
        _, tap = self.run_trunk(x, stop=self.ee_tap)
        return self.run_branch(tap)[:, 0]


def _row(layer: nn.Layer, in_shape: tuple[int, ...], branch: str) -> dict:
    return {
        "name": layer.name,
        "kind": layer.kind,
        "output": layer.output_shape(in_shape),
        "macs": nn.mac_count(layer, in_shape),
        "params": nn.param_count(layer),
        "branch": branch,
        "frozen": layer.frozen,
    }


@dataclass
class SplitModel:
    """Head (input -> tap features, EE logit) and tail (tap features -> 3 outputs)."""

    head: ModelGraph
    tail: ModelGraph

    def head_forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Tap features and early-exit confidence for a batch."""
        feats, _ = self.head.run_trunk(x)
        return feats, logistic(self.head.run_branch(feats)[:, 0])

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.head.run_trunk(x)[0]

    def ee_logits(self, x: np.ndarray) -> np.ndarray:
        return self.head.ee_logits(x)

    def tail_logits(self, feats: np.ndarray) -> np.ndarray:
        return self.tail.run_trunk(feats)[0]


# ---------------------------------------------------------------------------
# construction and transforms
# ---------------------------------------------------------------------------


def _logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ParameterError(f"prior must lie in (0, 1), got {p}")
    return float(np.log(p / (1.0 - p)))


def build_ball_cnn(
    seed: int = 0,
    alpha: float = nn.DEFAULT_ALPHA,
    epsilon: float = nn.DEFAULT_EPSILON,
    prior: float = MAIN_PRIOR,
) -> ModelGraph:
    """Four (separable conv, 1x1 conv) blocks on a 32x32x3 patch, then flatten and dense->3.

    Every convolution is followed by batchnorm and leaky relu. Position
    outputs start at the patch center and the confidence bias at
    ``logit(prior)``, so an untrained net sits below the decision threshold
    instead of flooding the false-positive quadrant.
    """
    rng = np.random.default_rng(seed)
    layers: list[nn.Layer] = []
    c = INPUT_SHAPE[2]
    for b, (sep_f, mult, conv_f) in enumerate(BALL_CNN_BLOCKS, start=1):
        layers.append(nn.make_sepconv(f"sepconv{b}", c, sep_f, mult, rng))
        layers.append(nn.make_batchnorm(f"sepconv{b}_bn", sep_f, epsilon))
        layers.append(nn.make_leaky_relu(f"sepconv{b}_act", alpha))
        layers.append(nn.make_conv1x1(f"conv{b}", sep_f, conv_f, rng))
        layers.append(nn.make_batchnorm(f"conv{b}_bn", conv_f, epsilon))
        layers.append(nn.make_leaky_relu(f"conv{b}_act", alpha))
        c = conv_f
    layers.append(nn.make_flatten("flatten"))
    head = nn.make_dense("dense", 2 * 2 * c, 3, rng)
    head.params["bias"][0] = _logit(prior)
    head.params["bias"][1:] = PATCH_CENTER
    layers.append(head)
    return ModelGraph(layers)


def attach_early_exit(g: ModelGraph, tap: int | None = None, seed: int = 1, prior: float = EE_PRIOR) -> ModelGraph:
    """Copy of ``g`` with a maxpool -> flatten -> dense(1) branch at ``tap``.

    The default tap is the activation closing the first separable block. The
    exit bias starts at ``logit(prior)``: an untrained exit lets everything pass.
    """
    if g.ee_tap is not None:
        raise UsageError("graph already has an early exit")
    if tap is None:
        tap = next(i for i, layer in enumerate(g.layers) if layer.kind == "leaky_relu")
    out = copy.deepcopy(g)
    h, w, c = out.shapes()[tap]
    rng = np.random.default_rng(seed)
    out.ee_tap = tap
    out.ee_branch = [
        nn.make_maxpool("ee_pool", 2),
        nn.make_flatten("ee_flatten"),
        nn.make_dense("ee_dense", (h // 2) * (w // 2) * c, 1, rng),
    ]
    out.ee_branch[-1].params["bias"][0] = _logit(prior)
    return out


def freeze_trunk(g: ModelGraph) -> ModelGraph:
    out = copy.deepcopy(g)
    for layer in out.layers:
        layer.frozen = True
    for layer in out.ee_branch:
        layer.frozen = False
    return out


def split_at_exit(g: ModelGraph) -> SplitModel:
    if g.ee_tap is None:
        raise UsageError("cannot split a graph without an early exit")
    g = copy.deepcopy(g)
    tap = g.ee_tap
    head = ModelGraph(g.layers[: tap + 1], tap, g.ee_branch, g.input_shape)
    tail = ModelGraph(g.layers[tap + 1 :], None, [], g.shapes()[tap])
    return SplitModel(head, tail)


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def forward_main(g: ModelGraph, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Confidence in (0, 1) and pixel-space center (x, y) per sample."""
    out = g.main_logits(batch)
    return logistic(out[:, 0]), out[:, 1], out[:, 2]


def forward_ee(g: ModelGraph, batch: np.ndarray) -> np.ndarray:
    return logistic(g.ee_logits(batch))


def forward_both(g: ModelGraph, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Main (N, 3) output and early-exit logits from a single trunk pass."""
    out, tap = g.run_trunk(batch)
    return out, g.run_branch(tap)[:, 0]


def total_params(g: ModelGraph, branch: str | None = None) -> int:
    layers = {"trunk": g.layers, "ee": g.ee_branch, None: g.all_layers()}[branch]
    return sum(nn.param_count(layer) for layer in layers)


def total_macs(g: ModelGraph, branch: str | None = None) -> int:
    return sum(r["macs"] for r in g.layer_table() if branch is None or r["branch"] == branch)


def head_macs(g: ModelGraph) -> int:
    """MACs spent before the exit decision: trunk up to the tap plus the branch."""
    if g.ee_tap is None:
        raise UsageError("graph has no early exit")
    rows = g.layer_table()
    return sum(r["macs"] for r in rows[: g.ee_tap + 1]) + total_macs(g, "ee")


def weights_checksum(layers: list[nn.Layer]) -> str:
    import hashlib

    h = hashlib.sha256()
    for layer in layers:
        for key in sorted(layer.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(layer.params[key]).tobytes())
    return h.hexdigest()


def astype(g: ModelGraph, dtype) -> ModelGraph:
    """Copy of ``g`` with every weight array cast to ``dtype``."""
    out = copy.deepcopy(g)
    for layer in out.all_layers():
        layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
    return out
