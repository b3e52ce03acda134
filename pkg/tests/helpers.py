"""Shared oracles for the test suite: naive loop kernels and finite differences."""

from __future__ import annotations

import math
import zlib

import numpy as np

from eecnn import graph as G
from eecnn import nn
from eecnn.data import PatchSet
from eecnn.losses import LossWeights, composite_loss
from eecnn.train import main_loss_and_grads

FD_STEP = 1e-3
FD_RTOL = 1e-2


def naive_depthwise(x, kernel, stride):
    """Direct loop convolution with TF-style 'same' padding (extra pad after)."""
    n, h, w, c = x.shape
    kh, kw, _, m = kernel.shape
    oh, ow = -(-h // stride), -(-w // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - w, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((n, oh, ow, c * m))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    for k in range(m):
                        acc = 0.0
                        for di in range(kh):
                            for dj in range(kw):
                                yy, xx = i * stride + di - top, j * stride + dj - left
                                if 0 <= yy < h and 0 <= xx < w:
                                    acc += x[b, yy, xx, ch] * kernel[di, dj, ch, k]
                        out[b, i, j, ch * m + k] = acc
    return out


def naive_pointwise(x, kernel):
    n, h, w, c = x.shape
    out = np.zeros((n, h, w, kernel.shape[1]))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for o in range(kernel.shape[1]):
                    out[b, i, j, o] = sum(x[b, i, j, q] * kernel[q, o] for q in range(c))
    return out


def central_difference(f, arr, idx, h=FD_STEP):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def numeric_gradient(f, arr, h=FD_STEP):
    g = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        g[idx] = central_difference(f, arr, idx, h)
    return g


def rel_error(analytic, numeric):
    """Norm-relative error, robust to individual near-zero entries."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def random_ee_graph(seed: int, scale: float = 1.0):
    """EE-enhanced ball CNN with every weight perturbed, so outputs spread over (0, 1)."""

    g = G.freeze_trunk(G.attach_early_exit(G.build_ball_cnn(seed), seed=seed + 1))
    rng = np.random.default_rng(seed)
    for layer in g.all_layers():
        for k, v in layer.params.items():
            if k == "var":
                layer.params[k] = (v * rng.uniform(0.5, 2.0, v.shape)).astype(np.float32)
            else:
                layer.params[k] = (v + scale * rng.normal(size=v.shape)).astype(np.float32)
    # rescale both confidence logits to roughly N(0, 2) on random patches
    x = rng.random((64, 32, 32, 3), dtype=np.float32)
    out, tap = g.run_trunk(x)
    for dense, z in ((g.layers[-1], out[:, 0]), (g.ee_branch[-1], g.run_branch(tap)[:, 0])):
        a = 2.0 / max(float(z.std()), 1e-6)
        dense.params["weight"][:, 0] *= np.float32(a)
        dense.params["bias"][0] = np.float32(a * (dense.params["bias"][0] - float(np.median(z))))
    return g


def _f64(layer: nn.Layer) -> nn.Layer:
    layer.params = {k: v.astype(np.float64) for k, v in layer.params.items()}
    return layer


def _instance(kind: str, rng: np.random.Generator):
    """A random small layer and input; inputs avoid kinks closer than the FD step."""
    n = int(rng.integers(1, 3))
    h = w = int(rng.choice([2, 4]))
    c = int(rng.integers(1, 4))
    if kind == "sepconv":
        layer = nn.make_sepconv("s", c, 4, int(rng.integers(1, 3)), rng, stride=int(rng.choice([1, 2])))
    elif kind == "conv":
        layer = nn.make_conv1x1("c", c, 4, rng)
    elif kind in ("batchnorm_batch", "batchnorm_stored"):
        layer = nn.make_batchnorm("b", c)
        layer.params["gamma"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
        layer.params["beta"] = rng.normal(size=c).astype(np.float32)
        layer.params["mean"] = rng.normal(size=c).astype(np.float32)
        layer.params["var"] = rng.uniform(0.5, 2.0, c).astype(np.float32)
        n = max(n, 2)
    elif kind == "leaky_relu":
        layer = nn.make_leaky_relu("a", float(rng.uniform(0, 0.5)))
    elif kind == "maxpool":
        layer = nn.make_maxpool("p")
    elif kind == "flatten":
        layer = nn.make_flatten("f")
    else:
        layer = nn.make_dense("d", h * w * c, int(rng.integers(1, 4)), rng)
        layer.params["bias"] = rng.normal(size=layer.params["bias"].shape).astype(np.float32)
    x = rng.normal(size=(n, h, w, c))
    if kind == "leaky_relu":
        x = np.where(np.abs(x) < 10 * FD_STEP, x + np.sign(x + 1e-12) * 0.1, x)
    if kind == "maxpool":
        # well separated values so no window's argmax flips within +-h
        x = rng.permutation(x.size).reshape(x.shape) * 0.01
    if kind == "dense":
        x = x.reshape(n, -1)
    return _f64(layer), x


LAYER_KINDS = ["sepconv", "conv", "batchnorm_batch", "batchnorm_stored", "leaky_relu", "maxpool", "flatten", "dense"]


def layer_gradient_worst(kind: str, n_instances: int = 100) -> float:
    """Worst norm-relative FD error over random instances of one layer kind (input and parameter grads)."""
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    training = kind == "batchnorm_batch"
    worst = 0.0
    for _ in range(n_instances):
        layer, x = _instance(kind, rng)
        probe = rng.normal(size=layer.forward(x, training=training).shape)
        loss = lambda: float(np.sum(layer.forward(x, training=training) * probe))  # noqa: E731
        cache: dict = {}
        layer.forward(x, cache, training)
        gx, grads = layer.backward(cache, probe)
        worst = max(worst, rel_error(gx, numeric_gradient(loss, x)))
        for name in layer.trainable_names():
            worst = max(worst, rel_error(grads[name], numeric_gradient(loss, layer.params[name])))
    return worst


def _stable_instance(rng, n, t_q, h):
    """Logits and centers whose quadrant and |.| kinks do not move within +-h."""
    z = rng.normal(0, 3, n)
    t = math.log(t_q / (1 - t_q))
    z = np.where(np.abs(z - t) < 10 * h, z + 0.5, z)
    ctr = rng.uniform(-4, 36, (n, 2))
    xy = ctr + rng.choice([-1, 1], (n, 2)) * rng.uniform(10 * h, 8, (n, 2))
    return np.column_stack([z, xy]), ctr


def composite_gradient_worst(n_instances: int = 100) -> float:
    """Worst FD error of the composite loss gradient w.r.t. network outputs."""

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 9))
        out, ctr = _stable_instance(rng, n, 0.5, FD_STEP)
        cls, vis, conc = rng.integers(0, 2, n), rng.integers(0, 4, n), rng.random(n) < 0.3
        w = LossWeights(w_fp=float(rng.choice([1, 1000])), gamma=float(rng.choice([0, 2])))
        f = lambda: composite_loss(out, cls, ctr, vis, conc, w).loss  # noqa: E731
        worst = max(worst, rel_error(composite_loss(out, cls, ctr, vis, conc, w).grad, numeric_gradient(f, out)))
    return worst


def _tiny_batch(rng, n):

    x = rng.random((n, 32, 32, 3))
    cls = rng.integers(0, 2, n)
    ctr = np.where(cls[:, None] == 1, rng.uniform(0, 31, (n, 2)), 0.0)
    data = PatchSet(np.zeros((n, 32, 32, 3)), cls, ctr, np.zeros((n, 4)), rng.random(n) < 0.3, np.where(cls == 1, rng.integers(0, 4, n), 0))
    return x, data


GRAPH_STEP = 1e-6  # kinks are dense across a whole network; see _kink_signature


def _kink_signature(g, x, data, w, training):

    """Loss plus every sign that decides a non-smooth branch: relu inputs, position residuals, quadrants."""
    caches: list[dict] = []
    out, _ = g.run_trunk(x, caches, training)
    res = main_loss_and_grads(g, x, data, w, training)[0]
    relu = [c["x"] >= 0 for layer, c in zip(g.layers, caches) if layer.kind == "leaky_relu"]
    resid = (out[:, 1:3] - data.center) >= 0
    return res, np.concatenate([r.ravel() for r in relu] + [resid.ravel(), res.quadrant.ravel() > 1])


def full_graph_gradient_check(n_instances: int = 100) -> tuple[int, int, float]:
    """Directional derivative of the composite loss through the whole network vs central differences.

    Returns (instances checked, instances skipped for a kink inside the stencil, worst relative error).
    """

    rng = np.random.default_rng(9)
    worst = 0.0
    checked = skipped = 0
    while checked < n_instances:
        g = G.astype(G.build_ball_cnn(int(rng.integers(1 << 30))), np.float64)
        x, data = _tiny_batch(rng, int(rng.integers(1, 5)))
        w = LossWeights(w_fp=float(rng.choice([1, 1000])))
        training = bool(rng.integers(2)) and len(data) > 1
        res, grads, _ = main_loss_and_grads(g, x, data, w, training)
        # unit direction mixing noise with the claimed gradient keeps the derivative away from zero
        rnd = [{k: rng.normal(size=v.shape) for k, v in gr.items()} for gr in grads]
        rn = math.sqrt(sum(float(np.sum(v * v)) for d in rnd for v in d.values()))
        gn = math.sqrt(sum(float(np.sum(v * v)) for d in grads for v in d.values()))
        dirs = [{k: rnd[i][k] / rn + grads[i][k] / gn for k in grads[i]} for i in range(len(grads))]
        norm = math.sqrt(sum(float(np.sum(v * v)) for d in dirs for v in d.values()))
        dirs = [{k: v / norm for k, v in d.items()} for d in dirs]
        analytic = sum(float(np.sum(grads[i][k] * dirs[i][k])) for i in range(len(grads)) for k in grads[i])
        base = {(i, k): g.layers[i].params[k].copy() for i in range(len(grads)) for k in grads[i]}

        def at(t):
            for (i, k), v in base.items():
                g.layers[i].params[k] = v + t * dirs[i][k]
            return _kink_signature(g, x, data, w, training)

        (_, sig0), (up, sig_up), (down, sig_down) = at(0.0), at(GRAPH_STEP), at(-GRAPH_STEP)
        if not (np.array_equal(sig0, sig_up) and np.array_equal(sig0, sig_down)):
            skipped += 1
            continue  # a non-smooth point lies inside the stencil
        numeric = (up.loss - down.loss) / (2 * GRAPH_STEP)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        checked += 1
    return checked, skipped, worst
