"""Layer kernels for the patch classifier.

Feature maps are numpy arrays in NHWC layout (batch, height, width, channels),
float32 in normal use. Every kernel also accepts float64, which the gradient
tests rely on. Flattened activations are 2-D (batch, features).

Each layer kind has a pure functional forward, and a :class:`Layer` wrapper
that owns the weights, caches forward inputs on request and computes exact
reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, UsageError

KINDS = ("sepconv", "conv", "batchnorm", "leaky_relu", "maxpool", "flatten", "dense")

DEFAULT_ALPHA = 0.1
DEFAULT_EPSILON = 1e-3


def _f32(value: float) -> float:
    # attributes are stored as f32 on disk; keep them f32-representable in memory
    return float(np.float32(value))


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for 'same' convolution.

    Odd padding totals put the extra row/column after the data.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


# ---------------------------------------------------------------------------
# functional forward kernels
# ---------------------------------------------------------------------------


def leaky_relu(x: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    if alpha < 0:
        raise ParameterError(f"leaky relu slope must be >= 0, got {alpha}")
    return np.where(x >= 0, x, x * x.dtype.type(alpha))


def batchnorm_infer(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
) -> np.ndarray:
    """Normalize with stored statistics: ``gamma * (x - mean) / sqrt(var + eps) + beta``."""
    c = x.shape[-1]
    for arr, nm in ((gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")):
        if arr.shape != (c,):
            raise ParameterError(f"batchnorm {nm} has shape {arr.shape}, expected ({c},)")
    scale = gamma / np.sqrt(var + x.dtype.type(epsilon))
    return (x - mean) * scale + beta


def depthwise_conv(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    """Per-channel convolution; kernel layout [kh][kw][in_c][multiplier].

    Output channel ``c * m + j`` is input channel ``c`` convolved with kernel ``j``.
    """
    n, h, w, c = x.shape
    kh, kw, kc, m = kernel.shape
    if kc != c:
        raise ParameterError(f"depthwise kernel expects {kc} input channels, got {c}")
    oh, pt, pb = same_padding(h, kh, stride)
    ow, pl, pr = same_padding(w, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    out = np.zeros((n, oh, ow, c, m), dtype=np.result_type(x, kernel))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :]
            out += xs[..., None] * kernel[i, j]
    return out.reshape(n, oh, ow, c * m)


def pointwise(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """1x1 convolution; kernel layout [in_c][out_c]."""
    n, h, w, c = x.shape
    if kernel.shape[0] != c:
        raise ParameterError(f"1x1 kernel expects {kernel.shape[0]} input channels, got {c}")
    return (x.reshape(-1, c) @ kernel).reshape(n, h, w, kernel.shape[1])


def separable_conv(x: np.ndarray, depthwise: np.ndarray, pointwise_kernel: np.ndarray, stride: int = 2) -> np.ndarray:
    if pointwise_kernel.shape[0] != depthwise.shape[2] * depthwise.shape[3]:
        raise ParameterError(
            f"pointwise kernel expects {pointwise_kernel.shape[0]} channels, "
            f"depthwise stage yields {depthwise.shape[2] * depthwise.shape[3]}"
        )
    return pointwise(depthwise_conv(x, depthwise, stride), pointwise_kernel)


def conv1x1(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return pointwise(x, kernel)


def maxpool(x: np.ndarray, pool: int = 2) -> np.ndarray:
    n, h, w, c = x.shape
    if h % pool or w % pool:
        raise ParameterError(f"maxpool {pool}x{pool} needs spatial dims divisible by {pool}, got {h}x{w}")
    return x.reshape(n, h // pool, pool, w // pool, pool, c).max(axis=(2, 4))


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ParameterError(f"dense layer expects {weight.shape[0]} inputs, got shape {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ParameterError(f"dense bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    return x @ weight + bias


def glorot_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).

    Fans follow the usual kernel convention: receptive field size times the
    second-to-last / last dimension.
    """
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = receptive * shape[-2], receptive * shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    """One layer of a linear stack.

    ``params`` holds the weight arrays under fixed names per kind:

    * sepconv: ``depthwise`` [kh][kw][in_c][m], ``pointwise`` [in_c*m][out_c]
    * conv: ``kernel`` [in_c][out_c]
    * batchnorm: ``gamma``, ``beta``, ``mean``, ``var`` each [c]
    * dense: ``weight`` [in][out], ``bias`` [out]

    Forward calls that should be differentiated take a ``cache`` dict, which
    :meth:`backward` consumes. A cache belongs to exactly one forward call.
    """

    name: str
    kind: str
    attrs: dict[str, float] = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        self.attrs = {k: _f32(v) for k, v in self.attrs.items()}

    # -- bookkeeping --------------------------------------------------------

    def trainable_names(self) -> tuple[str, ...]:
        if self.kind == "sepconv":
            return ("depthwise", "pointwise")
        if self.kind == "conv":
            return ("kernel",)
        if self.kind == "batchnorm":
            return ("gamma", "beta")
        if self.kind == "dense":
            return ("weight", "bias")
        return ()

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape of one sample's output given one sample's input shape (no batch axis)."""
        k = self.kind
        if k == "sepconv":
            h, w, c = in_shape
            dw, pw = self.params["depthwise"], self.params["pointwise"]
            if dw.shape[2] != c:
                raise ParameterError(f"{self.name}: expects {dw.shape[2]} channels, got {c}")
            s = int(self.attrs.get("stride", 2))
            return (same_padding(h, dw.shape[0], s)[0], same_padding(w, dw.shape[1], s)[0], pw.shape[1])
        if k == "conv":
            h, w, c = in_shape
            if self.params["kernel"].shape[0] != c:
                raise ParameterError(f"{self.name}: expects {self.params['kernel'].shape[0]} channels, got {c}")
            return (h, w, self.params["kernel"].shape[1])
        if k == "maxpool":
            p = int(self.attrs.get("pool", 2))
            h, w, c = in_shape
            if h % p or w % p:
                raise ParameterError(f"{self.name}: odd spatial dims {h}x{w}")
            return (h // p, w // p, c)
        if k == "flatten":
            return (int(np.prod(in_shape)),)
        if k == "dense":
            if in_shape != (self.params["weight"].shape[0],):
                raise ParameterError(f"{self.name}: expects {self.params['weight'].shape[0]} inputs, got {in_shape}")
            return (self.params["weight"].shape[1],)
        return tuple(in_shape)

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray, cache: dict | None = None, training: bool = False) -> np.ndarray:
        """Apply the layer.

        ``training`` only matters for batchnorm: unfrozen batchnorm layers then
        normalize with batch statistics and record them in ``cache``.
        """
        k, p = self.kind, self.params
        if cache is not None:
            cache["x"] = x
        if k == "sepconv":
            s = int(self.attrs.get("stride", 2))
            if cache is None:
                return separable_conv(x, p["depthwise"], p["pointwise"], s)
            mid = depthwise_conv(x, p["depthwise"], s)
            cache["mid"] = mid
            return pointwise(mid, p["pointwise"])
        if k == "conv":
            return conv1x1(x, p["kernel"])
        if k == "batchnorm":
            eps = self.attrs.get("epsilon", DEFAULT_EPSILON)
            if training and not self.frozen:
                axes = tuple(range(x.ndim - 1))
                mu = x.mean(axis=axes)
                var = x.var(axis=axes)
                inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
                xhat = (x - mu) * inv
                if cache is not None:
                    cache.update(mode="batch", xhat=xhat, inv=inv, batch_mean=mu, batch_var=var)
                return xhat * p["gamma"] + p["beta"]
            if cache is not None:
                cache["mode"] = "stored"
            return batchnorm_infer(x, p["gamma"], p["beta"], p["mean"], p["var"], eps)
        if k == "leaky_relu":
            return leaky_relu(x, self.attrs.get("alpha", DEFAULT_ALPHA))
        if k == "maxpool":
            return maxpool(x, int(self.attrs.get("pool", 2)))
        if k == "flatten":
            return flatten(x)
        return dense(x, p["weight"], p["bias"])

    # -- backward -----------------------------------------------------------

    def backward(self, cache: dict | None, grad_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Gradient w.r.t. the layer input and its trainable weights.

        Frozen layers still return ``grad_in`` but an empty parameter dict.
        """
        if not cache or "x" not in cache:
            raise UsageError(f"{self.name}: backward called without a forward cache")
        x = cache["x"]
        k, p = self.kind, self.params
        grads: dict[str, np.ndarray] = {}

        if k == "sepconv":
            s = int(self.attrs.get("stride", 2))
            mid = cache["mid"]
            n, oh, ow, cm = mid.shape
            g2 = grad_out.reshape(-1, grad_out.shape[-1])
            grads["pointwise"] = mid.reshape(-1, cm).T @ g2
            gmid = (g2 @ p["pointwise"].T).reshape(n, oh, ow, cm)
            gx, grads["depthwise"] = _depthwise_backward(x, p["depthwise"], s, gmid)
        elif k == "conv":
            c = x.shape[-1]
            g2 = grad_out.reshape(-1, grad_out.shape[-1])
            grads["kernel"] = x.reshape(-1, c).T @ g2
            gx = (g2 @ p["kernel"].T).reshape(x.shape)
        elif k == "batchnorm":
            axes = tuple(range(x.ndim - 1))
            if cache.get("mode") == "batch":
                xhat, inv = cache["xhat"], cache["inv"]
                grads["gamma"] = (grad_out * xhat).sum(axis=axes)
                grads["beta"] = grad_out.sum(axis=axes)
                gxhat = grad_out * p["gamma"]
                gx = inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
            else:
                eps = self.attrs.get("epsilon", DEFAULT_EPSILON)
                inv = 1.0 / np.sqrt(p["var"] + x.dtype.type(eps))
                grads["gamma"] = (grad_out * (x - p["mean"]) * inv).sum(axis=axes)
                grads["beta"] = grad_out.sum(axis=axes)
                gx = grad_out * (p["gamma"] * inv)
        elif k == "leaky_relu":
            alpha = x.dtype.type(self.attrs.get("alpha", DEFAULT_ALPHA))
            gx = np.where(x >= 0, grad_out, grad_out * alpha)
        elif k == "maxpool":
            gx = _maxpool_backward(x, int(self.attrs.get("pool", 2)), grad_out)
        elif k == "flatten":
            gx = grad_out.reshape(x.shape)
        else:
            grads["weight"] = x.T @ grad_out
            grads["bias"] = grad_out.sum(axis=0)
            gx = grad_out @ p["weight"].T

        if self.frozen:
            grads = {}
        return gx, grads

    def update_running_stats(self, cache: dict, momentum: float) -> None:
        """Fold batch statistics from a training forward into the stored ones."""
        if self.kind != "batchnorm" or self.frozen or cache.get("mode") != "batch":
            return
        p = self.params
        m = p["mean"].dtype.type(momentum)
        p["mean"] = (m * p["mean"] + (1 - m) * cache["batch_mean"]).astype(p["mean"].dtype)
        p["var"] = (m * p["var"] + (1 - m) * cache["batch_var"]).astype(p["var"].dtype)


def _depthwise_backward(
    x: np.ndarray, kernel: np.ndarray, stride: int, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    kh, kw, _, m = kernel.shape
    oh, pt, pb = same_padding(h, kh, stride)
    ow, pl, pr = same_padding(w, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    g = grad.reshape(n, oh, ow, c, m)
    gxp = np.zeros(xp.shape, dtype=np.result_type(x, grad))
    gk = np.zeros(kernel.shape, dtype=np.result_type(x, grad))
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * (oh - 1) + 1, stride)
            cols = slice(j, j + stride * (ow - 1) + 1, stride)
            xs = xp[:, rows, cols, :]
            gk[i, j] = (xs[..., None] * g).sum(axis=(0, 1, 2))
            gxp[:, rows, cols, :] += (g * kernel[i, j]).sum(axis=-1)
    return gxp[:, pt : pt + h, pl : pl + w, :], gk


def _maxpool_backward(x: np.ndarray, pool: int, grad: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    oh, ow = h // pool, w // pool
    win = x.reshape(n, oh, pool, ow, pool, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, pool * pool)
    # ties route the gradient to the first maximum
    arg = win.argmax(axis=-1)
    gwin = np.zeros(win.shape, dtype=grad.dtype)
    np.put_along_axis(gwin, arg[..., None], grad[..., None], axis=-1)
    return gwin.reshape(n, oh, ow, c, pool, pool).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape)


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def param_count(layer: Layer) -> int:
    """Number of stored weights. Batchnorm counts gamma, beta, mean and var."""
    return int(sum(a.size for a in layer.params.values()))


def mac_count(layer: Layer, in_shape: tuple[int, ...]) -> int:
    """Multiplies per sample for ``layer`` applied to an input of ``in_shape`` (HWC or flat).

    Pooling, activation, normalization and flatten are counted as free.
    """
    out = layer.output_shape(in_shape)
    if layer.kind == "sepconv":
        kh, kw, c, m = layer.params["depthwise"].shape
        oh, ow, oc = out
        return oh * ow * c * m * kh * kw + oh * ow * oc * c * m
    if layer.kind == "conv":
        oh, ow, oc = out
        return oh * ow * oc * in_shape[-1]
    if layer.kind == "dense":
        return int(layer.params["weight"].size)
    return 0


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def make_sepconv(
    name: str, in_c: int, filters: int, multiplier: int, rng: np.random.Generator, stride: int = 2, kernel: int = 3
) -> Layer:
    if filters % 4:
        raise ParameterError(f"{name}: filter count {filters} is not divisible by 4")
    return Layer(
        name,
        "sepconv",
        {"stride": stride, "kernel": kernel, "depth_mult": multiplier},
        {
            "depthwise": glorot_uniform((kernel, kernel, in_c, multiplier), rng),
            "pointwise": glorot_uniform((in_c * multiplier, filters), rng),
        },
    )


def make_conv1x1(name: str, in_c: int, filters: int, rng: np.random.Generator) -> Layer:
    if filters % 4:
        raise ParameterError(f"{name}: filter count {filters} is not divisible by 4")
    return Layer(name, "conv", {"stride": 1, "kernel": 1}, {"kernel": glorot_uniform((in_c, filters), rng)})


def make_batchnorm(name: str, channels: int, epsilon: float = DEFAULT_EPSILON) -> Layer:
    return Layer(
        name,
        "batchnorm",
        {"epsilon": epsilon},
        {
            "gamma": np.ones(channels, np.float32),
            "beta": np.zeros(channels, np.float32),
            "mean": np.zeros(channels, np.float32),
            "var": np.ones(channels, np.float32),
        },
    )


def make_leaky_relu(name: str, alpha: float = DEFAULT_ALPHA) -> Layer:
    return Layer(name, "leaky_relu", {"alpha": alpha})


def make_maxpool(name: str, pool: int = 2) -> Layer:
    return Layer(name, "maxpool", {"pool": pool, "stride": pool})


def make_flatten(name: str) -> Layer:
    return Layer(name, "flatten")


def make_dense(name: str, n_in: int, n_out: int, rng: np.random.Generator) -> Layer:
    return Layer(
        name,
        "dense",
        {},
        {"weight": glorot_uniform((n_in, n_out), rng), "bias": np.zeros(n_out, np.float32)},
    )
