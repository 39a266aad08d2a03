"""Small differentiable-network substrate in plain numpy.

Every layer is a pair of pure functions: ``*_forward`` computes the output and
``*_backward`` maps an upstream gradient to gradients w.r.t. the input and the
layer parameters.  Arrays are float64 and laid out channels-last (H, W, C).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv3x3", "relu", "maxpool", "softmax", "bilinear-resize", "concat")

# parameter groups used by sgd_step
GROUP_PRETRAINED = 0
GROUP_NEW = 1


class ShapeError(ValueError):
    """Raised when an input does not match the layer it is fed to."""


class NonDeterministicLossError(RuntimeError):
    pass


@dataclass
class LayerParams:
    kind: str
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kind == "dense":
            if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
                raise ShapeError(
                    f"dense weights {self.weights.shape} / bias {self.bias.shape} inconsistent")
        elif self.kind == "conv3x3":
            if self.weights.ndim != 4 or self.weights.shape[:2] != (3, 3) \
                    or self.bias.shape != (self.weights.shape[3],):
                raise ShapeError(
                    f"conv3x3 weights {self.weights.shape} / bias {self.bias.shape} inconsistent")
        for key in ("stride", "window"):
            if key in self.hyper and self.hyper[key] < 1:
                raise ValueError(f"{key} must be >= 1")

    @property
    def group(self) -> int:
        return int(self.hyper.get("group", GROUP_NEW))


def glorot_uniform(shape, fan_in, fan_out, rng):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def he_uniform(shape, fan_in, rng):
    """Variance ``2 / fan_in``: keeps activation scale roughly constant through ReLU layers."""
    s = np.sqrt(6.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


def init_dense(n_in: int, n_out: int, rng, group: int = GROUP_NEW, relu=False) -> LayerParams:
    """Glorot init for a linear output layer, He init when a ReLU follows (``relu=True``)."""
    if relu:
        w = he_uniform((n_out, n_in), n_in, rng)
    else:
        w = glorot_uniform((n_out, n_in), n_in, n_out, rng)
    return LayerParams("dense", w, np.zeros(n_out), {"group": group})


def init_conv3x3(c_in: int, c_out: int, rng, group: int = GROUP_NEW) -> LayerParams:
    # every conv in this package feeds a ReLU
    w = he_uniform((3, 3, c_in, c_out), 9 * c_in, rng)
    return LayerParams("conv3x3", w, np.zeros(c_out), {"group": group})


# ---------------------------------------------------------------------------
# dense

def dense_forward(x, params: LayerParams):
    """``out[..., j] = sum_i w[j, i] * x[..., i] + b[j]``; accepts (n_in,) or (N, n_in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != params.weights.shape[1:]:
        raise ShapeError(f"dense expects width {params.weights.shape[1]}, got {x.shape}")
    return x @ params.weights.T + params.bias


def dense_backward(x, params: LayerParams, upstream):
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != params.weights.shape[0] or upstream.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"upstream gradient shape {upstream.shape} does not match layer output")
    gx = upstream @ params.weights
    x2 = x.reshape(-1, x.shape[-1])
    u2 = upstream.reshape(-1, upstream.shape[-1])
    return gx, u2.T @ x2, u2.sum(axis=0)


# ---------------------------------------------------------------------------
# conv3x3, same padding, stride 1

def _im2col3x3(x):
    h, w, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    # (H, W, C, 3, 3) -> (H, W, 3, 3, C) so columns match weights.reshape(9*C, C_out)
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, 9 * c)


def conv3x3_forward(x, params: LayerParams):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != params.weights.shape[2]:
        raise ShapeError(f"conv3x3 expects {params.weights.shape[2]} input channels, got {x.shape}")
    h, w, _ = x.shape
    cols = _im2col3x3(x)
    out = cols @ params.weights.reshape(-1, params.weights.shape[3]) + params.bias
    return out.reshape(h, w, -1)


def conv3x3_backward(x, params: LayerParams, upstream):
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    c_out = params.weights.shape[3]
    if upstream.shape != (h, w, c_out):
        raise ShapeError(f"upstream gradient shape {upstream.shape} != {(h, w, c_out)}")
    u = upstream.reshape(h * w, c_out)
    cols = _im2col3x3(x)
    gw = (cols.T @ u).reshape(params.weights.shape)
    gb = u.sum(axis=0)
    gcols = (u @ params.weights.reshape(-1, c_out).T).reshape(h, w, 3, 3, c)
    gxp = np.zeros((h + 2, w + 2, c))
    for di in range(3):
        for dj in range(3):
            gxp[di:di + h, dj:dj + w] += gcols[:, :, di, dj]
    return gxp[1:-1, 1:-1], gw, gb


# ---------------------------------------------------------------------------
# relu

def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


# ---------------------------------------------------------------------------
# max pooling

@dataclass
class PoolCache:
    in_shape: tuple
    rows: np.ndarray   # source row of each output cell's argmax
    cols: np.ndarray


def _pool_padding(n, window, stride):
    if stride == 1:
        if window % 2 == 0:
            # even sliding windows are anchored top-left
            return window // 2 - 1, window // 2
        return window // 2, window // 2
    if stride == window:
        n_out = -(-n // window)
        return 0, n_out * window - n
    raise ValueError("maxpool supports stride 1 (sliding) or stride == window (tiling)")


def maxpool_forward(x, window: int, stride: int):
    """Max pooling over (H, W) of an (H, W, C) array.

    ``stride == 1`` is the sliding mode with same-size output; ``stride ==
    window`` tiles the map, padding the bottom/right edge so the output is
    ``ceil(H / window)``.  Padding never wins the max.  Returns ``(out, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    h, w, c = x.shape
    (pt, pb), (pl, pr) = _pool_padding(h, window, stride), _pool_padding(w, window, stride)
    if stride > 1 and (window > h or window > w):
        raise ValueError(f"tiling window {window} larger than input {x.shape[:2]}")
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    flat = win.reshape(ho, wo, c, window * window)
    # first occurrence in row-major window order = lowest linear input index
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None, None] * stride + arg // window - pt
    cols = np.arange(wo)[None, :, None] * stride + arg % window - pl
    return out, PoolCache(x.shape, rows, cols)


def maxpool_backward(cache: PoolCache, upstream):
    h, w, c = cache.in_shape
    flat = (cache.rows * w + cache.cols) * c + np.arange(c)
    grad = np.bincount(flat.ravel(), weights=np.asarray(upstream, dtype=np.float64).ravel(), minlength=h * w * c)
    return grad.reshape(cache.in_shape)


def maxpool(x, window: int, stride: int):
    return maxpool_forward(x, window, stride)[0]


# ---------------------------------------------------------------------------
# softmax

def softmax(scores, axis=-1):
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(scores, axis=-1):
    s = np.asarray(scores, dtype=np.float64)
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_backward(out, upstream, axis=-1):
    """Gradient through softmax given its output."""
    return out * (upstream - (upstream * out).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(scores, labels):
    """Row-wise ``-log softmax(scores)[label]`` and its gradient w.r.t. scores."""
    scores = np.asarray(scores, dtype=np.float64)
    logp = log_softmax(scores)
    idx = np.arange(scores.shape[0])
    loss = -logp[idx, labels]
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return loss, grad


# ---------------------------------------------------------------------------
# bilinear resize (align corners)

def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of align-corners linear interpolation weights."""
    if n_in < 1 or n_out < 1:
        raise ValueError("resize extents must be >= 1")
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x, out_h: int, out_w: int):
    x = np.asarray(x, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target must be at least 1x1")
    h, w = x.shape[:2]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry, rx = interp_matrix(h, out_h), interp_matrix(w, out_w)
    rows = np.tensordot(ry, x, axes=(1, 0))                          # (out_h, w, ...)
    return np.moveaxis(np.tensordot(rx, rows, axes=(1, 1)), 0, 1)    # (out_h, out_w, ...)


def bilinear_resize_backward(upstream, in_h: int, in_w: int):
    out_h, out_w = upstream.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return upstream.copy()
    ry, rx = interp_matrix(in_h, out_h), interp_matrix(in_w, out_w)
    rows = np.tensordot(ry, upstream, axes=(0, 0))                   # (in_h, out_w, ...)
    return np.moveaxis(np.tensordot(rx, rows, axes=(0, 1)), 0, 1)    # (in_h, in_w, ...)


# ---------------------------------------------------------------------------
# channel concat

def concat_forward(xs):
    return np.concatenate(xs, axis=-1)


def concat_backward(upstream, widths):
    return np.split(upstream, np.cumsum(widths)[:-1], axis=-1)


# ---------------------------------------------------------------------------
# optimisation

class GradBuffer:
    """Accumulated gradients keyed by parameter-block name."""

    def __init__(self):
        self.grads: dict[str, list[np.ndarray]] = {}
        self.count = 0

    def add(self, name, gw, gb):
        if name in self.grads:
            self.grads[name][0] += gw
            self.grads[name][1] += gb
        else:
            self.grads[name] = [np.array(gw, dtype=np.float64), np.array(gb, dtype=np.float64)]

    def merge(self, other: "GradBuffer", scale=1.0):
        for name, (gw, gb) in other.grads.items():
            self.add(name, scale * gw, scale * gb)
        self.count += other.count

    def scale(self, factor):
        for g in self.grads.values():
            g[0] *= factor
            g[1] *= factor

    def __contains__(self, name):
        return name in self.grads

    def __getitem__(self, name):
        return self.grads[name]

    def keys(self):
        return self.grads.keys()


def sgd_step(params: dict, grads: GradBuffer, group_lr: dict, weight_decay: float = 0.0):
    """In-place ``w <- w - lr_group * (g + weight_decay * w)`` for every block in ``grads``.

    Weight decay applies to weights only, not biases.
    """
    for name, (gw, gb) in grads.grads.items():
        p = params[name]
        if p.group not in group_lr:
            raise KeyError(f"no learning rate for parameter group {p.group} ({name})")
        lr = group_lr[p.group]
        if lr <= 0:
            raise ValueError("learning rates must be positive")
        if gw.shape != p.weights.shape or gb.shape != p.bias.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        p.weights -= lr * (gw + weight_decay * p.weights)
        p.bias -= lr * gb


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_block: dict
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def grad_check(loss_fn, arrays: dict, epsilon=1e-5, tolerance=1e-5, max_per_block=40, rng=None, value_fn=None):
    """Compare analytic gradients with central finite differences.

    ``arrays`` maps block names to arrays that ``loss_fn`` reads (they are
    perturbed in place and restored).  ``loss_fn()`` returns ``(loss, grads)``
    with ``grads`` keyed like ``arrays``; a missing key means a zero gradient.  At most ``max_per_block`` entries of
    each block are sampled; the error of a block is the norm-wise relative
    error ``|a - n| / max(|a| + |n|, 1e-12)`` over its sampled entries.
    ``value_fn``, if given, returns the loss alone and is used for the
    perturbed evaluations.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    loss0, analytic = loss_fn()
    loss1, _ = loss_fn()
    if loss0 != loss1:
        raise NonDeterministicLossError(f"loss evaluated twice gave {loss0!r} and {loss1!r}")
    value_fn = (lambda: loss_fn()[0]) if value_fn is None else value_fn
    per_block = {}
    n_checked = 0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if flat.size == 0:
            continue
        idx = np.arange(flat.size)
        if flat.size > max_per_block:
            idx = np.sort(rng.choice(flat.size, max_per_block, replace=False))
        a = np.asarray(analytic.get(name, np.zeros(arr.shape)), dtype=np.float64).reshape(-1)[idx]
        n = np.empty(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + epsilon
            lp = value_fn()
            flat[i] = old - epsilon
            lm = value_fn()
            flat[i] = old
            n[k] = (lp - lm) / (2 * epsilon)
        denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
        per_block[name] = float(np.linalg.norm(a - n) / denom)
        n_checked += len(idx)
    worst = max(per_block.values()) if per_block else 0.0
    return GradCheckReport(worst, per_block, n_checked, tolerance)
