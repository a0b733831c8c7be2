"""Differentiable primitives over :class:`~cassnat.tensor.Tensor`.

Each op computes its forward value with numpy and hands a closure producing
operand gradients to :func:`~cassnat.tensor.make_output`. Broadcasting is
numpy's; gradients are summed back to the operand shape.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, MaskError, ParameterError
from .tensor import Tensor, as_tensor, make_output


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_output(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_output(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("mul", a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return make_output("scale", x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_output("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = x.data * s
    return make_output("swish", out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Split ``x`` in half along ``axis`` into (a, b) and return a * sigmoid(b)."""
    n = x.shape[axis]
    if n % 2:
        raise DimensionError(f"glu needs an even extent on axis {axis}, got {n}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return make_output("glu", a * s, (x,), bw)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_output("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_output("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def index(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_output("index", x.data[idx], (x,), bw)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return make_output(
        "concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape (d_in, d_out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[1])

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("linear", out, inputs, bw)


# ---------------------------------------------------------------- normalization

def _check_mask(mask: np.ndarray, shape) -> np.ndarray:
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    ok = m.any(axis=-1)
    if not ok.all():
        bad = tuple(int(i) for i in np.argwhere(~ok)[0])
        raise MaskError(f"fully masked query row at index {bad}")
    return m


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get weight 0."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    z = x.data
    if mask is not None:
        m = _check_mask(mask, z.shape)
        z = np.where(m, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return make_output(
        "softmax", y, (x,),
        lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
    )


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("log_softmax needs a non-empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return make_output(
        "log_softmax", y, (x,),
        lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),),
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        gx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_output("layer_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- lookups

def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding index out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return make_output("embedding", table.data[idx], (table,), bw)


def gather_lastdim(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[..., i, j] = x[..., i, idx[i, j]]`` for a 2-D integer ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    nq, nk = idx.shape
    m = x.shape[-1]
    if x.shape[-2] != nq:
        raise DimensionError(f"gather rows {x.shape[-2]} vs index rows {nq}")
    onehot = np.zeros((nq, m, nk), dtype=x.dtype)
    onehot[np.arange(nq)[:, None], idx, np.arange(nk)[None, :]] = 1.0
    out = np.matmul(x.data[..., :, None, :], onehot)[..., 0, :]

    def bw(g):
        return (np.matmul(g[..., :, None, :], np.swapaxes(onehot, -1, -2))[..., 0, :],)

    return make_output("gather", out, (x,), bw)


# ---------------------------------------------------------------- convolutions

def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel convolution over time with symmetric zero padding.

    ``x`` is (B, T, C), ``w`` is (K, C) with K odd.
    """
    k = w.shape[0]
    if k % 2 == 0:
        raise ParameterError(f"depthwise kernel width must be odd, got {k}")
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"depthwise channels {x.shape[-1]} vs kernel {w.shape}")
    t = x.shape[-2]
    pad = (k - 1) // 2
    xp = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)])
    out = np.zeros_like(x.data)
    for i in range(k):
        out += xp[..., i:i + t, :] * w.data[i]
    if b is not None:
        out = out + b.data

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        lead = tuple(range(g.ndim - 1))
        for i in range(k):
            gxp[..., i:i + t, :] += g * w.data[i]
            gw[i] = (xp[..., i:i + t, :] * g).sum(axis=lead)
        gx = gxp[..., pad:pad + t, :]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=lead)

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("depthwise_conv1d", out, inputs, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 2-D convolution.

    ``x`` is (B, H, W, C_in) and ``w`` is (kh, kw, C_in, C_out).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise DimensionError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    kh, kw, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d input {x.shape} too small for kernel {w.shape[:2]}")
    xp = np.pad(x.data, [(0, 0), (padding, padding), (padding, padding), (0, 0)])
    cols = np.empty((bsz, ho, wo, kh, kw, cin), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols2 = cols.reshape(-1, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2).reshape(bsz, ho, wo, cout)
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(bsz, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("conv2d", out, inputs, bw)


# ---------------------------------------------------------------- regularization

def dropout_generator(seed: int, step: int, layer_id: int) -> np.random.Generator:
    """Counter-based stream keyed on (seed, step, layer); reproducible across resumes."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step, layer_id])))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_output("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- misc

def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed sine/cosine position table of shape (n, d) for positions 1..n."""
    pos = np.arange(1, n + 1, dtype=np.float64)[:, None]
    i = np.arange(d // 2 + d % 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)[:, : (d + 1) // 2]
    table[:, 1::2] = np.cos(angle)[:, : d // 2]
    return table


def inv_sqrt(d: int) -> float:
    return 1.0 / math.sqrt(d)
