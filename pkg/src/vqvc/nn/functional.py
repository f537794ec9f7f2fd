"""Differentiable ops over `Tensor`s.

Layout convention for sequences is (..., channels, time); leading axes are
batch axes and broadcast through matmuls.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import ACCUM_DTYPE, Tensor, as_tensor


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _const(x, like: np.ndarray):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul_accum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b with float64 accumulation, result in the storage dtype of `a`."""
    out_dtype = np.result_type(a.dtype, b.dtype)
    if out_dtype == ACCUM_DTYPE:
        return np.matmul(a, b)
    return np.matmul(a, b, dtype=ACCUM_DTYPE).astype(out_dtype)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a.data)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b.data)
    b = _const(b, a.data)
    sa, sb = a.shape, b.shape
    return Tensor(a.data - b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a.data)
    ad, bd = a.data, b.data
    return Tensor(ad * bd, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], parents=(a,), backward=back)


def time_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """a[..., start:stop] with a cheap (non-scatter) backward."""
    shape, dtype = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        out[..., start:stop] = g
        return (out,)

    return Tensor(a.data[..., start:stop], parents=(a,), backward=back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), parents=(a,), backward=lambda g: (g.reshape(old),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors),
                  backward=lambda g: tuple(np.split(g, cuts, axis=axis)))


def total_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return Tensor(np.asarray(a.data.sum(dtype=ACCUM_DTYPE), dtype=dtype), parents=(a,),
                  backward=lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean(a: Tensor) -> Tensor:
    return mul(total_sum(a), 1.0 / a.data.size)


# -- activations --------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0).astype(a.dtype), parents=(a,), backward=lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor(s, parents=(a,), backward=lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor(t, parents=(a,), backward=lambda g: (g * (1 - t * t),))


def gated(a: Tensor, b: Tensor) -> Tensor:
    """tanh(a) * sigmoid(b), fused."""
    if a.shape != b.shape:
        raise ShapeError(f"gated unit needs equal shapes, got {a.shape} and {b.shape}")
    t = np.tanh(a.data)
    s = _sigmoid(b.data)
    return Tensor(t * s, parents=(a, b),
                  backward=lambda g: (g * s * (1 - t * t), g * t * s * (1 - s)))


# -- linear maps --------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the channel axis applied at every time index.

    `x` is (..., D_in, T) or a plain (D_in,) vector; `w` is (D_out, D_in).
    """
    x = as_tensor(x)
    vec = x.ndim == 1
    xd = x.data[:, None] if vec else x.data
    if w.shape[1] != xd.shape[-2]:
        raise ShapeError(f"dense: weight {w.shape} does not match input channels {xd.shape[-2]}")
    y = matmul_accum(w.data, xd)
    if b is not None:
        y = y + b.data[:, None]
    wd = w.data
    batch_axes = tuple(range(xd.ndim - 2))

    def back(g):
        g2 = g[:, None] if vec else g
        gx = matmul_accum(wd.T, g2)
        gw = matmul_accum(g2, np.swapaxes(xd, -1, -2))
        if batch_axes:
            gw = gw.sum(axis=batch_axes)
        gb = g2.sum(axis=batch_axes + (g2.ndim - 1,), dtype=ACCUM_DTYPE).astype(g.dtype)
        return (gx[:, 0] if vec else gx, gw, gb if b is not None else None)

    parents = (x, w) + ((b,) if b is not None else (Tensor(np.zeros(0)),))
    return Tensor(y[:, 0] if vec else y, parents=parents, backward=back)


def conv_output_length(t: int, k: int, stride: int, dilation: int, padding: str) -> int:
    if padding == "same":
        return -(-t // stride)
    if padding == "causal":
        return t
    if padding == "valid":
        return max(0, (t - dilation * (k - 1) - 1) // stride + 1)
    raise ConfigError(f"unknown padding mode {padding!r}")


def conv_padding(t: int, k: int, stride: int, dilation: int, padding: str) -> tuple[int, int]:
    """(left, right) zero padding; for 'same' the odd extra zero goes right."""
    if padding == "causal":
        return dilation * (k - 1), 0
    if padding == "valid":
        return 0, 0
    t_out = conv_output_length(t, k, stride, dilation, padding)
    total = max((t_out - 1) * stride + dilation * (k - 1) + 1 - t, 0)
    return total // 2, total - total // 2


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """1-D convolution (cross-correlation).

    x: (..., C_in, T); w: (C_out, C_in, K); y[o, t] = b[o] +
    sum_{i,k} x[i, stride*t + dilation*k - pad_left] * w[o, i, k].
    """
    x = as_tensor(x)
    c_out, c_in, k = w.shape
    if k < 1 or stride < 1 or dilation < 1:
        raise ConfigError("kernel, stride and dilation must be >= 1")
    if padding == "causal" and stride != 1:
        raise ConfigError("causal convolution requires stride 1")
    if x.ndim < 2 or x.shape[-2] != c_in:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {w.shape}")
    t = x.shape[-1]
    t_out = conv_output_length(t, k, stride, dilation, padding)
    left, right = conv_padding(t, k, stride, dilation, padding)
    xd = x.data
    lead = xd.shape[:-2]
    xp = np.zeros(lead + (c_in, t + left + right), dtype=xd.dtype)
    xp[..., left:left + t] = xd
    span = stride * (t_out - 1) + 1
    # cols[..., i, k, t] = xp[..., i, stride*t + dilation*k]
    cols = np.stack([xp[..., j * dilation:j * dilation + span:stride] for j in range(k)], axis=-2)
    cols = cols.reshape(lead + (c_in * k, t_out))
    w2 = w.data.reshape(c_out, c_in * k)
    y = matmul_accum(w2, cols)
    if b is not None:
        y = y + b.data[:, None]
    batch_axes = tuple(range(len(lead)))

    def back(g):
        gw = matmul_accum(g, np.swapaxes(cols, -1, -2))
        if batch_axes:
            gw = gw.sum(axis=batch_axes)
        gcols = matmul_accum(w2.T, g).reshape(lead + (c_in, k, t_out))
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for j in range(k):
            gxp[..., j * dilation:j * dilation + span:stride] += gcols[..., j, :]
        gb = None
        if b is not None:
            gb = g.sum(axis=batch_axes + (g.ndim - 1,), dtype=ACCUM_DTYPE).astype(g.dtype)
        return gxp[..., left:left + t], gw.reshape(w.shape), gb

    parents = (x, w) + ((b,) if b is not None else (Tensor(np.zeros(0)),))
    return Tensor(y, parents=parents, backward=back)


def embedding(table: Tensor, idx) -> Tensor:
    """Rows of `table` (V, R) at integer `idx` (..., T), laid out as (..., R, T)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")
    out = np.moveaxis(table.data[idx], -1, -2)
    shape, dtype = table.shape, table.dtype

    def back(g):
        gt = np.zeros(shape, dtype=ACCUM_DTYPE)
        np.add.at(gt, idx.reshape(-1), np.moveaxis(g, -2, -1).reshape(-1, shape[1]))
        return (gt.astype(dtype),)

    return Tensor(np.ascontiguousarray(out), parents=(table,), backward=back)


def upsample_repeat(x: Tensor, factor: int, target_len: int) -> Tensor:
    """Nearest-neighbour upsampling along time: frame n covers [n*factor, (n+1)*factor)."""
    n = x.shape[-1]
    if factor < 1:
        raise ConfigError("upsample factor must be >= 1")
    if target_len > n * factor:
        raise ShapeError(f"target length {target_len} exceeds {n} frames x factor {factor}")
    src = np.arange(target_len) // factor
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=ACCUM_DTYPE)
        full = n * factor
        gp = np.zeros(shape[:-1] + (full,), dtype=ACCUM_DTYPE)
        gp[..., :target_len] = g
        out[...] = gp.reshape(shape[:-1] + (n, factor)).sum(-1)
        return (out.astype(dtype),)

    return Tensor(x.data[..., src], parents=(x,), backward=back)


# -- losses / estimators ------------------------------------------------------

def log_softmax(logits: np.ndarray, axis: int = -2) -> np.ndarray:
    z = logits.astype(ACCUM_DTYPE)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_xent_np(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical NLL (nats) over positions and its gradient.

    logits: (..., V, T); targets: (..., T) integers in [0, V).
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-2]
    if targets.shape != logits.shape[:-2] + logits.shape[-1:]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"target level out of range [0, {v})")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None, :], axis=-2)
    n = targets.size
    loss = -picked.sum() / n
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None, :], np.take_along_axis(grad, targets[..., None, :], -2) - 1.0, -2)
    return float(loss), (grad / n).astype(logits.dtype)


def softmax_xent(logits: Tensor, targets) -> Tensor:
    loss, grad = softmax_xent_np(logits.data, targets)
    return Tensor(np.asarray(loss, dtype=logits.dtype), parents=(logits,),
                  backward=lambda g: (grad * g,))


def straight_through(latents: Tensor, quantized: np.ndarray) -> Tensor:
    """Forward value is exactly `quantized`; the gradient passes to `latents` unchanged."""
    q = np.asarray(quantized, dtype=latents.dtype)
    if q.shape != latents.shape:
        raise ShapeError(f"straight-through shapes differ: {latents.shape} vs {q.shape}")
    return Tensor(q.copy(), parents=(latents,), backward=lambda g: (g,))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    lim = math.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def xavier_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)
