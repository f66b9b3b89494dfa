"""Differentiable operations on :class:`Tensor`.

Layouts follow the usual conventions: images are ``(batch, channels, height,
width)``, features ``(batch, features)``, linear weights ``(out, in)`` and
convolution weights ``(out, in, kh, kw)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import LengthMismatch, ShapeMismatch
from .tensor import Tensor, as_tensor, record

PROB_CLAMP = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), back)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return record(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), back)


def reshape(x: Tensor, shape) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def total(x: Tensor) -> Tensor:
    return record(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeMismatch(f"linear expects 2D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(
            f"linear: input feature dimension {x.shape[1]} != weight in-dimension {weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation via im2col and one matrix product."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeMismatch(f"conv2d: input channels {C} != weight in-channels {Cw}")
    s, p = stride, padding
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < kh or Wp < kw:
        raise ShapeMismatch(f"conv2d: padded input height/width {Hp}x{Wp} smaller than kernel {kh}x{kw}")
    OH = (Hp - kh) // s + 1
    OW = (Wp - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :OH, :OW]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * OH * OW, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, OH, OW, O).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, OH, OW, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * (OH - 1) + 1 : s, j : j + s * (OW - 1) + 1 : s] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p : p + H, p : p + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, back)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state, training: bool) -> Tensor:
    """Per-channel batch normalisation over (batch, height, width).

    ``state`` carries ``running_mean``, ``running_var``, ``momentum`` and
    ``eps``; in training mode the running statistics are updated in place
    (unbiased variance, as in the common frameworks).
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"batchnorm2d expects 4D input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batchnorm2d: {C} channels but gamma/beta have shapes {gamma.shape}/{beta.shape}")
    eps = state.eps
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                n = x.shape[0] * x.shape[2] * x.shape[3]
                s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (gxhat - s1 / n - xhat * (s2 / n)) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return record(out.astype(x.dtype), (x, gamma, beta), back)


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects 4D input, got {x.shape}")
    stride = stride or kernel
    B, C, H, W = x.shape
    k, s, p = kernel, stride, padding
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < k or Wp < k:
        raise ShapeMismatch(f"maxpool2d: input height/width {H}x{W} smaller than kernel {k}")
    OH = (Hp - k) // s + 1
    OW = (Wp - k) // s + 1
    if p:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    else:
        xp = x.data
    fast = k == s and p == 0
    if fast:
        crop = xp[:, :, : OH * k, : OW * k]
        win = crop.reshape(B, C, OH, k, OW, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, OH, OW, k * k)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :OH, :OW]
        win = win.reshape(B, C, OH, OW, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros((B, C, OH, OW, k * k), dtype=x.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        if fast:
            gx = np.zeros((B, C, H, W), dtype=x.dtype)
            gx[:, :, : OH * k, : OW * k] = (
                gwin.reshape(B, C, OH, OW, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, OH * k, OW * k)
            )
            return (gx,)
        gwin = gwin.reshape(B, C, OH, OW, k, k)
        gxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + s * (OH - 1) + 1 : s, j : j + s * (OW - 1) + 1 : s] += gwin[..., i, j]
        return (gxp[:, :, p : p + H, p : p + W],)

    return record(np.ascontiguousarray(out), (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects 4D input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).astype(x.dtype),)

    return record(out, (x,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-p) in training."""
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random stream")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return record(x.data * keep, (x,), lambda g: (g * keep,))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeMismatch(f"concat along axis {axis}: shape {t.shape} incompatible with {ref}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return record(out, tensors, back)


def bce_l2_loss(p: Tensor, y, params=(), lam: float = 0.0) -> Tensor:
    """Mean binary cross-entropy plus ``lam`` times the summed squared weights.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; the clamp has zero
    gradient outside that range. ``params`` should hold only the tensors
    the penalty applies to.
    """
    y = np.asarray(y, dtype=p.dtype).reshape(-1)
    pv = p.data.reshape(-1)
    if pv.shape != y.shape:
        raise LengthMismatch(f"{pv.size} predictions but {y.size} labels")
    n = pv.size
    pc = np.clip(pv, PROB_CLAMP, 1 - PROB_CLAMP)
    bce = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    params = list(params)
    penalty = sum(float(np.sum(w.data.astype(np.float64) ** 2)) for w in params) if lam else 0.0
    value = np.asarray(bce + lam * penalty, dtype=p.dtype)
    inside = (pv >= PROB_CLAMP) & (pv <= 1 - PROB_CLAMP)

    def back(g):
        gp = np.where(inside, (pc - y) / (pc * (1 - pc)) / n, 0.0).astype(p.dtype) * g
        grads = [gp.reshape(p.shape)]
        grads += [(2 * lam * g) * w.data if lam else None for w in params]
        return tuple(grads)

    return record(value, (p, *params), back)


def bce_logits_l2_loss(z: Tensor, y, params=(), lam: float = 0.0) -> Tensor:
    """:func:`bce_l2_loss` evaluated on ``sigmoid(z)`` but computed from the logits.

    ``softplus(z) - y*z`` needs no clamp, so the gradient ``(sigmoid(z) - y) / n``
    stays nonzero for confidently wrong predictions.
    """
    y = np.asarray(y, dtype=z.dtype).reshape(-1)
    zv = z.data.reshape(-1)
    if zv.shape != y.shape:
        raise LengthMismatch(f"{zv.size} logits but {y.size} labels")
    n = zv.size
    bce = np.mean(np.maximum(zv, 0) - y * zv + np.log1p(np.exp(-np.abs(zv))))
    params = list(params)
    penalty = sum(float(np.sum(w.data.astype(np.float64) ** 2)) for w in params) if lam else 0.0
    value = np.asarray(bce + lam * penalty, dtype=z.dtype)

    def back(g):
        gz = ((_sigmoid(zv) - y) / n).astype(z.dtype) * g
        grads = [gz.reshape(z.shape)]
        grads += [(2 * lam * g) * w.data if lam else None for w in params]
        return tuple(grads)

    return record(value, (z, *params), back)
