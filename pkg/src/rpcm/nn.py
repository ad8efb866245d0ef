"""Differentiable layer operations on channels-first (C, H, W) tensors."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimMismatch, EmptyMask, LabelOutOfRange
from .tensor import Tensor, as_tensor, check_finite, mul, node, reshape, sigmoid

# ---------------------------------------------------------------- convolution


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cin, ho, wo = win.shape[:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    return cols, ho, wo


def _conv2d_backward(g, cols, kd, xshape, stride, pad, has_bias):
    cout, cin, kh, kw = kd.shape
    _, ho, wo = g.shape
    g2 = g.reshape(cout, ho * wo)
    dk = (g2 @ cols.T).reshape(kd.shape)
    dcols = kd.reshape(cout, -1).T @ g2
    c, h, w = xshape
    if kh == 1 and kw == 1 and stride == 1 and not pad:
        return dcols.reshape(xshape), dk, (g2.sum(axis=1) if has_bias else None)
    dcols = dcols.reshape(cin, kh, kw, ho, wo)
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dx = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
    db = g2.sum(axis=1) if has_bias else None
    return dx, dk, db


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a (Cin, H, W) input with a (Cout, Cin, kh, kw) kernel."""
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise DimMismatch(f"conv2d expects (C,H,W) input and 4-d kernel, got {x.shape}, {k.shape}")
    cout, cin, kh, kw = k.shape
    if x.shape[0] != cin:
        raise DimMismatch(f"conv2d input has {x.shape[0]} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0 or stride < 1 or pad < 0:
        raise DimMismatch("conv2d needs odd kernel dims, stride >= 1, pad >= 0")
    check_finite(x.data, "conv2d input")
    check_finite(k.data, "conv2d kernel")
    xd = x.data
    if pad:
        c, h, w = xd.shape
        xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
        xp[:, pad:pad + h, pad:pad + w] = xd
        xd = xp
    if kh == 1 and kw == 1 and stride == 1:
        ho, wo = xd.shape[1:]
        cols = xd.reshape(cin, ho * wo)
    else:
        cols, ho, wo = _im2col(xd, kh, kw, stride)
    kd = k.data
    out = (kd.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    parents: tuple[Tensor, ...] = (x, k)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimMismatch(f"conv2d bias must have shape ({cout},)")
        out = out + bias.data[:, None, None]
        parents = (x, k, bias)
    xshape, has_bias = x.shape, bias is not None
    return node(out, parents, lambda g: _conv2d_backward(g, cols, kd, xshape, stride, pad, has_bias))


# ---------------------------------------------------------------- dense


def _fc_backward(g, xd, wd):
    return wd.T @ g, np.outer(g, xd), g


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = W x + b for a vector x."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise DimMismatch(f"fully_connected: x{x.shape}, W{w.shape}, b{b.shape}")
    xd, wd = x.data, w.data
    return node(wd @ xd + b.data, (x, w, b), lambda g: _fc_backward(g, xd, wd))


# ---------------------------------------------------------------- pooling


def _wsum_backward(g, m):
    return (g[:, None, None] * m[None],)


def weighted_sum_hw(f: Tensor, m: np.ndarray) -> Tensor:
    """out_c = sum_hw f[c,h,w] * m[h,w] with a constant weight map m."""
    m = np.asarray(m, dtype=np.float64)
    if f.data.ndim != 3 or f.shape[1:] != m.shape:
        raise DimMismatch(f"weighted_sum_hw: features {f.shape}, map {m.shape}")
    out = np.tensordot(f.data, m, axes=([1, 2], [0, 1]))
    return node(out, (f,), lambda g: _wsum_backward(g, m))


def masked_gap(f: Tensor, m: np.ndarray | None = None) -> Tensor:
    """Global average pooling restricted by a [0,1] weight map (plain GAP when m is None)."""
    if m is None:
        m = np.ones(f.shape[1:])
    m = np.asarray(m, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise EmptyMask("masked_gap over an empty mask")
    return mul(weighted_sum_hw(f, m), 1.0 / total)


# ---------------------------------------------------------------- softmax / loss


def _softmax_backward(g, y):
    return (y * (g - (g * y).sum(axis=0, keepdims=True)),)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of a (K, H, W) tensor."""
    if logits.data.ndim != 3 or logits.shape[0] < 2:
        raise DimMismatch(f"softmax_channels needs (K>=2, H, W), got {logits.shape}")
    check_finite(logits.data, "logits")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)
    return node(y, (logits,), lambda g: _softmax_backward(g, y))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _ce_backward(g, p, onehot, npix):
    return (g * (p - onehot) / npix,)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target]."""
    target = np.asarray(target)
    k = logits.shape[0]
    if logits.data.ndim != 3 or target.shape != logits.shape[1:]:
        raise DimMismatch(f"cross_entropy: logits {logits.shape}, target {target.shape}")
    if target.min() < 0 or target.max() >= k:
        raise LabelOutOfRange(f"target labels must lie in [0, {k})")
    check_finite(logits.data, "logits")
    x = logits.data
    mx = x.max(axis=0, keepdims=True)
    lse = np.log(np.exp(x - mx).sum(axis=0)) + mx[0]
    picked = np.take_along_axis(x, target[None].astype(np.intp), axis=0)[0]
    npix = target.size
    loss = (lse - picked).sum() / npix
    p = np.exp(x - lse[None])
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, target[None].astype(np.intp), 1.0, axis=0)
    return node(np.asarray(loss), (logits,), lambda g: _ce_backward(g, p, onehot, npix))


# ---------------------------------------------------------------- normalization / gating


def _gn_backward(g, xhat, inv_std, scale, groups):
    c, h, w = g.shape
    dscale = (g * xhat).sum(axis=(1, 2))
    dshift = g.sum(axis=(1, 2))
    dxhat = (g * scale[:, None, None]).reshape(groups, -1)
    xh = xhat.reshape(groups, -1)
    dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True) - xh * (dxhat * xh).mean(axis=1, keepdims=True))
    return dx.reshape(c, h, w), dscale, dshift


def group_normalize(x: Tensor, groups: int, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization with per-channel affine scale and shift."""
    c = x.shape[0]
    if x.data.ndim != 3 or groups < 1 or c % groups:
        raise DimMismatch(f"group_normalize: {c} channels not divisible into {groups} groups")
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimMismatch("group_normalize: scale/shift must be per-channel")
    xg = x.data.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    sd = scale.data
    out = xhat * sd[:, None, None] + shift.data[:, None, None]
    return node(out, (x, scale, shift), lambda g: _gn_backward(g, xhat, inv_std, sd, groups))


def channel_gate(x: Tensor, w: Tensor, head) -> Tensor:
    """Scale each channel of x by sigmoid(FC(w)); ``head`` holds ``weight`` and ``bias``."""
    gate = sigmoid(fully_connected(w, head["weight"], head["bias"]))
    if gate.shape[0] != x.shape[0]:
        raise DimMismatch(f"gate head yields {gate.shape[0]} channels for a {x.shape[0]}-channel input")
    return mul(x, reshape(gate, (x.shape[0], 1, 1)))


# ---------------------------------------------------------------- channel plumbing


def _concat_backward(g, splits):
    return tuple(g[a:b] for a, b in splits)


def concat_channels(xs: list[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimMismatch("concat_channels of an empty list")
    hw = xs[0].shape[1:]
    if any(x.data.ndim != 3 or x.shape[1:] != hw for x in xs):
        raise DimMismatch("concat_channels needs equal spatial dims")
    splits, start = [], 0
    for x in xs:
        splits.append((start, start + x.shape[0]))
        start += x.shape[0]
    out = np.concatenate([x.data for x in xs], axis=0)
    return node(out, xs, lambda g: _concat_backward(g, splits))


def _slice_backward(g, shape, start, stop):
    full = np.zeros(shape)
    full[start:stop] = g
    return (full,)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape
    return node(x.data[start:stop], (x,), lambda g: _slice_backward(g, shape, start, stop))


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=None)
def _bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    a = np.zeros((n_out, n_in))
    a[np.arange(n_out), lo] += 1.0 - frac
    a[np.arange(n_out), hi] += frac
    a.flags.writeable = False
    return a


def _upsample_backward(g, ah, aw):
    return (ah.T @ g @ aw,)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel centres, edge clamped)."""
    if factor == 1:
        return x
    _, h, w = x.shape
    ah, aw = _bilinear_matrix(h, factor), _bilinear_matrix(w, factor)
    out = ah @ x.data @ aw.T
    return node(out, (x,), lambda g: _upsample_backward(g, ah, aw))


def downsample_nearest(labels: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour subsampling of a label map (samples each cell's centre pixel)."""
    off = stride // 2
    return np.ascontiguousarray(labels[off::stride, off::stride])

