"""Toy backbone, object masking and the correlation heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadDims, DimMismatch, EmptyPool, UnknownObjectId
from .nn import concat_channels, conv2d, downsample_nearest, group_normalize
from .tensor import ParamSet, Tensor, as_tensor, mul, node, relu, reshape

if TYPE_CHECKING:
    from .pool import PatchPool

NORM_EPS = 1e-12
NO_MATCH = -1.0

# (name, in, out, stride, relu)
BACKBONE_LAYERS = (
    ("conv1", 3, 16, 2, True),
    ("conv2", 16, 32, 2, True),
    ("conv3", 32, 32, 1, True),
    ("conv4", 32, 32, 1, False),
)
BACKBONE_STRIDE = 4


@dataclass
class FeatureMap:
    tensor: Tensor
    stride: int = BACKBONE_STRIDE

    @property
    def hw(self) -> tuple[int, int]:
        return self.tensor.shape[1], self.tensor.shape[2]


@dataclass
class MaskedFeatures:
    fg: Tensor
    bg: Tensor
    source_mask: np.ndarray  # binary object map at feature stride


@dataclass
class SimilarityMap:
    tensor: Tensor
    raw_fg: np.ndarray
    raw_bg: np.ndarray | None = None


def frame_to_tensor(frame: np.ndarray) -> Tensor:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise BadDims(f"frames must be (3, H, W), got {frame.shape}")
    return Tensor(frame.astype(np.float64) / 255.0 - 0.5)


def extract_features(frame: np.ndarray, backbone: ParamSet, groups: int = 4) -> FeatureMap:
    """Run the shared 4-layer backbone; output has stride 4 relative to the frame."""
    x = frame_to_tensor(frame)
    _, h, w = x.shape
    if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
        raise BadDims(f"frame dims {h}x{w} not divisible by stride {BACKBONE_STRIDE}")
    for name, _, _, stride, act in BACKBONE_LAYERS:
        x = conv2d(x, backbone[f"{name}.weight"], stride=stride, pad=1)
        x = group_normalize(x, groups, backbone[f"{name}.gn.scale"], backbone[f"{name}.gn.shift"])
        if act:
            x = relu(x)
    return FeatureMap(x, BACKBONE_STRIDE)


def object_map(labels: np.ndarray, object_id: int, num_objects: int | None = None) -> np.ndarray:
    if object_id < 1 or (num_objects is not None and object_id > num_objects):
        raise UnknownObjectId(object_id)
    return (np.asarray(labels) == object_id).astype(np.float64)


def mask_features(f: FeatureMap, y: np.ndarray, object_id: int, num_objects: int | None = None) -> MaskedFeatures:
    """Split features into object-masked and background-masked parts.

    ``y`` is a label map at frame or feature resolution; frame-resolution maps
    are subsampled to the feature grid by nearest neighbour.
    """
    y = np.asarray(y)
    if y.shape != f.hw:
        y = downsample_nearest(y, f.stride)
        if y.shape != f.hw:
            raise BadDims(f"mask {y.shape} does not match feature grid {f.hw}")
    m = object_map(y, object_id, num_objects)
    return MaskedFeatures(mul(f.tensor, m), mul(f.tensor, 1.0 - m), m)


# ---------------------------------------------------------------- local window correlation


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(np.sum(x * x, axis=0) + NORM_EPS)
    return x / norm, norm


def _unit_backward(du: np.ndarray, u: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (du - u * np.sum(u * du, axis=0)) / norm


def _window_max_backward(g, ut, nt, us_pad, ns, best, empty, radius):
    c, h, w = ut.shape
    wp = w + 2 * radius
    gm = np.where(empty, 0.0, g)
    dy, dx = np.divmod(best, 2 * radius + 1)
    yy, xx = np.mgrid[0:h, 0:w]
    flat = ((yy + dy) * wp + (xx + dx)).ravel()
    us_flat = us_pad.reshape(c, -1)
    d_ut = us_flat[:, flat].reshape(c, h, w) * gm
    d_us_flat = np.zeros_like(us_flat)
    np.add.at(d_us_flat, (slice(None), flat), (ut * gm).reshape(c, -1))
    d_us_pad = d_us_flat.reshape(us_pad.shape)
    inner = (slice(None), slice(radius, radius + h), slice(radius, radius + w))
    return _unit_backward(d_ut, ut, nt), _unit_backward(d_us_pad[inner], us_pad[inner], ns)


def window_max_cosine(target: Tensor, source: Tensor, valid: np.ndarray, radius: int) -> Tensor:
    """raw[p] = max cosine(target[p], source[q]) over valid q within a (2r+1)^2 window.

    Pixels whose window holds no valid source pixel get the sentinel -1 and no
    gradient.
    """
    if target.shape != source.shape or target.shape[1:] != valid.shape:
        raise BadDims(f"correlation inputs {target.shape}, {source.shape}, {valid.shape}")
    if radius < 1:
        raise BadDims("window radius must be >= 1")
    _, h, w = target.shape
    ut, nt = _unit(target.data)
    us, ns = _unit(source.data)
    r = radius
    us_pad = np.pad(us, ((0, 0), (r, r), (r, r)))
    valid_pad = np.pad(np.asarray(valid, dtype=bool), r)
    size = 2 * r + 1
    # (C, h, w, size, size) window view; the channel sum runs in index order
    win = sliding_window_view(us_pad, (size, size), axis=(1, 2))
    sims = np.sum(ut[:, :, :, None, None] * win, axis=0).reshape(h, w, size * size)
    vwin = sliding_window_view(valid_pad, (size, size)).reshape(h, w, size * size)
    sims = np.where(vwin, sims, -np.inf)
    best = np.argmax(sims, axis=2)
    raw = np.take_along_axis(sims, best[:, :, None], axis=2)[:, :, 0]
    empty = ~np.isfinite(raw)
    raw = np.where(empty, NO_MATCH, raw)
    return node(
        raw,
        (target, source),
        lambda g: _window_max_backward(g, ut, nt, us_pad, ns, best, empty, r),
    )


def _project(maps: list, proj: ParamSet) -> Tensor:
    chans = [reshape(m, (1,) + m.shape) if isinstance(m, Tensor) else as_tensor(m[None]) for m in maps]
    return conv2d(concat_channels(chans), proj["weight"], proj["bias"])


def local_correlation(
    f_t: FeatureMap,
    prev: MaskedFeatures,
    prev_mask: np.ndarray,
    window_radius: int,
    proj: ParamSet,
) -> SimilarityMap:
    """Foreground/background window matching against the previous frame, projected to C_s channels."""
    prev_mask = np.asarray(prev_mask, dtype=np.float64)
    if prev_mask.shape != f_t.hw:
        raise BadDims(f"previous mask {prev_mask.shape} vs features {f_t.hw}")
    fg_valid = prev_mask > 0
    raw_fg = window_max_cosine(f_t.tensor, prev.fg, fg_valid, window_radius)
    raw_bg = window_max_cosine(f_t.tensor, prev.bg, ~fg_valid, window_radius)
    out = _project([raw_fg, raw_bg, prev_mask], proj)
    return SimilarityMap(out, raw_fg.data, raw_bg.data)


# ---------------------------------------------------------------- pool correlation


def pool_correlation(pool: "PatchPool", f_t: FeatureMap) -> np.ndarray:
    """Per-pixel max cosine similarity against every valid pixel of every pool entry.

    Inference-time evidence only: the result is a plain array and carries no
    gradient.
    """
    if not pool.entries:
        raise EmptyPool("pool_correlation on an empty pool")
    c, h, w = f_t.tensor.shape
    ut, _ = _unit(f_t.tensor.data.reshape(c, h * w))
    best = np.full(h * w, -np.inf)
    for entry in pool.entries:
        feats = entry.features.data if isinstance(entry.features, Tensor) else entry.features
        if feats.shape[0] != c:
            raise DimMismatch("pool entry channel count differs from target features")
        valid = np.asarray(entry.validity) > 0
        if not valid.any():
            continue
        ue, _ = _unit(feats[:, valid])
        best = np.maximum(best, (ut.T @ ue).max(axis=1))
    best = np.where(np.isfinite(best), best, NO_MATCH)
    return np.clip(best, -1.0, 1.0).reshape(h, w)


def project_pool_similarity(raw: np.ndarray, prev_mask: np.ndarray, proj: ParamSet) -> SimilarityMap:
    return SimilarityMap(_project([raw, np.asarray(prev_mask, dtype=np.float64)], proj), raw)
