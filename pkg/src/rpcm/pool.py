"""Reliable object patch pool and the object proxies that condition the modulators."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadTimestamp, DimMismatch, EmptyPool
from .features import FeatureMap
from .nn import masked_gap, weighted_sum_hw
from .tensor import Tensor, add, as_tensor, mul

WC_MODES = ("weighted_mean", "literal_average")


@dataclass
class PoolEntry:
    features: Tensor | np.ndarray  # f * y * r, zero where validity is zero
    validity: np.ndarray  # y * r in {0, 1}
    frame_index: int

    @property
    def valid_pixels(self) -> int:
        return int(np.asarray(self.validity).sum())


@dataclass
class PatchPool:
    tau: int = 5
    capacity: int | None = None
    entries: list[PoolEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.entries)

    def summary(self) -> dict:
        return {
            "tau": self.tau,
            "capacity": self.capacity,
            "entries": [{"frame_index": e.frame_index, "valid_pixels": e.valid_pixels} for e in self.entries],
        }


@dataclass
class ObjectProxy:
    vector: Tensor
    kind: str  # "propagation" | "correction"


def should_update(t: int, tau: int) -> bool:
    if t < 2:
        raise BadTimestamp(f"pool updates start at t=2, got t={t}")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return (t - 2) % tau == 0


def make_entry(f_prev: FeatureMap | Tensor | np.ndarray, y_prev: np.ndarray, r_prev: np.ndarray, frame_index: int) -> PoolEntry:
    feats = f_prev.tensor if isinstance(f_prev, FeatureMap) else f_prev
    arr = feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)
    validity = (np.asarray(y_prev) > 0).astype(np.float64) * (np.asarray(r_prev) > 0)
    if arr.shape[1:] != validity.shape:
        raise DimMismatch(f"features {arr.shape} vs validity {validity.shape}")
    return PoolEntry(arr * validity, validity, frame_index)


def update_pool(
    pool: PatchPool,
    f_prev: FeatureMap | Tensor | np.ndarray,
    y_prev: np.ndarray,
    r_prev: np.ndarray,
    t: int,
) -> PatchPool:
    """Return the pool after the update check at timestamp t (1-based frames).

    ``y_prev`` is the binary object map of frame t-1 at feature resolution and
    ``r_prev`` its reliability map; at t=2 callers pass an all-ones map.
    """
    if not should_update(t, pool.tau):
        return pool
    entry = make_entry(f_prev, y_prev, r_prev, t - 1)
    if entry.valid_pixels == 0:
        return pool
    entries = list(pool.entries) + [entry]
    if pool.capacity is not None and len(entries) > pool.capacity:
        # the first entry stays: it carries the reference frame
        del entries[1 if len(entries) > 1 else 0]
    return PatchPool(pool.tau, pool.capacity, entries)


def propagation_proxy(f_prev: FeatureMap, y_prev: np.ndarray) -> ObjectProxy:
    """Masked GAP of the previous frame; plain GAP when the object has vanished."""
    m = (np.asarray(y_prev) > 0).astype(np.float64)
    vec = masked_gap(f_prev.tensor, m if m.any() else None)
    return ObjectProxy(vec, "propagation")


def correction_proxy(pool: PatchPool, mode: str = "weighted_mean") -> ObjectProxy:
    """Aggregate the pool into one channel vector.

    ``weighted_mean`` divides the summed features by the total number of valid
    pixels over all entries; ``literal_average`` averages the entry maps and
    then applies plain GAP over the whole grid.
    """
    if not pool.entries:
        raise EmptyPool("correction_proxy on an empty pool")
    total = None
    for e in pool.entries:
        feats = as_tensor(e.features)
        s = weighted_sum_hw(feats, np.ones(feats.shape[1:])) if mode == "literal_average" else weighted_sum_hw(feats, e.validity)
        total = s if total is None else add(total, s)
    if mode == "weighted_mean":
        count = float(sum(np.asarray(e.validity).sum() for e in pool.entries))
    elif mode == "literal_average":
        h, w = np.asarray(pool.entries[0].validity).shape
        count = float(len(pool.entries) * h * w)
    else:
        raise ValueError(f"unknown w_c mode {mode!r}")
    if count <= 0:
        raise EmptyPool("pool holds no valid pixels")
    return ObjectProxy(mul(total, 1.0 / count), "correction")
