"""Prediction reliability: Shannon entropy, logit confidence and the threshold filter."""
from __future__ import annotations

import math

import numpy as np

from .errors import DimMismatch, LabelOutOfRange
from .nn import softmax_np
from .tensor import Tensor, check_finite

ENTROPY_MODES = ("nat", "normalized")


def _logits_array(logits) -> np.ndarray:
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise DimMismatch(f"expected (N+1, H, W) logits with N >= 1, got {arr.shape}")
    check_finite(arr, "logits")
    return arr


def shannon_entropy(logits, mode: str = "nat") -> np.ndarray:
    """Per-pixel entropy (natural log) of the channel softmax.

    ``mode="normalized"`` divides by ln(K) so values lie in [0, 1].
    Results are clipped into the analytic range [0, ln K] to absorb rounding.
    """
    arr = _logits_array(logits)
    k = arr.shape[0]
    p = softmax_np(arr)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    h = np.clip(-plogp.sum(axis=0), 0.0, math.log(k))
    if mode == "normalized":
        return h / math.log(k)
    if mode != "nat":
        raise ValueError(f"unknown entropy mode {mode!r}")
    return h


def max_entropy(num_classes: int, mode: str = "nat") -> float:
    return 1.0 if mode == "normalized" else math.log(num_classes)


def reliability_filter(entropy: np.ndarray, alpha: float) -> np.ndarray:
    """Binary map: 1 where entropy <= alpha (ties count as reliable)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return (np.asarray(entropy) <= alpha).astype(np.uint8)


def logit_reliability(logits, y_hat: np.ndarray, alpha: float = 0.9) -> np.ndarray:
    """Reliable where the softmax probability of the predicted label is >= alpha."""
    arr = _logits_array(logits)
    y_hat = np.asarray(y_hat)
    if y_hat.shape != arr.shape[1:]:
        raise DimMismatch(f"labels {y_hat.shape} vs logits {arr.shape}")
    if y_hat.min() < 0 or y_hat.max() >= arr.shape[0]:
        raise LabelOutOfRange(f"labels must lie in [0, {arr.shape[0]})")
    p = softmax_np(arr)
    picked = np.take_along_axis(p, y_hat[None].astype(np.intp), axis=0)[0]
    return (picked >= alpha).astype(np.uint8)
