"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonFinite
from .tensor import ParamSet, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero coordinates from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    max_coords: int | None = 24,
    seed: int = 0,
    floor: float = 1e-6,
    per_param: dict | None = None,
) -> float:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    At most ``max_coords`` coordinates per parameter are probed, picked by a
    generator seeded with ``seed`` so the selection is reproducible. Returns the
    maximum relative error; when ``per_param`` is a dict it is filled with the
    per-parameter maxima.
    """
    params.zero_grad()
    out = f(params)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NonFinite("function value is not finite")
    out.backward()
    grads = params.grads()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_coords, replace=False))
        analytic = grads[name].reshape(-1)[idx]
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params).data)
            flat[i] = orig - h
            fm = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFinite(f"non-finite value while perturbing {name}")
            numeric[j] = (fp - fm) / (2.0 * h)
        err = float(relative_error(analytic, numeric, floor).max()) if len(idx) else 0.0
        if per_param is not None:
            per_param[name] = err
        worst = max(worst, err)
    params.zero_grad()
    return worst
