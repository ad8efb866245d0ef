"""Parameter layout and deterministic initialization for the whole network."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .features import BACKBONE_LAYERS, BACKBONE_STRIDE
from .modulation import STAGES, parse_scheme, scheme_kinds
from .tensor import ParamSet, Tensor

HEAD_SCALE = 0.01


def derive_seed(seed: int, *names) -> int:
    """Named substream seed: sha256 over the root seed and the name path."""
    h = hashlib.sha256(str(int(seed)).encode())
    for n in names:
        h.update(b"/" + str(n).encode())
    return int.from_bytes(h.digest()[:8], "little")


def substream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


@dataclass(frozen=True)
class ModelDims:
    feat_channels: int = 32
    sim_channels: int = 16
    embed_channels: int = 32
    window_radius: int = 2
    stride: int = BACKBONE_STRIDE


def _shapes(scheme: str, dims: ModelDims) -> dict[str, tuple[tuple[int, ...], str]]:
    """name -> (shape, init kind) where kind is weight | head | zeros | ones."""
    c_f, c_s, c_e = dims.feat_channels, dims.sim_channels, dims.embed_channels
    out: dict[str, tuple[tuple[int, ...], str]] = {}
    for name, cin, cout, _, _ in BACKBONE_LAYERS:
        out[f"backbone.{name}.weight"] = ((cout, cin, 3, 3), "weight")
        out[f"backbone.{name}.gn.scale"] = ((cout,), "ones")
        out[f"backbone.{name}.gn.shift"] = ((cout,), "zeros")
    if BACKBONE_LAYERS[-1][2] != c_f:
        raise ValueError("feat_channels must match the backbone output width")
    out["corr.local.weight"] = ((c_s, 3, 1, 1), "weight")
    out["corr.local.bias"] = ((c_s,), "zeros")
    out["corr.pool.weight"] = ((c_s, 2, 1, 1), "weight")
    out["corr.pool.bias"] = ((c_s,), "zeros")
    out["encoder.conv.weight"] = ((c_e, c_f + 2 * c_s, 1, 1), "weight")
    out["encoder.conv.bias"] = ((c_e,), "zeros")
    out["encoder.gate.weight"] = ((c_e, 2 * c_f), "weight")
    out["encoder.gate.bias"] = ((c_e,), "zeros")
    out["encoder.gn.scale"] = ((c_e,), "ones")
    out["encoder.gn.shift"] = ((c_e,), "zeros")
    for i, _ in enumerate(scheme_kinds(scheme)):
        p = f"modulator.mod{i}"
        out[f"{p}.compress.weight"] = ((c_e, 2 * c_e, 1, 1), "weight")
        for j in range(STAGES):
            s = f"{p}.stage{j}"
            out[f"{s}.gn.scale"] = ((c_e,), "ones")
            out[f"{s}.gn.shift"] = ((c_e,), "zeros")
            out[f"{s}.gate.weight"] = ((c_e, c_f), "weight")
            out[f"{s}.gate.bias"] = ((c_e,), "zeros")
            out[f"{s}.conv.weight"] = ((c_e, c_e, 3, 3), "weight")
            out[f"{s}.conv.bias"] = ((c_e,), "zeros")
    if parse_scheme(scheme) == "P&C":
        out["modulator.fuse.compress.weight"] = ((c_e, 2 * c_e, 1, 1), "weight")
    out["decoder.conv1.weight"] = ((c_e, c_e, 3, 3), "weight")
    out["decoder.conv1.bias"] = ((c_e,), "zeros")
    out["decoder.conv2.weight"] = ((c_e, c_e, 3, 3), "weight")
    out["decoder.conv2.bias"] = ((c_e,), "zeros")
    out["decoder.out.weight"] = ((2, c_e, 1, 1), "head")
    out["decoder.out.bias"] = ((2,), "zeros")
    return out


def init_params(scheme: str = "P2C", seed: int = 0, dims: ModelDims = ModelDims()) -> ParamSet:
    """Kaiming-uniform (fan-in) weights, zero biases, unit GN scale, zero GN shift.

    The logit head is scaled down by HEAD_SCALE so an untrained model starts
    close to uniform foreground/background probabilities.
    """
    params = ParamSet()
    for name, (shape, kind) in sorted(_shapes(scheme, dims).items()):
        if kind in ("weight", "head"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in) * (HEAD_SCALE if kind == "head" else 1.0)
            arr = substream(seed, "init", name).uniform(-bound, bound, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr)
    return params


def check_params(params: ParamSet, scheme: str, dims: ModelDims = ModelDims()) -> None:
    """Raise if ``params`` does not have exactly the layout ``scheme`` needs."""
    want = _shapes(scheme, dims)
    have = {n: params[n].shape for n in params}
    missing = sorted(set(want) - set(have))
    wrong = sorted(n for n in want if n in have and tuple(have[n]) != want[n][0])
    if missing or wrong:
        raise ValueError(f"parameter layout mismatch for {scheme}: missing={missing[:5]} wrong={wrong[:5]}")
