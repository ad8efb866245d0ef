"""Self-check suites: finite-difference gradients, pool bookkeeping and metric oracles."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .features import FeatureMap, SimilarityMap, extract_features, local_correlation, mask_features, window_max_cosine
from .gradcheck import grad_check
from .metrics import boundary_f, region_j
from .model import ModelDims, init_params, substream
from .modulation import Assembly, ModulatorBlock, decode, encode_memory, modulator_forward
from .pool import ObjectProxy, PatchPool, update_pool
from .tensor import ParamSet, Tensor, add, mean, minimum, mul, relu, reshape, sigmoid, sub, tsum

GRAD_TOL = 1e-4
TOY_DIMS = ModelDims(sim_channels=4, embed_channels=8)


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    ok: bool

    def line(self) -> str:
        status = "ok  " if self.ok else "FAIL"
        return f"{status} {self.suite}/{self.name}: {self.value:.3e}"


def _ps(rng: np.random.Generator, **shapes) -> ParamSet:
    return ParamSet({k: Tensor(rng.normal(size=s)) for k, s in shapes.items()})


def _op_cases(seed: int) -> list[tuple[str, ParamSet, Callable[[ParamSet], Tensor]]]:
    rng = substream(seed, "verify", "ops")
    cases = []

    def case(name, params, fn):
        wr = substream(seed, "verify", "weights", name)
        weights = {}

        def f(p):
            out = fn(p)
            if out.data.size == 1:
                return out
            if "w" not in weights:
                weights["w"] = wr.normal(size=out.shape)
            return tsum(mul(out, weights["w"]))

        cases.append((name, params, f))

    case("add", _ps(rng, a=(3, 4), b=(4,)), lambda p: add(p["a"], p["b"]))
    case("sub", _ps(rng, a=(3, 4), b=(3, 1)), lambda p: sub(p["a"], p["b"]))
    case("mul", _ps(rng, a=(2, 3, 4), b=(3, 4)), lambda p: mul(p["a"], p["b"]))
    case("relu", _ps(rng, a=(5, 6)), lambda p: relu(p["a"]))
    case("sigmoid", _ps(rng, a=(5, 6)), lambda p: sigmoid(mul(p["a"], 3.0)))
    case("minimum", _ps(rng, a=(4, 5), b=(4, 5)), lambda p: minimum(p["a"], p["b"]))
    case("reshape", _ps(rng, a=(2, 6)), lambda p: reshape(p["a"], (3, 4)))
    case("sum", _ps(rng, a=(3, 3)), lambda p: mul(tsum(p["a"]), tsum(p["a"])))
    case("mean", _ps(rng, a=(3, 3)), lambda p: mul(mean(p["a"]), mean(p["a"])))
    case("conv2d", _ps(rng, x=(3, 7, 6), k=(4, 3, 3, 3), b=(4,)), lambda p: nn.conv2d(p["x"], p["k"], p["b"], pad=1))
    case("conv2d_stride2", _ps(rng, x=(2, 8, 8), k=(3, 2, 3, 3)), lambda p: nn.conv2d(p["x"], p["k"], stride=2, pad=1))
    case("conv2d_1x1", _ps(rng, x=(5, 4, 4), k=(3, 5, 1, 1), b=(3,)), lambda p: nn.conv2d(p["x"], p["k"], p["b"]))
    case("fully_connected", _ps(rng, x=(6,), W=(4, 6), b=(4,)), lambda p: nn.fully_connected(p["x"], p["W"], p["b"]))
    m = (rng.random((5, 5)) > 0.4).astype(float)
    m[0, 0] = 1.0
    case("masked_gap", _ps(rng, f=(3, 5, 5)), lambda p: nn.masked_gap(p["f"], m))
    case("softmax", _ps(rng, z=(3, 4, 4)), lambda p: nn.softmax_channels(p["z"]))
    target = rng.integers(0, 3, size=(4, 4))
    case("cross_entropy", _ps(rng, z=(3, 4, 4)), lambda p: nn.cross_entropy(p["z"], target))
    case("group_normalize", _ps(rng, x=(8, 3, 3), s=(8,), t=(8,)), lambda p: nn.group_normalize(p["x"], 4, p["s"], p["t"]))
    gate = _ps(rng, x=(4, 3, 3), w=(6,), **{"head.weight": (4, 6), "head.bias": (4,)})
    case("channel_gate", gate, lambda p: nn.channel_gate(p["x"], p["w"], p.subset("head")))
    case("concat", _ps(rng, a=(2, 3, 3), b=(1, 3, 3)), lambda p: nn.concat_channels([p["a"], p["b"]]))
    case("channel_slice", _ps(rng, a=(4, 3, 3)), lambda p: nn.channel_slice(p["a"], 1, 3))
    case("upsample_bilinear", _ps(rng, a=(2, 3, 4)), lambda p: nn.upsample_bilinear(p["a"], 4))
    valid = rng.random((5, 5)) > 0.5
    case("window_max_cosine", _ps(rng, t=(4, 5, 5), s=(4, 5, 5)), lambda p: window_max_cosine(p["t"], p["s"], valid, 2))
    mask = (rng.random((5, 5)) > 0.5).astype(np.int64)
    lc = _ps(rng, f=(4, 5, 5), g=(4, 5, 5), **{"proj.weight": (3, 3, 1, 1), "proj.bias": (3,)})

    def lc_fn(p):
        prev = mask_features(FeatureMap(p["g"], 1), mask, 1)
        return local_correlation(FeatureMap(p["f"], 1), prev, mask, 1, p.subset("proj")).tensor

    case("local_correlation", lc, lc_fn)
    bb = init_params("P2C", seed).subset("backbone")
    frame = rng.integers(0, 256, size=(3, 16, 16)).astype(np.uint8)
    bb_small = ParamSet({n: Tensor(t.data) for n, t in bb.items() if n.startswith("conv4")})
    rest = {n: t for n, t in bb.items() if not n.startswith("conv4")}

    def bb_fn(p):
        merged = ParamSet({**{n: t for n, t in rest.items()}, **{n: t for n, t in p.items()}})
        return extract_features(frame, merged).tensor

    case("extract_features", bb_small, bb_fn)
    return cases


def composite_case(seed: int, scheme: str = "P2C", dims: ModelDims = TOY_DIMS, hw: int = 4):
    """encode_memory -> assembly -> decode -> cross_entropy with every parameter and input probed."""
    rng = substream(seed, "verify", "composite")
    params = init_params(scheme, seed, dims)
    sub = ParamSet()
    for prefix in ("encoder", "modulator", "decoder"):
        for n, t in params.subset(prefix).items():
            sub[f"{prefix}.{n}"] = Tensor(t.data)
    c_f, c_s, c_e = dims.feat_channels, dims.sim_channels, dims.embed_channels
    for n, shape in {
        "in.f": (c_f, hw, hw), "in.s_c": (c_s, hw, hw), "in.s_p": (c_s, hw, hw),
        "in.w_p": (c_f,), "in.w_c": (c_f,), "in.e_prev": (c_e, hw, hw), "in.e_1": (c_e, hw, hw),
    }.items():
        sub[n] = Tensor(rng.normal(size=shape))
    target = rng.integers(0, 2, size=(hw * dims.stride, hw * dims.stride))

    def f(p):
        w_p, w_c = ObjectProxy(p["in.w_p"], "propagation"), ObjectProxy(p["in.w_c"], "correction")
        e = encode_memory(FeatureMap(p["in.f"], dims.stride), SimilarityMap(p["in.s_c"], None),
                          SimilarityMap(p["in.s_p"], None), w_p, w_c, p.subset("encoder"))
        asm = Assembly.build(scheme)
        asm.write_buffers(p["in.e_1"], 1, keep_graph=True)
        asm.write_buffers(p["in.e_prev"], 2, keep_graph=True)
        out = asm.forward(e, w_p, w_c, p.subset("modulator"))
        return nn.cross_entropy(decode(out, p.subset("decoder"), dims.stride), target)

    return sub, f


def modulator_case(seed: int, dims: ModelDims = TOY_DIMS):
    rng = substream(seed, "verify", "modulator")
    params = init_params("P2P", seed, dims).subset("modulator.mod0")
    sub = ParamSet({n: Tensor(t.data) for n, t in params.items()})
    c_e = dims.embed_channels
    sub["in.e"] = Tensor(rng.normal(size=(c_e, 4, 4)))
    sub["in.mem"] = Tensor(rng.normal(size=(c_e, 4, 4)))
    sub["in.w"] = Tensor(rng.normal(size=(dims.feat_channels,)))
    weights = rng.normal(size=(c_e, 4, 4))

    def f(p):
        block = ModulatorBlock("mod0", "propagation")
        block.write(p["in.mem"], 2, keep_graph=True)
        return tsum(mul(modulator_forward(block, p["in.e"], ObjectProxy(p["in.w"], "propagation"), p), weights))

    return sub, f


def gradient_suite(seeds=range(1), max_coords: int = 12) -> list[CheckResult]:
    results = []
    for seed in seeds:
        for name, params, f in _op_cases(seed):
            err = grad_check(f, params, max_coords=max_coords, seed=seed)
            results.append(CheckResult("grad", f"{name}[seed={seed}]", err, err < GRAD_TOL))
        params, f = modulator_case(seed)
        err = grad_check(f, params, max_coords=max_coords, seed=seed)
        results.append(CheckResult("grad", f"modulator_forward[seed={seed}]", err, err < GRAD_TOL))
        params, f = composite_case(seed)
        err = grad_check(f, params, max_coords=max_coords, seed=seed)
        results.append(CheckResult("grad", f"composite_P2C[seed={seed}]", err, err < GRAD_TOL))
    return results


# ---------------------------------------------------------------- pool oracle


def simulate_pool(schedule: list[tuple[int, bool]], tau: int, capacity: int | None = None) -> list[int]:
    """Plain-list replay of the pool update rule: the frame indices the pool holds after the schedule.

    ``schedule`` lists (t, object_visible) for t = 2, 3, ...
    """
    held: list[int] = []
    for t, visible in schedule:
        if (t - 2) % tau != 0 or not visible:
            continue
        held.append(t - 1)
        if capacity is not None and len(held) > capacity:
            held.pop(1 if len(held) > 1 else 0)
    return held


def pool_suite(n_schedules: int = 200, seed: int = 0) -> list[CheckResult]:
    rng = substream(seed, "verify", "pool")
    mismatches = 0
    size_errors = 0
    for _ in range(n_schedules):
        tau = int(rng.choice([1, 3, 5, 10]))
        t_max = int(rng.integers(2, 201))
        capacity = None if rng.random() < 0.7 else int(rng.integers(1, 6))
        skip_p = 0.0 if rng.random() < 0.5 else 0.3
        schedule, pool = [], PatchPool(tau, capacity)
        for t in range(2, t_max + 1):
            y = (rng.random((2, 2)) > 0.5).astype(float)
            visible = rng.random() >= skip_p
            if not visible:
                y[:] = 0
            elif not y.any():
                y[0, 0] = 1.0
            schedule.append((t, visible))
            f = rng.normal(size=(2, 2, 2))
            updated = update_pool(pool, f, y, np.ones((2, 2)), t)
            changed, pool = updated is not pool, updated
            fresh = [e for e in pool.entries if e.frame_index == t - 1]
            if changed and fresh:
                e = fresh[0]
                if not np.array_equal(e.features, f * y) or not np.array_equal(e.validity, y):
                    mismatches += 1
        if [e.frame_index for e in pool.entries] != simulate_pool(schedule, tau, capacity):
            mismatches += 1
        if capacity is None and skip_p == 0.0 and len(pool) != 1 + (t_max - 2) // tau:
            size_errors += 1
    return [
        CheckResult("pool", "update_pool_vs_list_oracle", float(mismatches), mismatches == 0),
        CheckResult("pool", "pool_size_formula", float(size_errors), size_errors == 0),
    ]


# ---------------------------------------------------------------- metric oracles


def _iou_oracle(a: np.ndarray, b: np.ndarray) -> float:
    sa = {(int(y), int(x)) for y, x in zip(*np.nonzero(a))}
    sb = {(int(y), int(x)) for y, x in zip(*np.nonzero(b))}
    union = sa | sb
    return 1.0 if not union else len(sa & sb) / len(union)


def metric_suite(n_pairs: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = substream(seed, "verify", "metrics")
    bad_j = 0
    for _ in range(n_pairs):
        p_a, p_b = rng.random(2)
        a, b = rng.random((32, 32)) < p_a, rng.random((32, 32)) < p_b
        if region_j(a, b) != _iou_oracle(a, b):
            bad_j += 1
    gt = np.zeros((16, 16), bool)
    gt[4:10, 4:10] = True
    shifted = np.roll(gt, 1, axis=1)
    examples = [boundary_f(gt, gt, 1) == 1.0, boundary_f(np.zeros_like(gt), gt, 1) == 0.0,
                boundary_f(shifted, gt, 1) == 1.0]
    bad_mono = 0
    for _ in range(100):
        a, b = rng.random((24, 24)) < 0.5, rng.random((24, 24)) < 0.3
        vals = [boundary_f(a, b, tol) for tol in range(4)]
        if any(x > y for x, y in zip(vals, vals[1:])):
            bad_mono += 1
    return [
        CheckResult("metrics", "region_j_vs_set_oracle", float(bad_j), bad_j == 0),
        CheckResult("metrics", "boundary_f_examples", float(examples.count(False)), all(examples)),
        CheckResult("metrics", "boundary_f_tol_monotone", float(bad_mono), bad_mono == 0),
    ]


def run_all(log=print, grad_seeds=range(2)) -> bool:
    results = gradient_suite(grad_seeds) + pool_suite() + metric_suite()
    for r in results:
        log(r.line())
    failed = [r for r in results if not r.ok]
    if failed:
        log("failing checks: " + ", ".join(f"{r.suite}/{r.name}" for r in failed))
    return not failed
