"""Teacher-forced triplet training with SGD and momentum."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Sequence
from . import verify
from .errors import ConfigError, DimMismatch, GradientCheckFailed, TooShort
from .features import extract_features, object_map
from .gradcheck import grad_check
from .modulation import Assembly, decode
from .model import ModelDims, check_params, init_params, substream
from .nn import cross_entropy, downsample_nearest, upsample_bilinear
from .pipeline import (
    InferenceSettings,
    aggregate_objects,
    init_sequence,
    object_embedding,
    reference_embedding,
    reference_entry,
    step,
)
from .pool import PatchPool
from .tensor import ParamSet, Tensor


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "P2C"
    steps: int = 3000
    batch: int = 4
    lr: float = 0.02
    lr_late: float = 0.01
    lr_switch: float = 0.6  # fraction of steps run at ``lr``
    momentum: float = 0.9
    grad_clip: float | None = 5.0  # global L2 norm cap; None disables
    seed: int = 0
    teacher_forcing: bool = True
    threads: int = 1
    wc_mode: str = "weighted_mean"
    mask_noise: float = 1.0  # probability of perturbing a teacher-forced previous mask

    def validate(self) -> None:
        if self.lr <= 0 or self.lr_late <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.steps < 1 or self.batch < 1 or self.threads < 1:
            raise ConfigError("steps, batch and threads must be >= 1")
        if not 0 <= self.lr_switch <= 1:
            raise ConfigError("lr_switch must lie in [0, 1]")
        if not 0 <= self.mask_noise <= 1:
            raise ConfigError("mask_noise must lie in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0")

    def lr_at(self, step_index: int) -> float:
        return self.lr if step_index < int(round(self.lr_switch * self.steps)) else self.lr_late


@dataclass
class TrainResult:
    params: ParamSet
    losses: list[float] = field(default_factory=list)

    def loss_ratio(self) -> float:
        """Mean loss over the last tenth of steps divided by the mean over the first tenth."""
        n = max(1, len(self.losses) // 10)
        return float(np.mean(self.losses[-n:]) / np.mean(self.losses[:n]))


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """v <- momentum * v + g ; p <- p - lr * v. Returns new dicts; inputs are not modified."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        v = velocity.get(name)
        v = np.zeros_like(p) if v is None else v
        if g.shape != p.shape or v.shape != p.shape:
            raise DimMismatch(f"{name}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        new_v[name] = momentum * v + g
        new_p[name] = p - lr * new_v[name]
    return new_p, new_v


@dataclass(frozen=True)
class Triplet:
    seq_index: int
    previous: int  # 0-based frame index; the reference is frame 0
    target: int
    jitter: tuple[int, int, int] | None = None  # (dy, dx, grow) applied to the previous mask


MAX_SHIFT = 2
MAX_GROW = 2


def sample_jitter(rng: np.random.Generator) -> tuple[int, int, int]:
    dy, dx = (int(v) for v in rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2))
    return dy, dx, int(rng.integers(-MAX_GROW, MAX_GROW + 1))


def perturb_labels(labels: np.ndarray, jitter: tuple[int, int, int]) -> np.ndarray:
    """Shift a label map (zero fill) and grow or shrink every object by ``grow`` pixels."""
    dy, dx, grow = jitter
    h, w = labels.shape
    out = np.zeros_like(labels)
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = labels[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    if grow == 0:
        return out
    res = np.zeros_like(out)
    for o in np.unique(out[out > 0]):
        m = out == o
        m = ndimage.binary_dilation(m, iterations=grow) if grow > 0 else ndimage.binary_erosion(m, iterations=-grow)
        res[m & (res == 0)] = o
    return res


def sample_triplet(dataset: list[Sequence], rng: np.random.Generator) -> Triplet:
    """Uniform sequence, then a uniform adjacent (previous, target) pair; the reference is always frame 0."""
    if not dataset:
        raise TooShort("empty dataset")
    i = int(rng.integers(len(dataset)))
    t_len = len(dataset[i].frames)
    if t_len < 3:
        raise TooShort(f"sequence {i} has {t_len} frames; triplets need at least 3")
    prev = int(rng.integers(t_len - 1))
    return Triplet(i, prev, prev + 1)


def triplet_loss(
    seq: Sequence,
    trip: Triplet,
    scheme: str,
    params: ParamSet,
    settings: InferenceSettings,
    teacher_forcing: bool = True,
) -> Tensor:
    """Cross-entropy of one forward step from (reference, previous) to target, buffers kept in graph."""
    bb = params.subset("backbone")
    y_ref = np.asarray(seq.masks[0])
    n = seq.num_objects
    f_ref = extract_features(seq.frames[0], bb)
    f_prev = f_ref if trip.previous == 0 else extract_features(seq.frames[trip.previous], bb)
    f_t = extract_features(seq.frames[trip.target], bb)
    y_prev = np.asarray(seq.masks[trip.previous])
    if not teacher_forcing and trip.previous > 0:
        y_prev = _predicted_mask(seq, trip.previous, scheme, params, settings)
    elif trip.jitter is not None and trip.previous > 0:
        y_prev = perturb_labels(y_prev, trip.jitter)
    ref_low = downsample_nearest(y_ref, f_ref.stride)
    prev_low = downsample_nearest(y_prev, f_ref.stride)
    logits = []
    for o in range(1, n + 1):
        m_ref, m_prev = object_map(ref_low, o), object_map(prev_low, o)
        e_1 = reference_embedding(f_ref, m_ref, params, settings)
        asm = Assembly.build(scheme)
        asm.write_buffers(e_1, 1, keep_graph=True)
        if trip.previous > 0:
            e_prev = reference_embedding(f_prev, m_prev, params, settings)
            asm.write_buffers(e_prev, trip.previous + 1, keep_graph=True)
        c_pool = PatchPool(settings.tau, None, [reference_entry(f_ref, m_ref)])
        e_t, w_p, w_c = object_embedding(f_t, f_prev, m_prev, c_pool, params, settings)
        e_mod = asm.forward(e_t, w_p, w_c, params.subset("modulator"))
        logits.append(decode(e_mod, params.subset("decoder"), upsample=False))
    agg = upsample_bilinear(aggregate_objects(logits), f_t.stride)
    return cross_entropy(agg, np.asarray(seq.masks[trip.target]).astype(np.int64))


def _predicted_mask(seq, frame, scheme, params, settings) -> np.ndarray:
    state = init_sequence(seq.frames[0], seq.masks[0], scheme, params, settings, seq.num_objects)
    for k in range(1, frame + 1):
        out, state = step(state, seq.frames[k])
    return out.mask


def _item_grads(seq, trip, scheme, data: dict[str, np.ndarray], settings, teacher_forcing):
    local = ParamSet({n: Tensor._wrap(a) for n, a in data.items()})
    loss = triplet_loss(seq, trip, scheme, local, settings, teacher_forcing)
    loss.backward()
    return loss.item(), local.grads()


def preflight(scheme: str, seed: int = 0, max_coords: int = 4) -> float:
    """Finite-difference check of the full encoder/modulator/decoder graph at toy dims.

    Each parameter is probed at two step sizes and its better error is kept: a
    step that straddles a ReLU kink spoils one of them, a wrong backward rule both.
    """
    params, f = verify.composite_case(seed, scheme)
    runs = [{}, {}]
    for h, per_param in zip((1e-5, 1e-6), runs):
        grad_check(f, params, h=h, max_coords=max_coords, seed=seed, per_param=per_param)
    err = max(min(runs[0][n], runs[1][n]) for n in runs[0])
    if not err < verify.GRAD_TOL:
        raise GradientCheckFailed(f"pre-flight gradient check for {scheme}: relative error {err:.2e}")
    return err


def train(
    dataset: list[Sequence],
    config: TrainConfig = TrainConfig(),
    params: ParamSet | None = None,
    dims: ModelDims = ModelDims(),
    log_every: int = 0,
    log=print,
    check_gradients: bool = True,
) -> TrainResult:
    """Run ``config.steps`` SGD steps over batches of triplets; deterministic for a given seed.

    Unless ``check_gradients`` is off, a gradient check of the full model runs first.
    """
    config.validate()
    if check_gradients:
        preflight(config.scheme, config.seed)
    if params is None:
        params = init_params(config.scheme, config.seed, dims)
    check_params(params, config.scheme, dims)
    settings = InferenceSettings(use_pool=False, wc_mode=config.wc_mode, dims=dims)
    rng = substream(config.seed, "train", "triplets")
    noise_rng = substream(config.seed, "train", "mask-noise")
    data = {n: t.data.copy() for n, t in params.items()}
    velocity: dict[str, np.ndarray] = {}
    losses: list[float] = []
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for s in range(config.steps):
            trips = [sample_triplet(dataset, rng) for _ in range(config.batch)]
            if config.mask_noise > 0:
                trips = [replace(tr, jitter=sample_jitter(noise_rng)) if noise_rng.random() < config.mask_noise else tr
                         for tr in trips]
            jobs = [(dataset[tr.seq_index], tr, config.scheme, data, settings, config.teacher_forcing) for tr in trips]
            if pool is None:
                results = [_item_grads(*j) for j in jobs]
            else:
                results = list(pool.map(lambda j: _item_grads(*j), jobs))
            # fixed reduction order keeps the result independent of scheduling
            grads = {n: np.zeros_like(a) for n, a in data.items()}
            total = 0.0
            for loss_value, g in results:
                total += loss_value
                for n in grads:
                    grads[n] += g[n]
            scale = 1.0 / config.batch
            for n in grads:
                grads[n] *= scale
            if config.grad_clip is not None:
                norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
                if norm > config.grad_clip:
                    for n in grads:
                        grads[n] *= config.grad_clip / norm
            data, velocity = sgd_step(data, grads, velocity, config.lr_at(s), config.momentum)
            losses.append(total * scale)
            if log_every and (s + 1) % log_every == 0:
                log(f"step {s + 1}/{config.steps} loss {np.mean(losses[-log_every:]):.4f}")
    finally:
        if pool is not None:
            pool.shutdown()
    out = ParamSet({n: Tensor(a) for n, a in data.items()})
    return TrainResult(out, losses)


def write_loss_csv(path: str | Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])
