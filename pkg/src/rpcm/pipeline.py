"""Frame-by-frame inference: propagation path, correction path, reliability and pool upkeep."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadLabels, DimMismatch, EmptyObjectList, EmptyPool
from .features import (
    FeatureMap,
    extract_features,
    local_correlation,
    mask_features,
    object_map,
    pool_correlation,
    project_pool_similarity,
)
from .modulation import Assembly, decode, encode_memory
from .model import ModelDims
from .nn import concat_channels, channel_slice, downsample_nearest, masked_gap, softmax_np, upsample_bilinear
from .pool import ObjectProxy, PatchPool, PoolEntry, correction_proxy, propagation_proxy, update_pool
from .reliability import logit_reliability, reliability_filter, shannon_entropy
from .tensor import ParamSet, Tensor, minimum, mul, no_grad


@dataclass(frozen=True)
class InferenceSettings:
    tau: int = 5
    alpha: float = 1.0
    entropy_mode: str = "nat"  # nat | normalized
    reliability_measure: str = "entropy"  # entropy | logit
    logit_alpha: float = 0.9
    wc_mode: str = "weighted_mean"  # weighted_mean | literal_average
    pool_capacity: int | None = None
    use_pool: bool = True
    dims: ModelDims = ModelDims()


@dataclass
class ObjectState:
    object_id: int
    pool: PatchPool
    assembly: Assembly
    reference: PoolEntry  # frame-1 masked features; stands in while the pool is empty
    prev_masked: object = None


@dataclass
class SequenceState:
    objects: list[ObjectState]
    prev_mask: np.ndarray  # frame resolution labels
    prev_reliability: np.ndarray  # feature resolution {0,1}
    prev_features: FeatureMap
    frame_index: int
    num_objects: int
    params: ParamSet
    scheme: str
    settings: InferenceSettings
    frame_shape: tuple[int, int, int]
    record_embeddings: bool = False


@dataclass
class StepOutput:
    mask: np.ndarray  # (H, W) labels 0..N
    probabilities: np.ndarray  # (N+1, H, W)
    reliability: np.ndarray  # feature resolution {0,1}
    entropy: np.ndarray  # feature resolution
    embeddings: dict = field(default_factory=dict)  # object id -> (e_t, modulated e_t)


# ---------------------------------------------------------------- shared per-object pieces


def aggregate_objects(per_object_logits: list[Tensor]) -> Tensor:
    """Stack object logits into N+1 channels: min of background logits, then each foreground."""
    if not per_object_logits:
        raise EmptyObjectList("aggregate_objects needs at least one object")
    shape = per_object_logits[0].shape
    if any(lg.shape != shape or shape[0] != 2 for lg in per_object_logits):
        raise DimMismatch("per-object logits must all be (2, H, W)")
    bg = channel_slice(per_object_logits[0], 0, 1)
    for lg in per_object_logits[1:]:
        bg = minimum(bg, channel_slice(lg, 0, 1))
    return concat_channels([bg] + [channel_slice(lg, 1, 2) for lg in per_object_logits])


def reference_entry(f: FeatureMap, m: np.ndarray) -> PoolEntry:
    """Pool entry of a ground-truth frame with all-ones reliability; keeps the graph of f."""
    m = (np.asarray(m) > 0).astype(np.float64)
    return PoolEntry(mul(f.tensor, m), m, 1)


def _correction_source(pool: PatchPool, fallback: PoolEntry) -> PatchPool:
    return pool if pool.entries else PatchPool(pool.tau, pool.capacity, [fallback])


def _proxy_c(pool: PatchPool, f_fallback: FeatureMap, mode: str) -> ObjectProxy:
    try:
        return correction_proxy(pool, mode)
    except EmptyPool:
        return ObjectProxy(masked_gap(f_fallback.tensor), "correction")


def object_embedding(
    f_t: FeatureMap,
    f_prev: FeatureMap,
    m_prev: np.ndarray,
    c_pool: PatchPool,
    params: ParamSet,
    settings: InferenceSettings,
) -> tuple[Tensor, ObjectProxy, ObjectProxy]:
    """Proxies, both similarity maps and the encoded embedding e_t for one object."""
    w_p = propagation_proxy(f_prev, m_prev)
    w_c = _proxy_c(c_pool, f_prev, settings.wc_mode)
    prev = mask_features(f_prev, m_prev.astype(np.int64), 1)
    s_p = local_correlation(f_t, prev, m_prev, settings.dims.window_radius, params.subset("corr.local"))
    s_c = project_pool_similarity(pool_correlation(c_pool, f_t), m_prev, params.subset("corr.pool"))
    e_t = encode_memory(f_t, s_c, s_p, w_p, w_c, params.subset("encoder"))
    return e_t, w_p, w_c


def reference_embedding(f: FeatureMap, m: np.ndarray, params: ParamSet, settings: InferenceSettings) -> Tensor:
    """e for a frame with a trusted mask: both similarities computed against the frame itself."""
    pool = PatchPool(settings.tau, None, [reference_entry(f, m)])
    e, _, _ = object_embedding(f, f, m, pool, params, settings)
    return e


# ---------------------------------------------------------------- sequence API


def _check_labels(y1: np.ndarray, num_objects: int | None) -> int:
    y1 = np.asarray(y1)
    if y1.ndim != 2 or not np.issubdtype(y1.dtype, np.integer):
        raise BadLabels("first-frame mask must be a 2-d integer label map")
    if y1.min() < 0:
        raise BadLabels("negative labels")
    n = int(y1.max()) if num_objects is None else num_objects
    if n < 1 or y1.max() > n:
        raise BadLabels(f"labels must lie in 0..N with N >= 1 (got max {y1.max()}, N={n})")
    present = set(np.unique(y1).tolist())
    missing = [o for o in range(1, n + 1) if o not in present]
    if missing:
        raise BadLabels(f"objects {missing} are absent from the first frame")
    return n


def init_sequence(
    frame1: np.ndarray,
    y1: np.ndarray,
    scheme: str,
    params: ParamSet,
    settings: InferenceSettings = InferenceSettings(),
    num_objects: int | None = None,
    record_embeddings: bool = False,
) -> SequenceState:
    n = _check_labels(y1, num_objects)
    with no_grad():
        f1 = extract_features(frame1, params.subset("backbone"))
        y1_low = downsample_nearest(np.asarray(y1), f1.stride)
        objects = []
        for o in range(1, n + 1):
            m = object_map(y1_low, o)
            e1 = reference_embedding(f1, m, params, settings)
            asm = Assembly.build(scheme)
            asm.write_buffers(e1, 1)
            ref = reference_entry(f1, m)
            objects.append(ObjectState(o, PatchPool(settings.tau, settings.pool_capacity), asm, ref))
    return SequenceState(
        objects=objects,
        prev_mask=np.asarray(y1).astype(np.uint8),
        prev_reliability=np.ones(f1.hw, dtype=np.uint8),
        prev_features=f1,
        frame_index=1,
        num_objects=n,
        params=params,
        scheme=Assembly.build(scheme).scheme,
        settings=settings,
        frame_shape=tuple(np.asarray(frame1).shape),
        record_embeddings=record_embeddings,
    )


def step(state: SequenceState, frame_t: np.ndarray) -> tuple[StepOutput, SequenceState]:
    """Predict the next frame; the input state is left untouched."""
    frame_t = np.asarray(frame_t)
    if frame_t.shape != state.frame_shape:
        raise DimMismatch(f"frame {frame_t.shape} differs from the sequence's {state.frame_shape}")
    st = state.settings
    params = state.params
    t = state.frame_index + 1
    with no_grad():
        f_t = extract_features(frame_t, params.subset("backbone"))
        y_prev_low = downsample_nearest(state.prev_mask, f_t.stride)
        logits_low, new_objects, embeddings = [], [], {}
        for obj in state.objects:
            m_prev = object_map(y_prev_low, obj.object_id)
            pool = obj.pool
            if st.use_pool:
                pool = update_pool(pool, state.prev_features, m_prev, state.prev_reliability, t)
            c_pool = _correction_source(pool, obj.reference)
            e_t, w_p, w_c = object_embedding(f_t, state.prev_features, m_prev, c_pool, params, st)
            asm = obj.assembly.copy()
            e_mod = asm.forward(e_t, w_p, w_c, params.subset("modulator"))
            logits_low.append(decode(e_mod, params.subset("decoder"), upsample=False))
            asm.write_buffers(e_t, t)
            new_objects.append(replace(obj, pool=pool, assembly=asm))
            if state.record_embeddings:
                embeddings[obj.object_id] = (e_t.data, e_mod.data)
        agg_low = aggregate_objects(logits_low)
        agg = upsample_bilinear(agg_low, f_t.stride)
    probs = softmax_np(agg.data)
    mask = np.argmax(probs, axis=0).astype(np.uint8)
    entropy = shannon_entropy(agg_low.data, st.entropy_mode)
    if st.reliability_measure == "logit":
        reliability = logit_reliability(agg_low.data, np.argmax(agg_low.data, axis=0), st.logit_alpha)
    else:
        reliability = reliability_filter(entropy, st.alpha)
    out = StepOutput(mask, probs, reliability, entropy, embeddings)
    new_state = replace(
        state,
        objects=new_objects,
        prev_mask=mask,
        prev_reliability=reliability,
        prev_features=FeatureMap(f_t.tensor.detach(), f_t.stride),
        frame_index=t,
    )
    return out, new_state


def ground_truth_output(y1: np.ndarray, num_objects: int, feat_hw: tuple[int, int]) -> StepOutput:
    y1 = np.asarray(y1)
    probs = (np.arange(num_objects + 1)[:, None, None] == y1[None]).astype(np.float64)
    return StepOutput(y1.astype(np.uint8), probs, np.ones(feat_hw, dtype=np.uint8), np.zeros(feat_hw))


def run_sequence(
    frames: list[np.ndarray],
    y1: np.ndarray,
    scheme: str,
    params: ParamSet,
    settings: InferenceSettings = InferenceSettings(),
    num_objects: int | None = None,
    record_embeddings: bool = False,
    states: list | None = None,
) -> list[StepOutput]:
    """Initialise on frame 1 and step through the rest; output[0] echoes the given mask.

    When ``states`` is a list, the state after every frame is appended to it.
    """
    if len(frames) < 2:
        raise ValueError("run_sequence needs at least two frames")
    state = init_sequence(frames[0], y1, scheme, params, settings, num_objects, record_embeddings)
    outputs = [ground_truth_output(y1, state.num_objects, state.prev_features.hw)]
    if states is not None:
        states.append(state)
    for frame in frames[1:]:
        out, state = step(state, frame)
        outputs.append(out)
        if states is not None:
            states.append(state)
    return outputs
