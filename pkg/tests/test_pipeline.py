import math

import numpy as np
import pytest

from rpcm.data import SequenceSpec, generate_sequence
from rpcm.errors import BadLabels, DimMismatch, EmptyObjectList
from rpcm.metrics import region_j
from rpcm.model import init_params
from rpcm.modulation import tensor_digest
from rpcm.nn import downsample_nearest
from rpcm.pipeline import InferenceSettings, aggregate_objects, init_sequence, run_sequence, step
from rpcm.tensor import Tensor

PARAMS = init_params("P2C", 0)


@pytest.fixture(scope="module")
def seq():
    return generate_sequence(SequenceSpec(seed=7, frames=8, num_objects=2))


def test_aggregate_examples(rng):
    one = Tensor(rng.normal(size=(2, 3, 3)))
    assert np.array_equal(aggregate_objects([one]).data, one.data)

    a = np.full((2, 2, 4), -5.0)
    b = np.full((2, 2, 4), -5.0)
    a[1, :, :2], a[0, :, 2:] = 5.0, 5.0
    b[1, :, 2:], b[0, :, :2] = 5.0, 5.0
    a[0, :, :2] = b[0, :, 2:] = -5.0
    agg = aggregate_objects([Tensor(a), Tensor(b)]).data
    labels = np.argmax(agg, axis=0)
    assert np.array_equal(labels, np.array([[1, 1, 2, 2]] * 2))

    c = Tensor(rng.normal(size=(2, 3, 3)))
    d = Tensor(rng.normal(size=(2, 3, 3)))
    ab, ba = aggregate_objects([c, d]).data, aggregate_objects([d, c]).data
    assert np.array_equal(ab[0], ba[0]) and np.array_equal(ab[1:], ba[[2, 1]])
    with pytest.raises(EmptyObjectList):
        aggregate_objects([])


def test_init_state(seq):
    st = init_sequence(seq.frames[0], seq.masks[0], "P2C", PARAMS)
    assert st.frame_index == 1 and st.num_objects == 2
    assert np.all(st.prev_reliability == 1)
    for obj in st.objects:
        assert len(obj.pool) == 0
        (p,), (c,) = obj.assembly.buffer("propagation"), obj.assembly.buffer("correction")
        assert np.array_equal(p.data, c.data)


def test_bad_labels(seq):
    y = seq.masks[0].copy()
    with pytest.raises(BadLabels):
        init_sequence(seq.frames[0], y, "P2C", PARAMS, num_objects=1)
    y[y == 2] = 0
    with pytest.raises(BadLabels):
        init_sequence(seq.frames[0], y, "P2C", PARAMS, num_objects=2)
    with pytest.raises(BadLabels):
        init_sequence(seq.frames[0], np.zeros_like(y), "P2C", PARAMS)


def test_run_contract(seq):
    states = []
    outs = run_sequence(seq.frames, seq.masks[0], "P2C", PARAMS, num_objects=2, states=states)
    assert len(outs) == len(seq.frames)
    assert np.array_equal(outs[0].mask, seq.masks[0]) and np.all(outs[0].reliability == 1)
    for o in outs:
        assert o.mask.shape == seq.masks[0].shape
        assert np.abs(o.probabilities.sum(axis=0) - 1).max() <= 1e-6
        assert np.array_equal(o.mask, np.argmax(o.probabilities, axis=0))
    for first, last in zip(states[0].objects, states[-1].objects):
        assert tensor_digest(first.assembly.buffer("correction")[0]) == tensor_digest(last.assembly.buffer("correction")[0])
    again = run_sequence(seq.frames, seq.masks[0], "P2C", PARAMS, num_objects=2)
    assert all(np.array_equal(a.mask, b.mask) and np.array_equal(a.probabilities, b.probabilities)
               for a, b in zip(outs, again))


def test_step_leaves_state_untouched(seq):
    st = init_sequence(seq.frames[0], seq.masks[0], "P2C", PARAMS)
    a, st2 = step(st, seq.frames[1])
    b, _ = step(st, seq.frames[1])
    assert np.array_equal(a.probabilities, b.probabilities)
    assert st.frame_index == 1 and st2.frame_index == 2
    assert all(len(o.pool) == 0 for o in st.objects)
    with pytest.raises(DimMismatch):
        step(st, seq.frames[1][:, :32])


def _update_hits(outs, masks0, n, tau):
    """Per object, how many update checks see a non-empty reliable mask on the previous frame."""
    hits = [0] * n
    for t in range(2, len(outs) + 1):
        if (t - 2) % tau:
            continue
        y = downsample_nearest(masks0 if t == 2 else outs[t - 2].mask, 4)
        r = outs[t - 2].reliability
        for o in range(n):
            hits[o] += int(((y == o + 1) & (r > 0)).any())
    return hits


@pytest.mark.parametrize("tau", [1, 3, 5])
def test_pool_growth_follows_schedule(seq, tau):
    states = []
    outs = run_sequence(seq.frames, seq.masks[0], "P2C", PARAMS, InferenceSettings(tau=tau), 2, states=states)
    assert [len(o.pool) for o in states[-1].objects] == _update_hits(outs, seq.masks[0], 2, tau)


def test_pool_growth_closed_form_trained(p2c_model, suite):
    checked = 0
    for s in suite[1][:6]:
        for tau in (1, 5):
            states = []
            settings = InferenceSettings(tau=tau, alpha=math.log(s.num_objects + 1))
            outs = run_sequence(s.frames, s.masks[0], "P2C", p2c_model, settings, s.num_objects, states=states)
            updates = 1 + (len(s.frames) - 2) // tau
            for o, hits in zip(states[-1].objects, _update_hits(outs, s.masks[0], s.num_objects, tau)):
                if hits == updates:
                    assert len(o.pool) == updates
                    checked += 1
    assert checked > 0


def test_reference_as_second_frame_trained(p2c_model, suite):
    for s in suite[1][:5]:
        out, _ = step(init_sequence(s.frames[0], s.masks[0], "P2C", p2c_model), s.frames[0])
        for o in range(1, s.num_objects + 1):
            assert region_j(out.mask == o, s.masks[0] == o) >= 0.9


def test_scheme_sensitivity_trained(p2c_model, suite):
    # both schemes have two blocks with identical parameter layouts
    s = suite[1][0]
    p2c = run_sequence(s.frames, s.masks[0], "P2C", p2c_model)
    s2s = run_sequence(s.frames, s.masks[0], "S2S", p2c_model)
    assert any(not np.array_equal(a.mask, b.mask) for a, b in zip(p2c, s2s))
