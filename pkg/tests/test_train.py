import math

import numpy as np
import pytest

from rpcm import tensor
from rpcm.data import SequenceSpec, generate_sequence
from rpcm.errors import ConfigError, DimMismatch, GradientCheckFailed, TooShort
from rpcm.model import init_params
from rpcm.pipeline import InferenceSettings
from rpcm.train import (
    TrainConfig,
    TrainResult,
    Triplet,
    perturb_labels,
    preflight,
    sample_triplet,
    sgd_step,
    train,
    triplet_loss,
    write_loss_csv,
)


@pytest.fixture(scope="module")
def tiny_set():
    return [generate_sequence(SequenceSpec(seed=s, frames=4, height=32, width=32, num_objects=1 + s % 2)) for s in range(3)]


def test_sgd_examples():
    p, v = sgd_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, {}, 1.0, 0.0)
    assert p["w"].tolist() == [-1.0]
    p, v = sgd_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, {"w": np.array([4.0])}, 0.1, 0.9)
    assert v["w"][0] == 0.9 * 4.0 and p["w"][0] == 2.0 - 0.1 * 0.9 * 4.0
    g = np.array([1.0, -2.0])
    p, v = {"w": np.zeros(2)}, {}
    for _ in range(2):
        p, v = sgd_step(p, {"w": g}, v, 0.1, 0.9)
    assert np.allclose(p["w"], -0.29 * g, rtol=0, atol=1e-15)
    with pytest.raises(DimMismatch):
        sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, 0.1, 0.9)


def test_sgd_matches_scalar_recurrence(rng):
    lr, mu = 0.05, 0.7
    gs = rng.normal(size=20)
    p, v = {"w": np.array(0.3)}, {}
    ref_p, ref_v = 0.3, 0.0
    for g in gs:
        p, v = sgd_step(p, {"w": np.array(g)}, v, lr, mu)
        ref_v = mu * ref_v + g
        ref_p = ref_p - lr * ref_v
        assert float(p["w"]) == ref_p and float(v["w"]) == ref_v


def test_config_rules():
    cfg = TrainConfig(steps=10)
    assert [cfg.lr_at(i) for i in (0, 5, 6, 9)] == [0.02, 0.02, 0.01, 0.01]
    for bad in (dict(lr=0), dict(momentum=1.0), dict(steps=0), dict(grad_clip=-1.0), dict(lr_switch=1.5)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    assert TrainResult(None, [4.0] * 10 + [1.0] * 10).loss_ratio() == 0.25


def test_triplet_sampling(tiny_set):
    three = [generate_sequence(SequenceSpec(seed=1, frames=3, height=16, width=16))]
    rng = np.random.default_rng(0)
    counts = {0: 0, 1: 0}
    n = 10_000
    for _ in range(n):
        t = sample_triplet(three, rng)
        assert t.target == t.previous + 1
        counts[t.previous] += 1
    sigma = math.sqrt(n * 0.5 * 0.5)
    assert all(abs(c - n / 2) <= 3 * sigma for c in counts.values())
    a = [sample_triplet(tiny_set, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_triplet(tiny_set, np.random.default_rng(5)) for _ in range(3)]
    assert a == b
    with pytest.raises(TooShort):
        sample_triplet([generate_sequence(SequenceSpec(seed=1, frames=2, height=16, width=16))], rng)
    with pytest.raises(TooShort):
        sample_triplet([], rng)


def test_initial_loss_near_ln2():
    params = init_params("P2C", 0)
    settings = InferenceSettings(use_pool=False)
    seqs = [generate_sequence(SequenceSpec(seed=s, frames=4, num_objects=1)) for s in range(4)]
    losses = [triplet_loss(s, Triplet(0, 1, 2), "P2C", params, settings).item() for s in seqs]
    assert all(abs(v - math.log(2)) <= 0.3 for v in losses)


def test_training_is_deterministic_and_thread_independent(tiny_set):
    cfg = TrainConfig(steps=3, batch=2, seed=4)
    a = train(tiny_set, cfg)
    b = train(tiny_set, cfg)
    c = train(tiny_set, TrainConfig(steps=3, batch=2, seed=4, threads=3))
    assert a.losses == b.losses == c.losses
    for n in a.params:
        assert np.array_equal(a.params[n].data, b.params[n].data)
        assert np.array_equal(a.params[n].data, c.params[n].data)
    assert not np.array_equal(a.params["decoder.out.bias"].data, init_params("P2C", 4)["decoder.out.bias"].data)
    d = train(tiny_set, TrainConfig(steps=3, batch=2, seed=5))
    assert d.losses != a.losses


def test_non_teacher_forced_step_runs(tiny_set):
    loss = triplet_loss(tiny_set[1], Triplet(1, 2, 3), "P2C", init_params("P2C", 0), InferenceSettings(use_pool=False), False)
    assert np.isfinite(loss.item())


def test_preflight_catches_broken_backward(monkeypatch):
    assert preflight("P2C") < 1e-4
    monkeypatch.setattr(tensor, "_relu_backward", lambda g, x: (-g * (x > 0),))
    with pytest.raises(GradientCheckFailed):
        preflight("P2C")


def test_perturb_labels_shift_and_grow():
    a = np.zeros((8, 8), np.uint8)
    a[2:5, 2:5] = 1
    a[6, 6] = 2
    assert np.array_equal(perturb_labels(a, (0, 0, 0)), a)
    shifted = perturb_labels(a, (1, -1, 0))
    assert np.array_equal(shifted[3:6, 1:4], a[2:5, 2:5])
    assert shifted[7, 5] == 2 and (shifted > 0).sum() == 10
    grown = perturb_labels(a, (0, 0, 1))
    assert (grown == 1).sum() == 9 + 12
    assert (perturb_labels(a, (0, 0, -1)) == 1).sum() == 1
    assert not (perturb_labels(a, (0, 0, -1)) == 2).any()
    # everything shifted out of frame leaves background only
    assert not perturb_labels(a, (8, 0, 0)).any()


def test_mask_noise_changes_training_only_when_enabled(tiny_set):
    a = train(tiny_set, TrainConfig(steps=2, batch=2, seed=4, mask_noise=0.0))
    b = train(tiny_set, TrainConfig(steps=2, batch=2, seed=4, mask_noise=1.0))
    assert a.losses != b.losses
    with pytest.raises(ConfigError):
        TrainConfig(mask_noise=1.5).validate()


def test_loss_csv(tmp_path):
    write_loss_csv(tmp_path / "loss.csv", [0.5, 0.25])
    assert (tmp_path / "loss.csv").read_text() == "step,loss\n1,0.5\n2,0.25\n"
