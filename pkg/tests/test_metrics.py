import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rpcm.errors import DimMismatch, LengthMismatch
from rpcm.metrics import (
    MetricsReport,
    boundary_f,
    decay_bin,
    default_tolerance,
    evaluate,
    mask_boundary,
    region_j,
)


def iou_oracle(a, b):
    pa = {(y, x) for y, x in zip(*np.nonzero(a))}
    pb = {(y, x) for y, x in zip(*np.nonzero(b))}
    union = pa | pb
    return 1.0 if not union else len(pa & pb) / len(union)


def boundary_oracle(mask):
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                        out[y, x] = True
    return out


def f_oracle(pred, gt, tol):
    pb, gb = boundary_oracle(pred), boundary_oracle(gt)
    P, G = list(zip(*np.nonzero(pb))), list(zip(*np.nonzero(gb)))
    if not P and not G:
        return 1.0
    if not P or not G:
        return 0.0

    def near(p, others):
        return any(max(abs(p[0] - q[0]), abs(p[1] - q[1])) <= tol for q in others)

    prec = sum(near(p, G) for p in P) / len(P)
    rec = sum(near(g, P) for g in G) / len(G)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def _masks(seed, size=12):
    rng = np.random.default_rng(seed)
    return rng.random((size, size)) < rng.random(), rng.random((size, size)) < rng.random()


def test_region_examples():
    sq = np.zeros((8, 8), bool)
    sq[2:6, 2:6] = True
    assert region_j(sq, sq) == 1.0
    other = np.zeros((8, 8), bool)
    other[0, 0] = True
    assert region_j(sq, other) == 0.0
    full = np.ones((8, 8), bool)
    top = full.copy()
    top[4:] = False
    assert region_j(top, full) == 0.5
    assert region_j(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(DimMismatch):
        region_j(np.zeros((3, 3)), np.zeros((3, 4)))


def test_boundary_examples():
    sq = np.zeros((16, 16), bool)
    sq[4:10, 4:10] = True
    assert boundary_f(sq, sq, 1) == 1.0
    assert boundary_f(np.zeros_like(sq), sq, 1) == 0.0
    assert boundary_f(np.roll(sq, 1, axis=1), sq, 1) == 1.0
    assert boundary_f(np.zeros_like(sq), np.zeros_like(sq), 1) == 1.0
    assert default_tolerance((64, 64)) == 1
    assert default_tolerance((480, 854)) == 8
    ring = np.ones((3, 3), bool)
    ring[1, 1] = False
    assert np.array_equal(mask_boundary(np.ones((3, 3))), ring)


@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_boundary_matches_bruteforce(seed, tol):
    a, b = _masks(seed)
    assert np.array_equal(mask_boundary(a), boundary_oracle(a))
    assert boundary_f(a, b, tol) == pytest.approx(f_oracle(a, b, tol), abs=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(0, 4), st.integers(0, 4))
def test_symmetry_bounds_monotone(seed, t1, t2):
    a, b = _masks(seed, 16)
    assert region_j(a, b) == region_j(b, a) == iou_oracle(a, b)
    lo, hi = sorted((t1, t2))
    f_lo, f_hi = boundary_f(a, b, lo), boundary_f(a, b, hi)
    assert f_lo == boundary_f(b, a, lo)
    assert 0.0 <= f_lo <= f_hi <= 1.0


def test_evaluate_examples():
    gt = [np.zeros((8, 8), np.uint8) for _ in range(4)]
    for g in gt:
        g[2:5, 2:5] = 1
        g[6:, 6:] = 2
    perfect = evaluate(gt, gt, 2)
    assert perfect.mean_j == perfect.mean_f == perfect.jf == 1.0
    assert len(perfect.records) == 6 and min(r.frame for r in perfect.records) == 1
    empty = evaluate([np.zeros((8, 8), np.uint8)] * 4, gt, 2)
    assert all(r.j == 0.0 for r in empty.records)
    with pytest.raises(LengthMismatch):
        evaluate(gt[:3], gt, 2)
    with pytest.raises(DimMismatch):
        evaluate([g[:7] for g in gt], gt, 2)


def test_three_frame_decay_by_hand():
    gt = [np.zeros((4, 4), np.uint8) for _ in range(3)]
    for g in gt:
        g[:2] = 1
    half = gt[0].copy()
    half[1] = 0
    rep = evaluate([gt[0], gt[1], half], gt, 1)
    # frame 1 sits at position 0 (bin 0), frame 2 at position 1/2 (bin 5)
    assert [decay_bin(1, 3), decay_bin(2, 3)] == [0, 5]
    j2, f2 = 0.5, boundary_f(half == 1, gt[2] == 1)
    curve = rep.decay()
    assert curve[0] == 1.0 and curve[5] == (j2 + f2) / 2
    assert all(curve[i] is None for i in range(10) if i not in (0, 5))
    assert rep.decay_slope() == curve[5] - 1.0
    assert rep.mean_j == pytest.approx(0.75, abs=1e-15)


def test_per_object_aggregation_and_files(tmp_path):
    rep = MetricsReport()
    gt = [np.zeros((4, 4), np.uint8) for _ in range(3)]
    gt[0][0, 0] = gt[1][0, 0] = gt[2][0, 0] = 1
    rep.extend(evaluate(gt, gt, 1, "a"))
    rep.extend(evaluate([gt[0]] * 2, [gt[0], np.zeros((4, 4), np.uint8) + 1], 1, "b"))
    # object a scores 1 over two frames, object b scores 1/16 over one frame
    assert rep.mean_j == pytest.approx((1.0 + 1 / 16) / 2, abs=1e-15)
    assert rep.jf == (rep.mean_j + rep.mean_f) / 2
    rep.write(tmp_path)
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert summary["num_scores"] == 3 and len(summary["decay"]) == 10
    rows = list(csv.reader(open(tmp_path / "per_frame.csv")))
    assert rows[0] == ["seq", "object", "frame", "J", "F"] and len(rows) == 4
