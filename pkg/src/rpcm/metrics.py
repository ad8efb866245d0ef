"""Region (J) and boundary (F) accuracy, aggregation and decay over normalized time."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimMismatch, LengthMismatch

DECAY_BINS = 10


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimMismatch(f"masks differ in shape: {pred.shape} vs {gt.shape}")
    return pred, gt


def region_j(pred, gt) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def default_tolerance(shape: tuple[int, int]) -> int:
    return max(1, int(round(0.008 * float(np.hypot(shape[0], shape[1])))))


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask (the frame edge counts as outside)."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _dilate(b: np.ndarray, tol: int) -> np.ndarray:
    if tol == 0:
        return b
    return ndimage.binary_dilation(b, structure=np.ones((2 * tol + 1, 2 * tol + 1), dtype=bool))


def boundary_f(pred, gt, tol: int | None = None) -> float:
    """Boundary F-measure with a Chebyshev pixel tolerance (dilation matching)."""
    pred, gt = _pair(pred, gt)
    if tol is None:
        tol = default_tolerance(pred.shape)
    if tol < 0:
        raise ValueError("tol must be >= 0")
    pb, gb = mask_boundary(pred), mask_boundary(gt)
    n_p, n_g = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = np.count_nonzero(pb & _dilate(gb, tol)) / n_p
    recall = np.count_nonzero(gb & _dilate(pb, tol)) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class FrameScore:
    seq: str
    object_id: int
    frame: int  # 0-based; frame 0 carries the given mask and is never scored
    num_frames: int
    j: float
    f: float

    @property
    def jf(self) -> float:
        return (self.j + self.f) / 2


@dataclass
class MetricsReport:
    records: list[FrameScore] = field(default_factory=list)

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        self.records.extend(other.records)
        return self

    def _per_object(self, attr: str) -> list[float]:
        groups: dict[tuple[str, int], list[float]] = {}
        for r in self.records:
            groups.setdefault((r.seq, r.object_id), []).append(getattr(r, attr))
        return [float(np.mean(v)) for _, v in sorted(groups.items())]

    @property
    def mean_j(self) -> float:
        """Mean over objects of each object's mean over scored frames."""
        vals = self._per_object("j")
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_f(self) -> float:
        vals = self._per_object("f")
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def jf(self) -> float:
        return (self.mean_j + self.mean_f) / 2

    def decay(self) -> list[float | None]:
        """Mean J&F per decile of normalized position among scored frames (None for empty bins)."""
        bins: list[list[float]] = [[] for _ in range(DECAY_BINS)]
        for r in self.records:
            bins[decay_bin(r.frame, r.num_frames)].append(r.jf)
        return [float(np.mean(b)) if b else None for b in bins]

    def decay_slope(self) -> float:
        """Last non-empty decile mean minus first non-empty decile mean."""
        vals = [v for v in self.decay() if v is not None]
        return vals[-1] - vals[0] if vals else 0.0

    def summary(self) -> dict:
        return {
            "J": self.mean_j,
            "F": self.mean_f,
            "JF": self.jf,
            "decay": self.decay(),
            "decay_slope": self.decay_slope(),
            "num_sequences": len({r.seq for r in self.records}),
            "num_objects": len({(r.seq, r.object_id) for r in self.records}),
            "num_scores": len(self.records),
        }

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        with open(out_dir / "per_frame.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seq", "object", "frame", "J", "F"])
            for r in self.records:
                w.writerow([r.seq, r.object_id, r.frame, repr(r.j), repr(r.f)])


def decay_bin(frame: int, num_frames: int) -> int:
    """Scored frames 1..T-1 map onto [0, 1) and then onto ten equal bins."""
    if num_frames <= 2:
        return 0
    pos = (frame - 1) / (num_frames - 1)
    return min(DECAY_BINS - 1, int(np.floor(DECAY_BINS * pos)))


def evaluate(predictions, gt_masks, num_objects: int, seq: str = "seq", tol: int | None = None) -> MetricsReport:
    """Score predicted label maps (or step outputs with a ``mask``) against ground truth, skipping frame 0."""
    preds = [np.asarray(getattr(p, "mask", p)) for p in predictions]
    gts = [np.asarray(g) for g in gt_masks]
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    report = MetricsReport()
    t_total = len(gts)
    for i in range(1, t_total):
        if preds[i].shape != gts[i].shape:
            raise DimMismatch(f"frame {i}: prediction {preds[i].shape} vs ground truth {gts[i].shape}")
        for o in range(1, num_objects + 1):
            p, g = preds[i] == o, gts[i] == o
            report.records.append(FrameScore(seq, o, i, t_total, region_j(p, g), boundary_f(p, g, tol)))
    return report
