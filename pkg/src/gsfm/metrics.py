"""Region similarity J, contour accuracy F and per-sequence J&F reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .boundary import laplacian_boundary


def jaccard(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def default_tolerance(shape: tuple[int, int]) -> int:
    return max(1, math.ceil(0.008 * math.hypot(*shape)))


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy ** 2 + xx ** 2 <= r * r


def _dilate(b: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0 or not b.any():
        return b
    return ndimage.binary_dilation(b, structure=disk(radius))


def contour_f(pred, gt, tolerance_px: int | None = None) -> float:
    """Boundary F-measure with dilation-based matching."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tol = default_tolerance(pred.shape[-2:]) if tolerance_px is None else int(tolerance_px)
    bp = laplacian_boundary(pred).astype(bool)
    bg = laplacian_boundary(gt).astype(bool)
    np_, ng = np.count_nonzero(bp), np.count_nonzero(bg)
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    precision = np.count_nonzero(bp & _dilate(bg, tol)) / np_
    recall = np.count_nonzero(bg & _dilate(bp, tol)) / ng
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    per_sequence: dict[str, dict[str, float]] = field(default_factory=dict)
    global_: dict[str, float] = field(default_factory=dict)
    per_object: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def jf(self) -> float:
        return self.global_["JF"]

    def to_dict(self) -> dict:
        return {"per_sequence": self.per_sequence, "global": self.global_, "per_object": self.per_object}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "J_mean", "F_mean", "JF"])
            for name in sorted(self.per_sequence):
                r = self.per_sequence[name]
                w.writerow([name, f"{r['J_mean']:.6f}", f"{r['F_mean']:.6f}", f"{r['JF']:.6f}"])
            g = self.global_
            w.writerow(["__global__", f"{g['J']:.6f}", f"{g['F']:.6f}", f"{g['JF']:.6f}"])

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["per_sequence"], d["global"], d.get("per_object", {}))


def evaluate(preds: Mapping[str, np.ndarray], gts: Mapping[str, np.ndarray],
             tolerance_px: int | None = None, annotated: Mapping[str, list[bool]] | None = None) -> MetricsReport:
    """Score label-map sequences ``[T, H, W]`` against ground truth.

    Objects are the nonzero labels of the first ground-truth frame. Frame 0 is
    excluded; frames flagged as unannotated are skipped. Sequence scores are the
    mean over objects, the global score the mean over all objects.
    """
    if set(preds) != set(gts):
        raise ValueError("prediction and ground-truth sequence sets differ")
    report = MetricsReport()
    all_j, all_f = [], []
    for name in sorted(gts):
        gt = np.asarray(gts[name])
        pred = np.asarray(preds[name])
        if gt.shape != pred.shape:
            raise ValueError(f"{name}: length/shape mismatch {pred.shape} vs {gt.shape}")
        frames = [t for t in range(1, len(gt)) if annotated is None or annotated[name][t]]
        ids = [int(i) for i in np.unique(gt[0]) if i != 0]
        seq_j, seq_f = [], []
        for oid in ids:
            js = [jaccard(pred[t] == oid, gt[t] == oid) for t in frames]
            fs = [contour_f(pred[t] == oid, gt[t] == oid, tolerance_px) for t in frames]
            j = float(np.mean(js)) if js else 1.0
            f = float(np.mean(fs)) if fs else 1.0
            report.per_object[f"{name}/{oid}"] = {"J": j, "F": f}
            seq_j.append(j)
            seq_f.append(f)
        if not ids:
            continue
        sj, sf = float(np.mean(seq_j)), float(np.mean(seq_f))
        report.per_sequence[name] = {"J_mean": sj, "F_mean": sf, "JF": (sj + sf) / 2}
        all_j += seq_j
        all_f += seq_f
    j = float(np.mean(all_j)) if all_j else 0.0
    f = float(np.mean(all_f)) if all_f else 0.0
    report.global_ = {"J": j, "F": f, "JF": (j + f) / 2}
    return report
