"""Evaluation metrics for segmentation and registration."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_CROSS = ndimage.generate_binary_structure(2, 1)


class UndefinedMetricError(ValueError):
    pass


def dice_hard(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask (or the image)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def hausdorff_mm(a, b, spacing=(1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between the 4-connected boundaries, in mm."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if not a.any() or not b.any():
        raise UndefinedMetricError("Hausdorff distance is undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(a)) * sp
    pb = np.argwhere(boundary(b)) * sp
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class SenPre:
    sensitivity: float
    precision: float
    sensitivity_undefined: bool = False
    precision_undefined: bool = False

    def __iter__(self):
        return iter((self.sensitivity, self.precision))


def sensitivity_precision(pred, gold) -> SenPre:
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    tp = int(np.logical_and(pred, gold).sum())
    fn = int(np.logical_and(~pred, gold).sum())
    fp = int(np.logical_and(pred, ~gold).sum())
    sen_undef = tp + fn == 0
    pre_undef = tp + fp == 0
    sen = 0.0 if sen_undef else tp / (tp + fn)
    pre = 0.0 if pre_undef else tp / (tp + fp)
    return SenPre(sen, pre, sen_undef, pre_undef)


def eval_registration(warped_src_label, tgt_label, spacing=(1.0, 1.0)) -> dict:
    """Dice and HD between a warped source mask and the target mask."""
    out = {"dice": dice_hard(warped_src_label, tgt_label)}
    try:
        out["hd"] = hausdorff_mm(warped_src_label, tgt_label, spacing)
    except UndefinedMetricError:
        out["hd"] = math.nan
    return out


def displacement_norms(sets, H: int, W: int) -> np.ndarray:
    """``sqrt((dx/H)^2 + (dy/W)^2)`` for every control point of every set."""
    if not sets:
        return np.zeros(0)
    arr = np.concatenate([np.asarray(getattr(s, "deltas", s), dtype=np.float64).reshape(-1, 2) for s in sets])
    return np.hypot(arr[:, 0] / H, arr[:, 1] / W)


def displacement_stats(sets, H: int, W: int) -> dict:
    norms = displacement_norms(sets, H, W)
    if norms.size == 0:
        return {"median": 0.0, "q1": 0.0, "q3": 0.0, "max": 0.0, "count": 0}
    q1, med, q3 = np.percentile(norms, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "max": float(norms.max()), "count": int(norms.size)}


SEG_CLASSES = ("scar", "edema")
METRIC_NAMES = ("dice", "hd_mm", "sensitivity", "precision")
CSV_SCHEMA = "evalreport.v1"


def evaluate_segmentation(pred, gold, spacing=(1.0, 1.0)) -> dict:
    """Per-class metrics for one binary mask pair, with undefined values as NaN."""
    sp = sensitivity_precision(pred, gold)
    try:
        hd = hausdorff_mm(pred, gold, spacing)
    except UndefinedMetricError:
        hd = math.nan
    return {
        "dice": dice_hard(pred, gold),
        "hd_mm": hd,
        "sensitivity": sp.sensitivity,
        "precision": sp.precision,
    }


@dataclass
class EvalReport:
    """Per-sample rows plus ``mean (stdev)`` aggregates."""

    rows: list = field(default_factory=list)
    displacement: dict = field(default_factory=dict)

    def add(self, sample_id: str, values: dict):
        self.rows.append({"sample": sample_id, **values})

    def columns(self) -> list:
        cols = []
        for r in self.rows:
            for k in r:
                if k != "sample" and k not in cols:
                    cols.append(k)
        return cols

    def aggregate(self) -> dict:
        agg = {}
        for col in self.columns():
            vals = np.array([r.get(col, math.nan) for r in self.rows], dtype=np.float64)
            ok = vals[np.isfinite(vals)]
            agg[col] = {
                "mean": float(ok.mean()) if ok.size else math.nan,
                "std": float(ok.std()) if ok.size else math.nan,
                "n": int(ok.size),
                "missing": int(vals.size - ok.size),
            }
        return agg

    def to_json(self, path):
        payload = {"schema": CSV_SCHEMA, "rows": self.rows, "aggregate": self.aggregate(),
                   "displacement": self.displacement}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)

    def to_csv(self, path):
        cols = self.columns()
        agg = self.aggregate()
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema={CSV_SCHEMA}\n")
            writer = csv.writer(fh)
            writer.writerow(["sample", *cols])
            for r in self.rows:
                writer.writerow([r["sample"], *[_fmt(r.get(c, math.nan)) for c in cols]])
            writer.writerow(["mean (stdev)", *[f"{agg[c]['mean']:.4f} ({agg[c]['std']:.4f})" for c in cols]])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v
