"""Segmentation and classification metrics with brute-force oracles.

Boundaries are foreground pixels 4-adjacent to background or to the image
edge. HD95 uses the linear-interpolation percentile over the pooled directed
boundary distances of both masks.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.stats import rankdata

from .core import CLASS_ORDER, MASK_THRESHOLD, NUM_CLASSES, ClassLabel
from .losses import bce_loss, ce_loss

ORACLE_MAX_SIZE = 64
_FOUR = ndimage.generate_binary_structure(2, 1)


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred) > MASK_THRESHOLD
    g = np.asarray(gt) > MASK_THRESHOLD
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def boundary(mask: np.ndarray) -> np.ndarray:
    fg = np.asarray(mask) > MASK_THRESHOLD
    return fg & ~ndimage.binary_erosion(fg, structure=_FOUR, border_value=0)


def dsc(pred, gt) -> float:
    p, g = _binary_pair(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def directed_distances(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Distances from each boundary pixel of one mask to the other mask's boundary.

    Returned in row-major boundary order; both masks must be non-empty.
    """
    bp, bg = boundary(pred), boundary(gt)
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return to_g[bp], to_p[bg]


def hd95(pred, gt, spacing: float = 1.0) -> float:
    p, g = _binary_pair(pred, gt)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return float(math.hypot(*p.shape) * spacing)
    d_pg, d_gp = directed_distances(p, g)
    return float(np.percentile(np.concatenate([d_pg, d_gp]), 95) * spacing)


def hausdorff(pred, gt, spacing: float = 1.0) -> float:
    p, g = _binary_pair(pred, gt)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return float(math.hypot(*p.shape) * spacing)
    d_pg, d_gp = directed_distances(p, g)
    return float(max(d_pg.max(), d_gp.max()) * spacing)


def nsd(pred, gt, tolerance: float = 3.0) -> float:
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    p, g = _binary_pair(pred, gt)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    d_pg, d_gp = directed_distances(p, g)
    hits = np.count_nonzero(d_pg <= tolerance) + np.count_nonzero(d_gp <= tolerance)
    return float(hits / (d_pg.size + d_gp.size))


# ---------------------------------------------------------------------------
# oracle


def _oracle_boundary(mask: np.ndarray) -> list[tuple[int, int]]:
    h, w = mask.shape
    points = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not mask[ni, nj]:
                    points.append((i, j))
                    break
    return points


def oracle_distance_check(mask_a, mask_b) -> dict[str, np.ndarray]:
    """All-pairs boundary distances for masks no larger than 64 x 64."""
    a, b = _binary_pair(mask_a, mask_b)
    if max(a.shape) > ORACLE_MAX_SIZE:
        raise ValueError(f"oracle is limited to {ORACLE_MAX_SIZE}x{ORACLE_MAX_SIZE} masks, got {a.shape}")
    pa = np.array(_oracle_boundary(a), dtype=np.float64).reshape(-1, 2)
    pb = np.array(_oracle_boundary(b), dtype=np.float64).reshape(-1, 2)
    if len(pa) == 0 or len(pb) == 0:
        return {"a_points": pa, "b_points": pb, "a_to_b": np.full(len(pa), np.inf), "b_to_a": np.full(len(pb), np.inf)}
    pair = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return {"a_points": pa, "b_points": pb, "a_to_b": pair.min(axis=1), "b_to_a": pair.min(axis=0)}


def _linear_percentile(values: Sequence[float], q: float) -> float:
    xs = sorted(values)
    pos = (len(xs) - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def hd95_from_table(table: dict[str, np.ndarray], shape: tuple[int, int], spacing: float = 1.0) -> float:
    na, nb = len(table["a_points"]), len(table["b_points"])
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return math.hypot(*shape) * spacing
    return _linear_percentile(list(table["a_to_b"]) + list(table["b_to_a"]), 95) * spacing


def nsd_from_table(table: dict[str, np.ndarray], tolerance: float) -> float:
    na, nb = len(table["a_points"]), len(table["b_points"])
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    hits = sum(d <= tolerance for d in table["a_to_b"]) + sum(d <= tolerance for d in table["b_to_a"])
    return hits / (na + nb)


# ---------------------------------------------------------------------------
# classification


@dataclass
class ClassificationScores:
    accuracy: float
    f1_macro: float
    f1_weighted: float
    auc_ovr_macro: float
    per_class: dict[str, dict[str, float]]
    flags: list[str] = field(default_factory=list)


def _labels_to_index(labels) -> np.ndarray:
    out = []
    for lab in labels:
        try:
            out.append(ClassLabel.parse(lab).index)
        except ValueError:
            raise ValueError(f"unknown class label: {lab!r}") from None
    return np.asarray(out, dtype=int)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Area under the ROC curve with tied scores given averaged ranks."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(probs, labels) -> ClassificationScores:
    probs = np.asarray(probs, dtype=np.float64)
    y = _labels_to_index(labels)
    if len(y) == 0:
        raise ValueError("classification metrics need at least one sample")
    if probs.shape != (len(y), NUM_CLASSES):
        raise ValueError(f"probs must have shape ({len(y)}, {NUM_CLASSES}), got {probs.shape}")
    pred = probs.argmax(axis=1)
    flags: list[str] = []
    per_class: dict[str, dict[str, float]] = {}
    f1s, aucs, support = [], [], []
    for k, label in enumerate(CLASS_ORDER):
        tp = int(np.sum((pred == k) & (y == k)))
        fp = int(np.sum((pred == k) & (y != k)))
        fn = int(np.sum((pred != k) & (y == k)))
        if tp + fp + fn == 0:
            f1 = 0.0
            flags.append(f"f1 undefined for absent class {label.value}; counted as 0")
        else:
            f1 = 2.0 * tp / (2 * tp + fp + fn)
        auc = binary_auc(probs[:, k], y == k)
        if math.isnan(auc):
            flags.append(f"auc undefined for class {label.value} (single-class ground truth)")
        else:
            aucs.append(auc)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        per_class[label.value] = {"precision": precision, "recall": recall, "f1": f1, "auc": auc,
                                  "support": int(np.sum(y == k))}
        f1s.append(f1)
        support.append(int(np.sum(y == k)))
    return ClassificationScores(
        accuracy=float(np.mean(pred == y)),
        f1_macro=float(np.mean(f1s)),
        f1_weighted=float(np.average(f1s, weights=support)) if sum(support) else 0.0,
        auc_ovr_macro=float(np.mean(aucs)) if aucs else float("nan"),
        per_class=per_class,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    accuracy: float
    f1_macro: float
    f1_weighted: float
    auc_ovr_macro: float
    ce: float
    bce: float
    dsc_mean: float
    hd95_mean: float
    nsd_mean: float
    n_samples: int
    spacing: float
    nsd_tolerance: float
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    per_sample: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    OVERALL = ("accuracy", "f1_macro", "f1_weighted", "auc_ovr_macro", "ce", "bce", "dsc_mean",
               "hd95_mean", "nsd_mean", "n_samples", "spacing", "nsd_tolerance")

    def overall(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.OVERALL}

    def to_dict(self) -> dict:
        return {"overall": self.overall(), "per_class": self.per_class, "per_sample": self.per_sample,
                "flags": self.flags}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def to_csv(self) -> str:
        """Long format: scope, key, metric, value."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scope", "key", "metric", "value"])
        for k, v in self.overall().items():
            writer.writerow(["overall", "", k, v])
        for name, values in self.per_class.items():
            for k, v in values.items():
                writer.writerow(["per_class", name, k, v])
        for row in self.per_sample:
            for k, v in row.items():
                if k != "id":
                    writer.writerow(["per_sample", row["id"], k, v])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(**doc["overall"], per_class=doc.get("per_class", {}), per_sample=doc.get("per_sample", []),
                   flags=doc.get("flags", []))


def compute_report(ids: Sequence[str], mask_probs, gt_masks, class_probs, labels,
                   spacing: float = 1.0, nsd_tolerance: float = 3.0,
                   threshold: float = MASK_THRESHOLD) -> MetricsReport:
    """Full metric suite over per-sample predictions (canonical order = ``ids`` order)."""
    mask_probs = np.asarray(mask_probs, dtype=np.float64)
    gt_masks = np.asarray(gt_masks, dtype=np.float64)
    class_probs = np.asarray(class_probs, dtype=np.float64)
    y = _labels_to_index(labels)
    scores = classification_metrics(class_probs, y)
    rows = []
    for i, sid in enumerate(ids):
        binary = (mask_probs[i] > threshold).astype(np.float64)
        rows.append({
            "id": sid,
            "label": CLASS_ORDER[y[i]].value,
            "pred": CLASS_ORDER[int(class_probs[i].argmax())].value,
            **{f"p_{c.value}": float(class_probs[i, k]) for k, c in enumerate(CLASS_ORDER)},
            "dsc": dsc(binary, gt_masks[i]),
            "hd95": hd95(binary, gt_masks[i], spacing),
            "nsd": nsd(binary, gt_masks[i], nsd_tolerance),
            "bce": float(bce_loss(torch.as_tensor(mask_probs[i]), torch.as_tensor(gt_masks[i]))),
            "ce": float(ce_loss(torch.as_tensor(class_probs[i]), torch.as_tensor(y[i]))),
        })
    per_class = scores.per_class
    for label in CLASS_ORDER:
        sel = [r for r in rows if r["label"] == label.value]
        for key in ("dsc", "hd95", "nsd"):
            per_class[label.value][f"{key}_mean"] = float(np.mean([r[key] for r in sel])) if sel else float("nan")
    return MetricsReport(
        accuracy=scores.accuracy,
        f1_macro=scores.f1_macro,
        f1_weighted=scores.f1_weighted,
        auc_ovr_macro=scores.auc_ovr_macro,
        ce=float(np.mean([r["ce"] for r in rows])),
        bce=float(np.mean([r["bce"] for r in rows])),
        dsc_mean=float(np.mean([r["dsc"] for r in rows])),
        hd95_mean=float(np.mean([r["hd95"] for r in rows])),
        nsd_mean=float(np.mean([r["nsd"] for r in rows])),
        n_samples=len(rows),
        spacing=spacing,
        nsd_tolerance=nsd_tolerance,
        per_class=per_class,
        per_sample=rows,
        flags=scores.flags,
    )
