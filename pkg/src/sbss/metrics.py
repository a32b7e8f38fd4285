"""Confusion matrices, IoU/mIoU and the per-class scale-preference profiler."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .grid import IGNORE, argmax_labels, resize_probmap
from .pipeline import tiled_segment

# top-two IoU gap (as a fraction) below which a class has no clear preferred scale
NO_PREFERENCE_GAP = 0.005


def confusion_matrix(pred, gt, classes: int) -> np.ndarray:
    """C x C counts, rows = ground truth, columns = prediction; IGNORE skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    keep = gt != IGNORE
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if (pred == IGNORE).any():
        raise ValueError("prediction contains the ignore value")
    if p.size and (p.max() >= classes or p.min() < 0):
        raise ValueError(f"prediction holds class {int(p.max())} but only {classes} classes exist")
    if g.size and g.max() >= classes:
        raise ValueError(f"ground truth holds class {int(g.max())} but only {classes} classes exist")
    counts = np.bincount(g * classes + p, minlength=classes * classes)
    return counts.reshape(classes, classes).astype(np.uint64)


def accumulate(cm: np.ndarray, pred, gt) -> np.ndarray:
    return cm + confusion_matrix(pred, gt, cm.shape[0])


def miou(cm: np.ndarray):
    """Per-class IoU (NaN where a class never occurs) and their mean."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(len(tp), np.nan)
    ok = denom > 0
    iou[ok] = tp[ok] / denom[ok]
    mean = float(iou[ok].mean()) if ok.any() else float("nan")
    return iou, mean


@dataclass
class ScalePreferenceTable:
    scales: list
    iou: np.ndarray            # (classes, scales)
    class_names: list = None

    @property
    def classes(self) -> int:
        return self.iou.shape[0]

    def preferred(self):
        """Best scale per class, or None when the class was never observed."""
        out = []
        for row in self.iou:
            out.append(None if np.all(np.isnan(row)) else self.scales[int(np.nanargmax(row))])
        return out

    def no_preference(self):
        flags = []
        for row in self.iou:
            vals = np.sort(row[~np.isnan(row)])[::-1]
            flags.append(len(vals) < 2 or bool(vals[0] - vals[1] < NO_PREFERENCE_GAP))
        return flags

    def rows(self):
        names = self.class_names or [str(c) for c in range(self.classes)]
        pref, flags = self.preferred(), self.no_preference()
        for c in range(self.classes):
            yield names[c], [float(v) for v in self.iou[c]], pref[c], flags[c]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class"] + [f"iou@{s:g}" for s in self.scales] + ["preferred", "no_preference"])
        for name, vals, pref, flag in self.rows():
            w.writerow([name] + [f"{v:.6f}" for v in vals]
                       + ["" if pref is None else f"{pref:g}", int(flag)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(dict(
            scales=list(self.scales),
            classes=[dict(name=n, iou=[None if np.isnan(v) else v for v in vals],
                          preferred=p, no_preference=f)
                     for n, vals, p, f in self.rows()]), indent=1)


def profile_scales(backend, scenes, scales, patch, classes: int, workers: int = 1):
    """Single-scale test at every scale; per-class IoU at the original resolution."""
    if not scales:
        raise ValueError("scales: need at least one scale")
    table = np.empty((classes, len(scales)))
    for j, s in enumerate(scales):
        cm = np.zeros((classes, classes), dtype=np.uint64)
        for image_id, image, gt in scenes:
            probs = tiled_segment(backend, image, s, patch, image_id, workers=workers)
            pred = argmax_labels(resize_probmap(probs, *gt.shape))
            cm = accumulate(cm, pred, gt)
        table[:, j] = miou(cm)[0]
    return ScalePreferenceTable([float(s) for s in scales], table)
