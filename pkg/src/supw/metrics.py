"""Binary segmentation metrics: IoU, precision, recall, accuracy.

Dataset summaries use the population standard deviation. When a ratio has
an empty denominator (no predicted and no true foreground) it scores 1.0,
so a correct "no lesion" prediction is rewarded.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .imaging import load_mask

METRIC_NAMES = ("iou", "precision", "recall", "accuracy")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.fn + other.fn, self.tn + other.tn)


def confusion(pred_prob, gt, threshold: float = 0.5) -> Confusion:
    pred = np.asarray(pred_prob)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} dims differ")
    if gt.dtype != bool:
        if not np.isin(gt, (0, 1)).all():
            raise ValueError("ground truth must be binary")
        gt = gt.astype(bool)
    p = pred >= threshold if pred.dtype != bool else pred
    tp = int(np.count_nonzero(p & gt))
    fp = int(np.count_nonzero(p & ~gt))
    fn = int(np.count_nonzero(~p & gt))
    return Confusion(tp, fp, fn, int(gt.size) - tp - fp - fn)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def metrics_from(conf: Confusion) -> dict:
    both_empty = conf.tp + conf.fp + conf.fn == 0
    return {
        "iou": _ratio(conf.tp, conf.tp + conf.fp + conf.fn, both_empty),
        "precision": _ratio(conf.tp, conf.tp + conf.fp, both_empty),
        "recall": _ratio(conf.tp, conf.tp + conf.fn, both_empty),
        "accuracy": (conf.tp + conf.tn) / conf.total if conf.total else 1.0,
    }


def iou(pred_prob, gt, threshold: float = 0.5) -> float:
    return metrics_from(confusion(pred_prob, gt, threshold))["iou"]


@dataclass
class Report:
    per_image: dict
    mean: dict
    std: dict
    meta: dict = field(default_factory=lambda: {"std": "population", "empty_vs_empty": 1.0})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self, title: str = "") -> str:
        """Aligned text mirroring an "IoU Prec. Rec. Acc." results row."""
        head = f"{'':<12}" + "".join(f"{h:>16}" for h in ("IoU", "Prec.", "Rec.", "Acc."))
        row = f"{title or 'mean±σ':<12}" + "".join(
            f"{100 * self.mean[k]:>9.1f}±{100 * self.std[k]:<6.1f}" for k in METRIC_NAMES)
        return head + "\n" + row


def summarize(per_image: dict) -> Report:
    """Aggregate ``{name: metrics_dict}`` in sorted-name order."""
    if not per_image:
        raise ValueError("no pairs")
    names = sorted(per_image)
    mean, std = {}, {}
    for k in METRIC_NAMES:
        vals = np.array([per_image[n][k] for n in names], dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std())
    return Report({n: per_image[n] for n in names}, mean, std)


def evaluate_arrays(preds, gts, names=None, threshold: float = 0.5) -> Report:
    names = names or [f"{i:05d}" for i in range(len(gts))]
    return summarize({n: metrics_from(confusion(p, g, threshold))
                      for n, p, g in zip(names, preds, gts)})


_MASK_EXT = (".png", ".ppm", ".pgm")


def dataset_report(pred_dir, gt_dir, threshold: float = 0.5) -> Report:
    """Compare filename-matched mask files in two directories."""
    gt_files = sorted(f for f in os.listdir(gt_dir) if f.lower().endswith(_MASK_EXT))
    if not gt_files:
        raise ValueError(f"no pairs: {gt_dir} contains no masks")
    per_image = {}
    for name in gt_files:
        pred_path = os.path.join(pred_dir, name)
        if not os.path.exists(pred_path):
            raise FileNotFoundError(f"missing prediction for {name}: {pred_path}")
        gt = load_mask(os.path.join(gt_dir, name))
        pred = load_mask(pred_path)
        per_image[name] = metrics_from(confusion(pred, gt, threshold))
    return summarize(per_image)
