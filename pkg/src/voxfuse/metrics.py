"""Joint training objective and IoU bookkeeping.

Label convention: index ``EMPTY`` (0) is free space and is excluded from
mIoU; ``IGNORE`` (255) marks voxels that are neither scored nor supervised.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voxfuse.core.functional import cross_entropy, lovasz_softmax, softmax
from voxfuse.core.tensor import Tensor, reshape, transpose
from voxfuse.daga import DagaConfig, daga_loss
from voxfuse.errors import ContractError, DegenerateEvaluationError, ShapeError

EMPTY = 0
IGNORE = 255


@dataclass
class OccupancyLabels:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 3:
            raise ShapeError(f"labels must be X x Y x Z, got {self.labels.shape}")
        bad = (self.labels != IGNORE) & ((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.any():
            raise ContractError("label values outside the class range")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def classes_present(self) -> set[int]:
        vals = np.unique(self.labels)
        return {int(v) for v in vals if v not in (EMPTY, IGNORE)}


@dataclass
class ObjectiveConfig:
    lambda_daga: float = 0.2
    daga: DagaConfig = field(default_factory=DagaConfig)
    lovasz_classes: str = "present"
    ignore_index: int = IGNORE

    def to_dict(self) -> dict:
        return {"lambda_daga": self.lambda_daga, "daga": self.daga.to_dict(),
                "lovasz_classes": self.lovasz_classes, "ignore_index": self.ignore_index}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveConfig":
        return cls(d.get("lambda_daga", 0.2), DagaConfig.from_dict(d.get("daga", {})),
                   d.get("lovasz_classes", "present"), d.get("ignore_index", IGNORE))


@dataclass
class LossBreakdown:
    total: Tensor
    ce: Tensor
    lovasz: Tensor
    daga: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"total": self.total.item(), "ce": self.ce.item(),
                "lovasz": self.lovasz.item(), "daga": self.daga.item()}


def flatten_logits(logits: Tensor) -> Tensor:
    """``Cls x X x Y x Z`` -> ``N x Cls``."""
    return transpose(reshape(logits, (logits.shape[0], -1)))


def total_loss(logits: Tensor, gt: OccupancyLabels, v_cam=None, v_pts=None,
               cfg: ObjectiveConfig | None = None) -> LossBreakdown:
    """Cross-entropy + Lovasz-softmax + ``lambda_daga`` * DAGA.

    The DAGA term is zero when either branch volume is missing.
    """
    cfg = cfg if cfg is not None else ObjectiveConfig()
    if logits.ndim != 4 or logits.shape[1:] != gt.shape:
        raise ShapeError(f"logits {logits.shape} do not match labels {gt.shape}")
    if logits.shape[0] != gt.num_classes:
        raise ShapeError(f"{logits.shape[0]} logit channels for {gt.num_classes} classes")
    flat = flatten_logits(logits)
    labels = gt.labels.reshape(-1)
    ce = cross_entropy(flat, labels, ignore_index=cfg.ignore_index)
    keep = np.nonzero(labels != cfg.ignore_index)[0]
    probs = softmax(flat[keep] if len(keep) < len(labels) else flat, axis=1)
    lov = lovasz_softmax(probs, labels[keep], classes=cfg.lovasz_classes)
    if v_cam is not None and v_pts is not None and cfg.lambda_daga != 0:
        daga = daga_loss(v_cam, v_pts, cfg.daga)
    else:
        daga = Tensor(np.array(0.0))
    total = ce + lov + daga * cfg.lambda_daga
    return LossBreakdown(total, ce, lov, daga)


class ConfusionMatrix:
    """Per-class TP/FP/FN plus binary occupied-vs-empty counters."""

    def __init__(self, num_classes: int, empty_index: int = EMPTY):
        self.num_classes = num_classes
        self.empty_index = empty_index
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)
        self.geo_tp = 0
        self.geo_fp = 0
        self.geo_fn = 0
        self.total = 0

    def copy(self) -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.empty_index)
        out.merge(self)
        return out

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        labels = gt.labels if isinstance(gt, OccupancyLabels) else np.asarray(gt, dtype=np.int64)
        if pred.shape != labels.shape:
            raise ShapeError(f"prediction {pred.shape} vs labels {labels.shape}")
        keep = labels != IGNORE
        p, g = pred[keep], labels[keep]
        k = self.num_classes
        if p.size and (p.min() < 0 or p.max() >= k or g.min() < 0 or g.max() >= k):
            raise ContractError("label out of range")
        conf = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        diag = np.diag(conf)
        self.tp += diag
        self.fp += conf.sum(axis=0) - diag
        self.fn += conf.sum(axis=1) - diag
        occ_p, occ_g = p != self.empty_index, g != self.empty_index
        self.geo_tp += int(np.sum(occ_p & occ_g))
        self.geo_fp += int(np.sum(occ_p & ~occ_g))
        self.geo_fn += int(np.sum(~occ_p & occ_g))
        self.total += int(keep.sum())
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices with different class counts")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.geo_tp += other.geo_tp
        self.geo_fp += other.geo_fp
        self.geo_fn += other.geo_fn
        self.total += other.total
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self.copy().merge(other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and np.array_equal(self.tp, other.tp) and np.array_equal(self.fp, other.fp)
                and np.array_equal(self.fn, other.fn)
                and (self.geo_tp, self.geo_fp, self.geo_fn, self.total)
                == (other.geo_tp, other.geo_fp, other.geo_fn, other.total))

    def semantic_classes(self) -> list[int]:
        return [c for c in range(self.num_classes) if c != self.empty_index]

    def to_dict(self) -> dict:
        return {"tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist(),
                "geo": [self.geo_tp, self.geo_fp, self.geo_fn], "total": self.total}


def iou_ratio(tp: int, fp: int, fn: int) -> float:
    """``TP / (TP + FP + FN)``; NaN marks an undefined (empty) class."""
    denom = tp + fp + fn
    return tp / denom if denom else math.nan


def iou(cm: ConfusionMatrix, c: int) -> float:
    return iou_ratio(int(cm.tp[c]), int(cm.fp[c]), int(cm.fn[c]))


def geometric_iou(cm: ConfusionMatrix) -> float:
    return iou_ratio(cm.geo_tp, cm.geo_fp, cm.geo_fn)


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over semantic classes whose IoU is defined."""
    values = [iou(cm, c) for c in cm.semantic_classes()]
    defined = [v for v in values if not math.isnan(v)]
    if not defined:
        raise DegenerateEvaluationError("no semantic class has a defined IoU")
    return sum(defined) / len(defined)


def metrics_rows(cm: ConfusionMatrix, class_names=None) -> list[dict]:
    rows = []
    for c in cm.semantic_classes():
        name = class_names[c] if class_names is not None else str(c)
        value = iou(cm, c)
        rows.append({"class": name, "tp": int(cm.tp[c]), "fp": int(cm.fp[c]),
                     "fn": int(cm.fn[c]), "iou": "" if math.isnan(value) else value})
    return rows


def write_metrics_csv(path, cm: ConfusionMatrix, class_names=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["class", "tp", "fp", "fn", "iou"])
        writer.writeheader()
        writer.writerows(metrics_rows(cm, class_names))


def metrics_summary(cm: ConfusionMatrix, losses: dict | None = None) -> dict:
    excluded = [c for c in cm.semantic_classes() if math.isnan(iou(cm, c))]
    try:
        m = miou(cm)
    except DegenerateEvaluationError:
        m = None
    geo = geometric_iou(cm)
    out = {"iou": None if math.isnan(geo) else geo, "miou": m, "undefined_classes": excluded}
    if losses is not None:
        out["losses"] = losses
    return out


def write_metrics_json(path, cm: ConfusionMatrix, losses: dict | None = None) -> None:
    Path(path).write_text(json.dumps(metrics_summary(cm, losses), indent=2, sort_keys=True))
