"""Panoptic-style semantic inference, mIoU, continual aggregates and proposal average recall."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import BACKGROUND, TaskSchedule
from .errors import ShapeError

log = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5
OVERLAP_FRACTION = 0.5


def panoptic_inference(scores, masks, class_probs, alpha: float = 0.8, class_ids: Sequence[int] | None = None) -> np.ndarray:
    """Semantic label map from proposals.

    scores [N], masks [N, H, W] in [0, 1], class_probs [N, K] (rows of dropped proposals
    are ignored). Returns int64 [H, W] with ``BACKGROUND`` where no kept proposal wins.
    """
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(masks, dtype=np.float64)
    p = np.asarray(class_probs, dtype=np.float64).reshape(len(s), -1)
    out = np.full(m.shape[1:], BACKGROUND, dtype=np.int64)
    keep = np.flatnonzero(s > alpha)
    if len(keep) == 0 or p.shape[1] == 0:
        return out
    ids = np.arange(p.shape[1]) if class_ids is None else np.asarray(class_ids)
    seg_score = s[keep] * p[keep].max(1)
    seg_label = ids[p[keep].argmax(1)]
    region = m[keep] >= MASK_THRESHOLD
    weighted = np.where(region, seg_score[:, None, None] * m[keep], -np.inf)
    winner = weighted.argmax(0)
    covered = region.any(0)
    for k in range(len(keep)):
        won = covered & (winner == k)
        area = region[k].sum()
        if area == 0 or won.sum() / area < OVERLAP_FRACTION:
            continue
        out[won] = seg_label[k]
    return out


@dataclass
class MetricReport:
    step: int
    per_class_iou: dict[int, float]  # IoU in [0, 1]
    background_iou: float | None = None
    base: float | None = None  # aggregates in percent
    inc: float | None = None
    all: float | None = None
    avg: float | None = None
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "background_iou": self.background_iou,
            "base": self.base,
            "inc": self.inc,
            "all": self.all,
            "avg": self.avg,
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            step=d["step"],
            per_class_iou={int(k): v for k, v in d["per_class_iou"].items()},
            background_iou=d.get("background_iou"),
            base=d.get("base"),
            inc=d.get("inc"),
            all=d.get("all"),
            avg=d.get("avg"),
            history=list(d.get("history", [])),
        )


def confusion_counts(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], labels: Sequence[int]) -> np.ndarray:
    """Confusion matrix over ``labels`` (gt rows, prediction columns); other values are ignored."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")
    labels = list(labels)
    lut_size = max(labels) - min(labels) + 1
    lut = np.full(lut_size, -1, dtype=np.int64)
    lut[np.asarray(labels) - min(labels)] = np.arange(len(labels))
    k = len(labels)
    conf = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"prediction shape {p.shape} != GT shape {g.shape}")
        def index(x):
            off = x - min(labels)
            valid = (off >= 0) & (off < lut_size)
            idx = np.full(x.shape, -1, dtype=np.int64)
            idx[valid] = lut[off[valid]]
            return idx
        pi, gi = index(p).ravel(), index(g).ravel()
        ok = (pi >= 0) & (gi >= 0)
        conf += np.bincount(gi[ok] * k + pi[ok], minlength=k * k).reshape(k, k)
    return conf


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], classes: Sequence[int], step: int = 1, include_background: bool = False) -> MetricReport:
    """Dataset-level IoU per class; ``all`` is the mean over evaluated classes present in GT or prediction.

    Pixels of classes outside ``classes`` are scored as background on both sides.
    """
    classes = sorted(int(c) for c in classes)
    labels = [BACKGROUND] + classes
    allowed = np.asarray(labels)
    def to_eval(x):
        x = np.asarray(x)
        return np.where(np.isin(x, allowed), x, BACKGROUND)
    conf = confusion_counts([to_eval(p) for p in preds], [to_eval(g) for g in gts], labels)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    ious = {}
    bg = None
    for i, lab in enumerate(labels):
        if union[i] == 0:
            continue
        if lab == BACKGROUND:
            bg = float(tp[i] / union[i])
        else:
            ious[lab] = float(tp[i] / union[i])
    vals = list(ious.values()) + ([bg] if include_background and bg is not None else [])
    report = MetricReport(step=step, per_class_iou=ious, background_iou=bg)
    report.all = 100.0 * float(np.mean(vals)) if vals else None
    return report


def _mean_over(ious: dict[int, float], classes: Sequence[int]) -> float | None:
    vals = [ious[c] for c in classes if c in ious]
    return 100.0 * float(np.mean(vals)) if vals else None


def continual_metrics(step_reports: Sequence[MetricReport], schedule: TaskSchedule) -> MetricReport:
    """Final-step base/inc/all plus ``avg``, the mean of every step's ``all``."""
    if not step_reports:
        raise ValueError("no step reports")
    final = step_reports[-1]
    t = final.step
    base_classes = schedule.classes_at(1)
    inc_classes = [c for c in schedule.classes_upto(t) if c not in base_classes]
    history = [r.all for r in step_reports]
    done = [h for h in history if h is not None]
    return MetricReport(
        step=t,
        per_class_iou=dict(final.per_class_iou),
        background_iou=final.background_iou,
        base=_mean_over(final.per_class_iou, base_classes),
        inc=_mean_over(final.per_class_iou, inc_classes) if inc_classes else None,
        all=final.all,
        avg=float(np.mean(done)) if done else None,
        history=history,
    )


def mask_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between boolean masks a [P, H, W] and b [G, H, W]."""
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def recall_counts(masks, scores, gt_masks, iou_threshold: float = 0.5, score_min: float = 0.0) -> tuple[int, int]:
    """(matched GT, total GT) for one image under greedy descending-score assignment."""
    gt = np.asarray(gt_masks, dtype=bool)
    if len(gt) == 0:
        return 0, 0
    s = np.asarray(scores, dtype=np.float64)
    cand = np.flatnonzero(s > score_min)
    cand = cand[np.argsort(-s[cand], kind="stable")]
    props = np.asarray(masks)[cand] >= MASK_THRESHOLD
    iou = mask_iou(props, gt) if len(cand) else np.zeros((0, len(gt)))
    taken = np.zeros(len(gt), dtype=bool)
    for row in iou:
        row = np.where(taken | (row < iou_threshold), -1.0, row)
        j = int(row.argmax()) if len(row) else -1
        if j >= 0 and row[j] >= iou_threshold:
            taken[j] = True
    return int(taken.sum()), len(gt)


def average_recall(proposals: Sequence, gt_masks: Sequence, iou_threshold: float = 0.5, score_min: float = 0.0) -> float:
    """Dataset recall of GT masks; ``proposals`` holds (masks [N, H, W], scores [N]) per image.

    Images without GT masks are skipped.
    """
    hit = total = 0
    for (m, s), g in zip(proposals, gt_masks):
        if len(g) == 0:
            log.debug("image without GT masks skipped in average recall")
            continue
        a, b = recall_counts(m, s, g, iou_threshold, score_min)
        hit += a
        total += b
    return hit / total if total else math.nan


# serialization -------------------------------------------------------------

CSV_COLUMNS = ("step", "base", "inc", "all", "avg")


def _fmt(v):
    return "" if v is None else repr(float(v))


def metrics_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.step, _fmt(r.base), _fmt(r.inc), _fmt(r.all), _fmt(r.avg)])
    return buf.getvalue()


def per_class_csv(reports: Sequence[MetricReport], classes: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "bg"] + [f"c{c}" for c in classes] + ["base", "inc", "all"])
    for r in reports:
        iou = [r.per_class_iou.get(c) for c in classes]
        w.writerow([r.step, _fmt(None if r.background_iou is None else 100 * r.background_iou)]
                   + [_fmt(None if v is None else 100 * v) for v in iou]
                   + [_fmt(r.base), _fmt(r.inc), _fmt(r.all)])
    return buf.getvalue()


def format_table(report: MetricReport, schedule: TaskSchedule) -> str:
    """Console table with the base / inc / all / avg layout of a continual benchmark row."""
    base = schedule.classes_at(1)
    t = report.step
    seen = schedule.classes_upto(t)
    inc = [c for c in seen if c not in base]
    base_h = f"{base[0] + 1}-{base[-1] + 1}"
    inc_h = f"{inc[0] + 1}-{inc[-1] + 1}" if inc else "-"
    def cell(v):
        return "  n/a " if v is None else f"{v:6.2f}"
    head = f"{schedule.name} ({schedule.steps} tasks)  step {t}\n"
    head += f"{base_h:>8} {inc_h:>8} {'all':>8} {'avg':>8}\n"
    return head + f"{cell(report.base):>8} {cell(report.inc):>8} {cell(report.all):>8} {cell(report.avg):>8}\n"


def dumps_reports(reports: Sequence[MetricReport], final: MetricReport) -> str:
    return json.dumps({"steps": [r.to_dict() for r in reports], "final": final.to_dict()}, indent=2, sort_keys=True)
