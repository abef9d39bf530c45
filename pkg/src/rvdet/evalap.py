"""Detection evaluation: greedy score-ordered matching, 101-point
interpolated average precision, and range-bucketed reporting.

Matching is per scene and, for bucketed reports, per bucket after
partitioning detections and ground truth by their own center ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import iou_3d, iou_bev
from .postproc import IouKind

DEFAULT_BUCKETS = ((0.0, 30.0), (30.0, 50.0), (50.0, float("inf")))


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    iou_kind: IouKind = IouKind.BEV
    range_buckets: tuple = DEFAULT_BUCKETS

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        bks = tuple((float(lo), float(hi)) for lo, hi in self.range_buckets)
        if any(hi <= lo for lo, hi in bks):
            raise ValueError("every bucket needs lo < hi")
        object.__setattr__(self, "range_buckets", bks)


def match(dets, gts, cfg: EvalConfig | None = None) -> np.ndarray:
    """TP/FP flag per detection, aligned with the input order.

    Detections are processed in descending score (ties by input order); each
    claims the unmatched ground-truth box of highest IoU if that IoU reaches
    the threshold, else counts as a false positive.
    """
    if cfg is None:
        cfg = EvalConfig()
    iou = iou_bev if cfg.iou_kind is IouKind.BEV else iou_3d
    flags = np.zeros(len(dets), dtype=bool)
    if not dets:
        return flags
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    taken = np.zeros(len(gts), dtype=bool)
    for di in order:
        best_iou, best_gt = 0.0, -1
        for gi, g in enumerate(gts):
            if taken[gi]:
                continue
            v = iou(dets[di].box, g)
            if v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt >= 0 and best_iou >= cfg.iou_threshold:
            taken[best_gt] = True
            flags[di] = True
    return flags


def average_precision(flags, num_gt: int) -> float:
    """101-point interpolated AP from TP/FP flags already in descending
    score order. No ground truth: vacuously 1 when there are no detections,
    0 otherwise."""
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return 1.0 if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    recalls = tp / num_gt
    precisions = tp / np.arange(1, flags.size + 1)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    levels = np.arange(101) / 100.0
    idx = np.searchsorted(recalls, levels, side="left")
    vals = np.where(idx < flags.size, env[np.minimum(idx, flags.size - 1)], 0.0)
    return float(np.mean(vals))


@dataclass(frozen=True)
class BucketResult:
    lo: float
    hi: float
    ap: float
    num_gt: int
    num_det: int


@dataclass(frozen=True)
class ApReport:
    overall: float
    buckets: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "overall_ap": self.overall,
            "buckets": [
                {"range": [b.lo, b.hi], "ap": b.ap,
                 "num_gt": b.num_gt, "num_det": b.num_det}
                for b in self.buckets
            ],
        }


def _pooled_ap(scene_pairs, cfg: EvalConfig):
    """Match each scene separately, pool flags across scenes by descending
    score, compute one AP. Returns (ap, num_gt, num_det)."""
    scored = []
    num_gt = 0
    for dets, gts in scene_pairs:
        num_gt += len(gts)
        flags = match(dets, gts, cfg)
        scored.extend((d.score, bool(f)) for d, f in zip(dets, flags))
    scored.sort(key=lambda sf: -sf[0])
    flags = [f for _, f in scored]
    return average_precision(flags, num_gt), num_gt, len(flags)


def _in_bucket(r: float, lo: float, hi: float) -> bool:
    return lo <= r < hi


def bucketed_ap_multi(scene_pairs, cfg: EvalConfig | None = None) -> ApReport:
    """Overall plus per-bucket AP over many (detections, ground-truth)
    scenes. Buckets partition by each object's own center range and are
    matched independently."""
    if cfg is None:
        cfg = EvalConfig()
    scene_pairs = list(scene_pairs)
    overall, _, _ = _pooled_ap(scene_pairs, cfg)
    buckets = []
    for lo, hi in cfg.range_buckets:
        sub = [
            ([d for d in dets if _in_bucket(d.box.center_range, lo, hi)],
             [g for g in gts if _in_bucket(g.center_range, lo, hi)])
            for dets, gts in scene_pairs
        ]
        ap, n_gt, n_det = _pooled_ap(sub, cfg)
        buckets.append(BucketResult(lo, hi, ap, n_gt, n_det))
    return ApReport(overall, tuple(buckets))


def bucketed_ap(dets, gts, cfg: EvalConfig | None = None) -> ApReport:
    """Single-scene bucketed report; see bucketed_ap_multi."""
    return bucketed_ap_multi([(dets, gts)], cfg)
