"""Proposal de-duplication: weighted NMS fuses each overlap cluster into a
score-weighted average box; standard NMS keeps only the cluster seed.

Both share the same filtering and greedy clustering, so they pick identical
seeds; only the emitted geometry differs. Proposals scoring below the
threshold are dropped with a strict less-than, so a score exactly at the
threshold survives.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geom import Box7, iou_3d, iou_bev
from .rimg import normalize_angle


class IouKind(Enum):
    BEV = "bev"
    IOU_3D = "3d"


@dataclass(frozen=True)
class Proposal:
    box: Box7
    score: float

    def __post_init__(self):
        s = float(self.score)
        if not np.isfinite(s):
            raise ValueError(f"score must be finite, got {self.score}")
        object.__setattr__(self, "score", s)


@dataclass(frozen=True)
class WnmsConfig:
    score_threshold: float = 0.5
    iou_threshold: float = 0.5
    iou_kind: IouKind = IouKind.BEV

    def __post_init__(self):
        for name in ("score_threshold", "iou_threshold"):
            v = float(getattr(self, name))
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
            object.__setattr__(self, name, v)


def _iou_fn(kind: IouKind):
    return iou_bev if kind is IouKind.BEV else iou_3d


def _survivor_order(props, threshold):
    """Indices of proposals at/above the score threshold, sorted by
    descending score with input order breaking ties."""
    kept = [i for i, p in enumerate(props) if p.score >= threshold]
    scores = np.array([props[i].score for i in kept])
    return [kept[j] for j in np.argsort(-scores, kind="stable")]


def fuse_cluster(props, members) -> Proposal:
    """Score-weighted average of the member boxes; the first member is the
    seed. Yaws are aligned to the seed's (flipped by pi when pointing the
    opposite way) and averaged circularly. Output score is the seed's."""
    seed = props[members[0]]
    scores = np.array([props[k].score for k in members])
    geom = np.array([[props[k].box.cx, props[k].box.cy, props[k].box.cz,
                      props[k].box.length, props[k].box.width, props[k].box.height]
                     for k in members])
    yaws = np.array([props[k].box.yaw for k in members])
    total = np.sum(scores)
    avg = np.sum(scores[:, None] * geom, axis=0) / total
    aligned = np.where(np.cos(yaws - seed.box.yaw) < 0.0, yaws + np.pi, yaws)
    yaw = np.arctan2(np.sum(scores * np.sin(aligned)), np.sum(scores * np.cos(aligned)))
    box = Box7(avg[0], avg[1], avg[2], avg[3], avg[4], avg[5], normalize_angle(yaw))
    return Proposal(box, seed.score)


def weighted_nms(props, cfg: WnmsConfig | None = None):
    """Greedy clustering at IoU > t around the best-scoring survivor, each
    cluster replaced by its score-weighted average box."""
    if cfg is None:
        cfg = WnmsConfig()
    iou = _iou_fn(cfg.iou_kind)
    order = _survivor_order(props, cfg.score_threshold)
    out = []
    while order:
        seed = order[0]
        members = [k for k in order
                   if k == seed or iou(props[seed].box, props[k].box) > cfg.iou_threshold]
        out.append(fuse_cluster(props, members))
        taken = set(members)
        order = [k for k in order if k not in taken]
    return out


def standard_nms(props, cfg: WnmsConfig | None = None):
    """Classic greedy suppression: keep each cluster's seed unchanged."""
    if cfg is None:
        cfg = WnmsConfig()
    iou = _iou_fn(cfg.iou_kind)
    order = _survivor_order(props, cfg.score_threshold)
    out = []
    while order:
        seed = order[0]
        out.append(props[seed])
        order = [k for k in order[1:]
                 if iou(props[seed].box, props[k].box) <= cfg.iou_threshold]
    return out
