"""Regression targets in the azimuth-local frame and the training losses.

Each point gets a local frame whose x-axis points along the point's azimuth;
box offsets expressed there are invariant under rigid rotation of the whole
scene about the sensor axis. Classification uses an IoU-aware focal-style
loss, regression a per-pixel SmoothL1 weighted so every box counts equally
regardless of how many pixels it owns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad
from .assign import LabelGrid
from .geom import Box7
from .grad import ShapeError, Tensor
from .rimg import CartesianPoint, normalize_angle

P_CLAMP = 1e-7


class DegenerateAzimuth(ValueError):
    """Raised for points on the z-axis, where azimuth is undefined."""


@dataclass(frozen=True)
class TargetVector:
    """Rotated center offsets, log dimensions, and heading as (cos, sin)."""

    ox: float
    oy: float
    oz: float
    log_l: float
    log_w: float
    log_h: float
    cos_phi: float
    sin_phi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.ox, self.oy, self.oz, self.log_l, self.log_w,
                         self.log_h, self.cos_phi, self.sin_phi])

    @classmethod
    def from_array(cls, arr) -> "TargetVector":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (8,):
            raise ShapeError(f"target vector needs 8 components, got shape {arr.shape}")
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class VflConfig:
    alpha: float = 0.75
    gamma: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


def _azimuth_of(point) -> float:
    x, y = float(point[0]), float(point[1])
    if x == 0.0 and y == 0.0:
        raise DegenerateAzimuth("point lies on the z-axis; azimuth undefined")
    return float(np.arctan2(y, x))


def encode(point: CartesianPoint, box: Box7) -> TargetVector:
    """Express `box` relative to `point` in the point's azimuth-local frame."""
    p = point.as_array() if isinstance(point, CartesianPoint) else np.asarray(point, dtype=np.float64)
    alpha = _azimuth_of(p)
    ca, sa = np.cos(alpha), np.sin(alpha)
    d = box.center - p
    # z-rotation by -alpha: rows (cos a, sin a, 0), (-sin a, cos a, 0), (0, 0, 1)
    ox = ca * d[0] + sa * d[1]
    oy = -sa * d[0] + ca * d[1]
    phi = normalize_angle(box.yaw - alpha)
    return TargetVector(float(ox), float(oy), float(d[2]),
                        float(np.log(box.length)), float(np.log(box.width)),
                        float(np.log(box.height)),
                        float(np.cos(phi)), float(np.sin(phi)))


def decode(point: CartesianPoint, t: TargetVector) -> Box7:
    """Inverse of encode; (cos_phi, sin_phi) need not be normalized."""
    p = point.as_array() if isinstance(point, CartesianPoint) else np.asarray(point, dtype=np.float64)
    alpha = _azimuth_of(p)
    ca, sa = np.cos(alpha), np.sin(alpha)
    cx = p[0] + ca * t.ox - sa * t.oy
    cy = p[1] + sa * t.ox + ca * t.oy
    yaw = normalize_angle(np.arctan2(t.sin_phi, t.cos_phi) + alpha)
    return Box7(float(cx), float(cy), float(p[2] + t.oz),
                float(np.exp(t.log_l)), float(np.exp(t.log_w)),
                float(np.exp(t.log_h)), float(yaw))


def encode_batch(points, boxes_per_point) -> np.ndarray:
    """Vectorized encode: (M, 3) points against per-point boxes given as an
    (M, 7) array of (cx, cy, cz, l, w, h, yaw). Returns (M, 8)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bxs = np.asarray(boxes_per_point, dtype=np.float64).reshape(-1, 7)
    if len(pts) != len(bxs):
        raise ShapeError(f"{len(pts)} points vs {len(bxs)} boxes")
    if np.any((pts[:, 0] == 0.0) & (pts[:, 1] == 0.0)):
        raise DegenerateAzimuth("point lies on the z-axis; azimuth undefined")
    alpha = np.arctan2(pts[:, 1], pts[:, 0])
    ca, sa = np.cos(alpha), np.sin(alpha)
    d = bxs[:, 0:3] - pts
    out = np.empty((len(pts), 8))
    out[:, 0] = ca * d[:, 0] + sa * d[:, 1]
    out[:, 1] = -sa * d[:, 0] + ca * d[:, 1]
    out[:, 2] = d[:, 2]
    out[:, 3:6] = np.log(bxs[:, 3:6])
    phi = normalize_angle(bxs[:, 6] - alpha)
    out[:, 6] = np.cos(phi)
    out[:, 7] = np.sin(phi)
    return out


def decode_batch(points, targets) -> np.ndarray:
    """Vectorized decode: (M, 3) points and (M, 8) target rows to an (M, 7)
    array of (cx, cy, cz, l, w, h, yaw). (cos, sin) rows need not be
    normalized; yaws come out normalized to (-pi, pi]."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 8)
    if len(pts) != len(t):
        raise ShapeError(f"{len(pts)} points vs {len(t)} target rows")
    if np.any((pts[:, 0] == 0.0) & (pts[:, 1] == 0.0)):
        raise DegenerateAzimuth("point lies on the z-axis; azimuth undefined")
    alpha = np.arctan2(pts[:, 1], pts[:, 0])
    ca, sa = np.cos(alpha), np.sin(alpha)
    out = np.empty((len(pts), 7))
    out[:, 0] = pts[:, 0] + ca * t[:, 0] - sa * t[:, 1]
    out[:, 1] = pts[:, 1] + sa * t[:, 0] + ca * t[:, 1]
    out[:, 2] = pts[:, 2] + t[:, 2]
    out[:, 3:6] = np.exp(t[:, 3:6])
    out[:, 6] = normalize_angle(np.arctan2(t[:, 7], t[:, 6]) + alpha)
    return out


def vfl(p: float, q: float, cfg: VflConfig | None = None) -> float:
    """IoU-aware classification loss for one prediction p with target q."""
    if cfg is None:
        cfg = VflConfig()
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"target q must be in [0, 1], got {q}")
    p = min(max(float(p), P_CLAMP), 1.0 - P_CLAMP)
    if q > 0.0:
        return -q * (q * np.log(p) + (1.0 - q) * np.log1p(-p))
    return -cfg.alpha * p ** cfg.gamma * np.log1p(-p)


def cls_loss(pred_scores, iou_targets, valid_mask, cfg: VflConfig | None = None) -> Tensor:
    """Mean vfl over valid pixels; differentiable in pred_scores.

    pred_scores are probabilities (already squashed), iou_targets the per-pixel
    q values (0 for negatives), valid_mask marks non-empty pixels. No valid
    pixels gives loss 0.
    """
    if cfg is None:
        cfg = VflConfig()
    p = pred_scores if isinstance(pred_scores, Tensor) else Tensor(pred_scores)
    q = np.asarray(iou_targets, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    if p.data.shape != q.shape or q.shape != valid.shape:
        raise ShapeError(
            f"shape mismatch: scores {p.data.shape}, targets {q.shape}, mask {valid.shape}"
        )
    if np.any((q < 0) | (q > 1)):
        raise ValueError("iou_targets must lie in [0, 1]")
    m = int(np.count_nonzero(valid))
    if m == 0:
        return Tensor(0.0)

    n = q.size
    pf = grad.clip(grad.reshape(p, (n,)), P_CLAMP, 1.0 - P_CLAMP)
    qf, vf = q.ravel(), valid.ravel()
    log_p = grad.log(pf)
    log_1mp = grad.log(grad.add(grad.mul(pf, -1.0), 1.0))
    pos = vf & (qf > 0.0)
    neg = vf & (qf <= 0.0)
    # q > 0: -q*(q*log p + (1-q)*log(1-p)); q = 0: -alpha*p^gamma*log(1-p)
    pos_term = grad.add(grad.mul(log_p, np.where(pos, -qf * qf, 0.0)),
                        grad.mul(log_1mp, np.where(pos, -qf * (1.0 - qf), 0.0)))
    neg_term = grad.mul(grad.mul(grad.power(pf, cfg.gamma), log_1mp),
                        np.where(neg, -cfg.alpha, 0.0))
    return grad.mul(grad.tsum(grad.add(pos_term, neg_term)), 1.0 / m)


def reg_loss(preds, labels: LabelGrid, gts, points) -> Tensor:
    """SmoothL1 over the 8 target components of every foreground pixel,
    each pixel weighted 1/n (n = owner box's pixel count), summed and divided
    by the number of boxes. Differentiable in preds.

    preds: (H, W, 8) Tensor or array; points: (H, W, 3) pixel coordinates.
    """
    p = preds if isinstance(preds, Tensor) else Tensor(preds)
    pts = np.asarray(points, dtype=np.float64)
    h, w = labels.shape
    if p.data.shape != (h, w, 8) or pts.shape != (h, w, 3):
        raise ShapeError(
            f"expected preds {(h, w, 8)} and points {(h, w, 3)}, "
            f"got {p.data.shape} and {pts.shape}"
        )
    n_boxes = len(gts)
    if n_boxes == 0:
        return Tensor(0.0)
    owner = labels.box_index.ravel()
    fg = np.where(owner >= 0)[0]
    if fg.size == 0:
        return Tensor(0.0)

    own = owner[fg]
    box_arr = np.array([[b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw]
                        for b in gts])
    tgt = encode_batch(pts.reshape(-1, 3)[fg], box_arr[own])
    counts = np.bincount(own, minlength=n_boxes)
    pix_w = 1.0 / (n_boxes * counts[own])

    pred_fg = grad.gather(grad.reshape(p, (h * w, 8)), fg)
    diff = grad.add(pred_fg, -tgt)
    per_comp = grad.smooth_l1(diff)
    return grad.tsum(grad.mul(per_comp, pix_w[:, None]))
