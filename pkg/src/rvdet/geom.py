"""Oriented 3D boxes, rotated IoU (BEV and 3D), and point containment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rimg import CartesianPoint, normalize_angle

# intersection polygons with area below this are treated as empty
_SLIVER_AREA = 1e-12


@dataclass(frozen=True)
class Box7:
    """Oriented 3D box: center, dimensions, and yaw about z (heading along length)."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        for name in ("length", "width", "height"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"box {name} must be positive and finite, got {v}")
        if not all(math.isfinite(getattr(self, n)) for n in ("cx", "cy", "cz", "yaw")):
            raise ValueError("box center/yaw must be finite")
        object.__setattr__(self, "yaw", float(normalize_angle(self.yaw)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def bev_area(self) -> float:
        return self.length * self.width

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def center_range(self) -> float:
        """Euclidean norm of the box center."""
        return math.sqrt(self.cx**2 + self.cy**2 + self.cz**2)


def bev_corners(b: Box7) -> np.ndarray:
    """(4, 2) counter-clockwise corners of the yaw-rotated l x w footprint."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    hl, hw = b.length / 2.0, b.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]], dtype=np.float64)
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)
    return local @ rot.T + np.array([b.cx, b.cy])


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a CCW polygon, (N, 2)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex CCW polygon `clip`."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for k in range(n):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        prev = inp[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= 0.0
        for cur in inp:
            cur_in = ex * (cur[1] - ay) - ey * (cur[0] - ax) >= 0.0
            if cur_in != prev_in:
                # intersection of edge prev->cur with the clip line
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (ay - prev[1]) - ey * (ax - prev[0])) / denom
                    out.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(out, dtype=np.float64) if out else np.empty((0, 2))


def bev_intersection_area(a: Box7, b: Box7) -> float:
    """Area of the intersection of the two rotated BEV footprints."""
    # bounding-circle reject: exact, cheap, and common-case for random sets
    half_diag_a = 0.5 * math.hypot(a.length, a.width)
    half_diag_b = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= half_diag_a + half_diag_b:
        return 0.0
    inter = _clip_polygon(bev_corners(a), bev_corners(b))
    area = _polygon_area(inter)
    return 0.0 if area < _SLIVER_AREA else area


def iou_bev(a: Box7, b: Box7) -> float:
    """Rotated-rectangle IoU of the bird's-eye-view footprints, in [0, 1]."""
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.bev_area + b.bev_area - inter
    return inter / union


def iou_3d(a: Box7, b: Box7) -> float:
    """3D IoU: BEV intersection area times the z-interval overlap, over union volume."""
    inter_bev = bev_intersection_area(a, b)
    if inter_bev == 0.0:
        return 0.0
    lo = max(a.cz - a.height / 2.0, b.cz - b.height / 2.0)
    hi = min(a.cz + a.height / 2.0, b.cz + b.height / 2.0)
    dz = max(0.0, hi - lo)
    if dz == 0.0:
        return 0.0
    inter_vol = inter_bev * dz
    union = a.volume + b.volume - inter_vol
    return inter_vol / union


def point_in_box(p: CartesianPoint, b: Box7, eps: float = 1e-9) -> bool:
    """Boundary-inclusive containment test in the box frame.

    `eps` (meters) absorbs rounding so points computed to lie exactly on a
    face stay inside regardless of how they were produced.
    """
    dx, dy, dz = p.x_m - b.cx, p.y_m - b.cy, p.z_m - b.cz
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (
        abs(lx) <= b.length / 2.0 + eps
        and abs(ly) <= b.width / 2.0 + eps
        and abs(dz) <= b.height / 2.0 + eps
    )


def points_in_box_mask(points: np.ndarray, b: Box7, eps: float = 1e-9) -> np.ndarray:
    """Vectorized boundary-inclusive containment for an (N, 3) point array."""
    pts = np.asarray(points, dtype=np.float64)
    d = pts - b.center
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return (
        (np.abs(lx) <= b.length / 2.0 + eps)
        & (np.abs(ly) <= b.width / 2.0 + eps)
        & (np.abs(d[:, 2]) <= b.height / 2.0 + eps)
    )
