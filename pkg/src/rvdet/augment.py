"""Range-view augmentation: azimuth rotation as a cyclic column shift,
left-right flip as column reversal, and object copy-paste guarded by a
range test so pasted pixels never hide behind existing closer returns.

All ops return new images that satisfy every range-image invariant; the
azimuth channel and the x/y channels are recomputed wherever a pixel's
column changes, while z, range, intensity, elongation, and the beam row
stay verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Box7, points_in_box_mask
from .rimg import (
    CH_AZIMUTH,
    CH_INCLINATION,
    CH_RANGE,
    CH_X,
    CH_Y,
    NUM_CHANNELS,
    RangeImage,
    column_azimuth,
    normalize_angle,
)

PASTE_ACCEPT_FRACTION = 0.5


@dataclass(frozen=True)
class PasteCandidate:
    """Donor pixels carved from some source image, to be pasted at their
    original rows after a horizontal (azimuth) shift.

    pixels: tuple of (row, col, values) with values the 8 channel values;
    every donor pixel must hold a return. Pasting assumes the donor and the
    paste target share the same beam table.
    """

    pixels: tuple
    box: Box7
    azimuth_shift_cols: int

    def __post_init__(self):
        pix = []
        for row, col, values in self.pixels:
            vals = np.asarray(values, dtype=np.float64)
            if vals.shape != (NUM_CHANNELS,):
                raise ValueError(f"donor pixel needs {NUM_CHANNELS} channel values")
            if vals[CH_RANGE] <= 0.0:
                raise ValueError("donor pixels must be non-empty")
            vals.setflags(write=False)
            pix.append((int(row), int(col), vals))
        object.__setattr__(self, "pixels", tuple(pix))
        object.__setattr__(self, "azimuth_shift_cols", int(self.azimuth_shift_cols))


def _refresh_azimuth_xy(ch: np.ndarray) -> None:
    """Recompute azimuth from column index and x/y from (range, azimuth,
    inclination) on filled pixels; zero them elsewhere. In place."""
    h, w = ch.shape[1:]
    filled = ch[CH_RANGE] > 0.0
    az = np.broadcast_to(column_azimuth(np.arange(w), w), (h, w))
    ch[CH_AZIMUTH] = np.where(filled, az, 0.0)
    rc = ch[CH_RANGE] * np.cos(ch[CH_INCLINATION])
    ch[CH_X] = np.where(filled, rc * np.cos(az), 0.0)
    ch[CH_Y] = np.where(filled, rc * np.sin(az), 0.0)


def _rotate_boxes(boxes, delta: float):
    c, s = np.cos(delta), np.sin(delta)
    return [
        Box7(c * b.cx - s * b.cy, s * b.cx + c * b.cy, b.cz,
             b.length, b.width, b.height, float(normalize_angle(b.yaw + delta)))
        for b in boxes
    ]


def rotate(img: RangeImage, boxes, k_cols: int):
    """Cyclic column shift by k columns = scene rotation by k*(2*pi/width)
    about the sensor axis. Returns (image, boxes)."""
    k = int(k_cols) % img.width
    ch = np.roll(img.channels, k, axis=2).copy()
    _refresh_azimuth_xy(ch)
    return RangeImage(ch, img.beam_table), _rotate_boxes(boxes, k * 2.0 * np.pi / img.width)


def flip(img: RangeImage, boxes, axis: str = "y"):
    """Mirror the scene. axis="y" reflects across the x-z plane (column
    order reversed, y and azimuth negated); axis="x" reflects across the
    y-z plane, which is the y-flip composed with a half-revolution and
    needs an even width. Returns (image, boxes)."""
    if axis == "x":
        if img.width % 2 != 0:
            raise ValueError("x-axis flip needs an even image width")
        fimg, fboxes = flip(img, boxes, axis="y")
        return rotate(fimg, fboxes, img.width // 2)
    if axis != "y":
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    ch = img.channels[:, :, ::-1].copy()
    _refresh_azimuth_xy(ch)
    out_boxes = [
        Box7(b.cx, -b.cy, b.cz, b.length, b.width, b.height,
             float(normalize_angle(-b.yaw)))
        for b in boxes
    ]
    return RangeImage(ch, img.beam_table), out_boxes


def copy_paste(target: RangeImage, target_boxes, cand: PasteCandidate):
    """Paste the candidate's pixels into `target`, columns shifted by
    cand.azimuth_shift_cols (wrapping).

    Each shifted pixel passes the range test iff its target pixel is empty
    or the donor return is strictly closer. The paste is accepted iff at
    least half the donor pixels pass; on acceptance the passing pixels are
    written (azimuth/x/y recomputed for their new columns), the donor box is
    rotated by the shift angle and appended. Returns (image, boxes, accepted).
    """
    h, w = target.height, target.width
    rows = np.array([p[0] for p in cand.pixels], dtype=np.int64)
    cols = np.array([p[1] for p in cand.pixels], dtype=np.int64)
    vals = np.array([p[2] for p in cand.pixels])
    if rows.size == 0:
        return target, list(target_boxes), False
    if rows.min() < 0 or rows.max() >= h:
        raise ValueError("candidate rows fall outside the target image")
    cols = (cols + cand.azimuth_shift_cols) % w

    tgt_rng = target.ranges[rows, cols]
    passes = (tgt_rng <= 0.0) | (vals[:, CH_RANGE] < tgt_rng)
    if np.count_nonzero(passes) < PASTE_ACCEPT_FRACTION * rows.size:
        return target, list(target_boxes), False

    ch = target.channels.copy()
    pr, pc, pv = rows[passes], cols[passes], vals[passes]
    az = column_azimuth(pc, w)
    rc = pv[:, CH_RANGE] * np.cos(pv[:, CH_INCLINATION])
    pv = pv.copy()
    pv[:, CH_AZIMUTH] = az
    pv[:, CH_X] = rc * np.cos(az)
    pv[:, CH_Y] = rc * np.sin(az)
    ch[:, pr, pc] = pv.T
    delta = cand.azimuth_shift_cols * 2.0 * np.pi / w
    boxes = list(target_boxes) + _rotate_boxes([cand.box], delta)
    return RangeImage(ch, target.beam_table), boxes, True


def carve_candidate(img: RangeImage, box: Box7, azimuth_shift_cols: int = 0) -> PasteCandidate:
    """Collect every filled pixel whose point lies inside `box` into a
    PasteCandidate. Raises ValueError when the box owns no pixels."""
    pts = img.points().reshape(-1, 3)
    filled = (img.ranges > 0.0).ravel()
    inside = points_in_box_mask(pts, box) & filled
    if not inside.any():
        raise ValueError("box contains no image points; nothing to carve")
    ch = img.channels
    pix = []
    for flat in np.where(inside)[0]:
        r, c = divmod(int(flat), img.width)
        pix.append((r, c, ch[:, r, c].copy()))
    return PasteCandidate(tuple(pix), box, azimuth_shift_cols)
