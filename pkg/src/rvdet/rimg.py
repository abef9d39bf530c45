"""Range image codec: spherical <-> Cartesian math, projection and decoding.

A range image is an H x W grid where each row shares a beam inclination and
each column shares an azimuth. Eight channels are stored per pixel, in this
fixed order:

    [range, intensity, elongation, x, y, z, azimuth, inclination]

Empty pixels are marked by range <= 0 and carry zeros in all channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CH_RANGE = 0
CH_INTENSITY = 1
CH_ELONGATION = 2
CH_X = 3
CH_Y = 4
CH_Z = 5
CH_AZIMUTH = 6
CH_INCLINATION = 7
NUM_CHANNELS = 8

CHANNEL_NAMES = (
    "range", "intensity", "elongation", "x", "y", "z", "azimuth", "inclination",
)


class DegenerateInput(ValueError):
    """Raised when a geometric conversion has no defined answer (e.g. zero-norm point)."""


def normalize_angle(a):
    """Normalize an angle (scalar or array) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def column_azimuth(col, width: int):
    """Center azimuth of column(s) `col` in a width-`width` image.

    Column 0 sits at the -pi end; azimuth increases left to right, so the
    centers span -pi + pi/W ... pi - pi/W.
    """
    return -np.pi + (np.asarray(col, dtype=np.float64) + 0.5) * (2.0 * np.pi / width)


@dataclass(frozen=True)
class SphericalCoord:
    """A LiDAR return direction: range (m), azimuth and inclination (rad)."""

    range_m: float
    azimuth_rad: float
    inclination_rad: float

    def __post_init__(self):
        if self.range_m < 0:
            raise ValueError(f"range must be >= 0, got {self.range_m}")
        if not (-np.pi / 2 <= self.inclination_rad <= np.pi / 2):
            raise ValueError(f"inclination out of [-pi/2, pi/2]: {self.inclination_rad}")
        object.__setattr__(self, "azimuth_rad", float(normalize_angle(self.azimuth_rad)))


@dataclass(frozen=True)
class CartesianPoint:
    x_m: float
    y_m: float
    z_m: float

    def __post_init__(self):
        if not (math.isfinite(self.x_m) and math.isfinite(self.y_m) and math.isfinite(self.z_m)):
            raise ValueError(f"non-finite point ({self.x_m}, {self.y_m}, {self.z_m})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_m, self.y_m, self.z_m], dtype=np.float64)


class BeamTable:
    """Per-row beam inclinations, strictly decreasing from the top row down."""

    def __init__(self, inclinations):
        arr = np.asarray(inclinations, dtype=np.float64).copy()
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("beam table must be a non-empty 1-D sequence")
        if not np.all(np.diff(arr) < 0):
            raise ValueError("beam inclinations must be strictly decreasing top to bottom")
        arr.flags.writeable = False
        self._inclinations = arr

    @property
    def inclinations(self) -> np.ndarray:
        return self._inclinations

    def __len__(self) -> int:
        return int(self._inclinations.size)

    def __getitem__(self, i) -> float:
        return float(self._inclinations[i])

    def rows_for(self, inclination) -> np.ndarray:
        """Nearest-beam row index for inclination(s); ties go to the lower row index."""
        beams = self._inclinations
        if len(beams) == 1:
            return np.zeros(np.shape(inclination), dtype=np.int64)
        mids = 0.5 * (beams[:-1] + beams[1:])  # decreasing
        # row = count of midpoints strictly greater than phi
        return np.searchsorted(-mids, -np.asarray(inclination, dtype=np.float64), side="left")

    def __eq__(self, other):
        return isinstance(other, BeamTable) and np.array_equal(
            self._inclinations, other._inclinations
        )


def spherical_to_cartesian(s: SphericalCoord) -> CartesianPoint:
    """x = r cos(phi) cos(theta), y = r cos(phi) sin(theta), z = r sin(phi)."""
    r, th, ph = s.range_m, s.azimuth_rad, s.inclination_rad
    return CartesianPoint(
        r * math.cos(ph) * math.cos(th),
        r * math.cos(ph) * math.sin(th),
        r * math.sin(ph),
    )


def cartesian_to_spherical(p: CartesianPoint) -> SphericalCoord:
    """Inverse spherical decode; raises DegenerateInput on the zero-norm point."""
    r = math.sqrt(p.x_m**2 + p.y_m**2 + p.z_m**2)
    if r == 0.0:
        raise DegenerateInput("cannot convert zero-norm point to spherical coordinates")
    return SphericalCoord(r, math.atan2(p.y_m, p.x_m), math.asin(min(1.0, max(-1.0, p.z_m / r))))


def columns_for(azimuth, width: int) -> np.ndarray:
    """Nearest-center column index for azimuth(s) in (-pi, pi].

    Ties (azimuth exactly on a column boundary) go to the lower of the two
    adjacent column indices; the boundary at +/-pi ties columns W-1 and 0 and
    therefore resolves to 0.
    """
    az = normalize_angle(azimuth)
    step = 2.0 * np.pi / width
    u = (az + np.pi) / step  # in (0, W]
    col = np.floor(u).astype(np.int64)
    on_boundary = u == col  # exact multiples of the column width
    # interior boundaries take the lower neighbor; the seam's neighbors are
    # W-1 and 0, so it resolves to 0
    col = np.where(on_boundary, np.where(col == width, 0, col - 1), col)
    return np.mod(col, width)


class RangeImage:
    """H x W range image with the 8 fixed channels and its beam table.

    `channels` is an (8, H, W) float64 array. The constructor checks shapes
    only; `validate()` checks the full pixel-level invariants.
    """

    def __init__(self, channels: np.ndarray, beam_table: BeamTable):
        ch = np.asarray(channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[0] != NUM_CHANNELS:
            raise ValueError(f"channels must have shape (8, H, W), got {ch.shape}")
        if ch.shape[1] != len(beam_table):
            raise ValueError(
                f"beam table has {len(beam_table)} rows but image height is {ch.shape[1]}"
            )
        ch = ch.copy()
        ch.flags.writeable = False
        self._channels = ch
        self.beam_table = beam_table

    @property
    def channels(self) -> np.ndarray:
        return self._channels

    @property
    def height(self) -> int:
        return self._channels.shape[1]

    @property
    def width(self) -> int:
        return self._channels.shape[2]

    def channel(self, idx: int) -> np.ndarray:
        return self._channels[idx]

    @property
    def ranges(self) -> np.ndarray:
        return self._channels[CH_RANGE]

    def empty_mask(self) -> np.ndarray:
        """(H, W) bool mask, True where the pixel holds no return."""
        return self._channels[CH_RANGE] <= 0.0

    def points(self) -> np.ndarray:
        """(H, W, 3) view of the x/y/z channels, stacked."""
        return np.stack(
            [self._channels[CH_X], self._channels[CH_Y], self._channels[CH_Z]], axis=-1
        )

    def validate(self, tol: float = 1e-9) -> None:
        """Raise AssertionError if any range-image invariant is violated."""
        ch = self._channels
        empty = self.empty_mask()
        if np.any(ch[:, empty] != 0.0):
            raise AssertionError("empty pixels must be all-zero in every channel")

        filled = ~empty
        if not np.any(filled):
            return
        az = np.broadcast_to(column_azimuth(np.arange(self.width), self.width), ch.shape[1:])
        inc = np.broadcast_to(self.beam_table.inclinations[:, None], ch.shape[1:])
        if np.max(np.abs(ch[CH_AZIMUTH][filled] - az[filled])) > tol:
            raise AssertionError("azimuth channel must equal column-center azimuths")
        if np.max(np.abs(ch[CH_INCLINATION][filled] - inc[filled])) > tol:
            raise AssertionError("inclination channel must equal the beam table per row")
        r = ch[CH_RANGE]
        x = r * np.cos(inc) * np.cos(az)
        y = r * np.cos(inc) * np.sin(az)
        z = r * np.sin(inc)
        err = np.max(
            np.abs(
                np.stack([ch[CH_X] - x, ch[CH_Y] - y, ch[CH_Z] - z], axis=0)[:, filled]
            )
        )
        if err > tol:
            raise AssertionError(f"x/y/z channels inconsistent with spherical decode ({err:.3e})")


def project(points, beams: BeamTable, width: int) -> RangeImage:
    """Project (CartesianPoint, intensity, elongation) triples into a range image.

    Each point goes to the nearest-beam row and the nearest-center column;
    when several points fall in one pixel the smallest-range one wins (ties
    by input order). Stored x/y/z are re-derived from the pixel-center
    direction, so only points exactly on a pixel center round-trip exactly.
    """
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    height = len(beams)
    channels = np.zeros((NUM_CHANNELS, height, width), dtype=np.float64)
    if len(points) == 0:
        return RangeImage(channels, beams)

    xyz = np.array([[p.x_m, p.y_m, p.z_m] for p, _, _ in points], dtype=np.float64)
    inten = np.array([i for _, i, _ in points], dtype=np.float64)
    elong = np.array([e for _, _, e in points], dtype=np.float64)

    r = np.linalg.norm(xyz, axis=1)
    if np.any(r == 0.0):
        raise DegenerateInput("zero-norm point has no projection direction")
    theta = np.arctan2(xyz[:, 1], xyz[:, 0])
    phi = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))

    rows = beams.rows_for(phi)
    cols = columns_for(theta, width)
    pix = rows * width + cols

    # smallest range wins per pixel; ties keep the earliest input point
    order = np.lexsort((np.arange(len(points)), r, pix))
    pix_sorted = pix[order]
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[keep]

    wr, wc = rows[win], cols[win]
    az = column_azimuth(wc, width)
    inc = beams.inclinations[wr]
    rng = r[win]
    channels[CH_RANGE, wr, wc] = rng
    channels[CH_INTENSITY, wr, wc] = inten[win]
    channels[CH_ELONGATION, wr, wc] = elong[win]
    channels[CH_X, wr, wc] = rng * np.cos(inc) * np.cos(az)
    channels[CH_Y, wr, wc] = rng * np.cos(inc) * np.sin(az)
    channels[CH_Z, wr, wc] = rng * np.sin(inc)
    channels[CH_AZIMUTH, wr, wc] = az
    channels[CH_INCLINATION, wr, wc] = inc
    return RangeImage(channels, beams)


def decode(img: RangeImage):
    """One (CartesianPoint, intensity, elongation) per non-empty pixel, row-major."""
    ch = img.channels
    rows, cols = np.nonzero(~img.empty_mask())
    return [
        (
            CartesianPoint(ch[CH_X, i, j], ch[CH_Y, i, j], ch[CH_Z, i, j]),
            float(ch[CH_INTENSITY, i, j]),
            float(ch[CH_ELONGATION, i, j]),
        )
        for i, j in zip(rows, cols)
    ]
