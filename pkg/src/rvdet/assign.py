"""Range-bucketed pixel labeling: boxes land in a range layer by the norm of
their center, and each filled pixel takes foreground ownership from the box
containing its point (nearest box center breaks containment ties).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Box7, points_in_box_mask
from .rimg import CH_X, CH_Y, CH_Z, RangeImage

BACKGROUND = -1


def _default_boundaries():
    return (15.0, 30.0)


@dataclass(frozen=True)
class RcpConfig:
    """Layer boundaries partition [0, inf) left-inclusively: with boundaries
    (b0, b1) the layers are [0, b0), [b0, b1), [b1, inf)."""

    boundaries: tuple = field(default_factory=_default_boundaries)

    def __post_init__(self):
        bs = tuple(float(b) for b in self.boundaries)
        if any(b <= 0 for b in bs) or any(b2 <= b1 for b1, b2 in zip(bs, bs[1:])):
            raise ValueError("boundaries must be positive and strictly increasing")
        object.__setattr__(self, "boundaries", bs)

    @property
    def num_layers(self) -> int:
        return len(self.boundaries) + 1


def assign_layer(distance: float, config: RcpConfig) -> int:
    """Layer index of a center distance; values past the last boundary clamp
    into the final layer."""
    if distance < 0 or not np.isfinite(distance):
        raise ValueError(f"distance must be finite and non-negative, got {distance}")
    return int(np.searchsorted(config.boundaries, distance, side="right"))


@dataclass(frozen=True)
class PixelLabel:
    box_index: int          # BACKGROUND (-1) for background / empty pixels
    layer: int              # layer of the owning box; -1 for background

    @property
    def is_foreground(self) -> bool:
        return self.box_index >= 0


class LabelGrid:
    """Per-pixel ownership for one image: (H, W) box_index and layer arrays,
    BACKGROUND/-1 outside any box."""

    def __init__(self, box_index, layer):
        bi = np.asarray(box_index, dtype=np.int64)
        ly = np.asarray(layer, dtype=np.int64)
        if bi.shape != ly.shape or bi.ndim != 2:
            raise ValueError("box_index and layer must be matching 2-d arrays")
        self.box_index = bi
        self.layer = ly

    @property
    def shape(self):
        return self.box_index.shape

    @property
    def foreground_mask(self):
        return self.box_index >= 0

    def at(self, row: int, col: int) -> PixelLabel:
        return PixelLabel(int(self.box_index[row, col]), int(self.layer[row, col]))

    def pixel_count(self, box_index: int) -> int:
        """Number of pixels owned by one box."""
        return int(np.count_nonzero(self.box_index == box_index))


def label_pixels(img: RangeImage, boxes, config: RcpConfig | None = None) -> LabelGrid:
    """Label every filled pixel with the index of the box containing its
    point. A point inside several boxes goes to the box whose center is
    closest (euclidean, 3-d); ties keep the lowest box index. Empty pixels
    and points in no box are background.
    """
    if config is None:
        config = RcpConfig()
    h, w = img.height, img.width
    box_index = np.full((h, w), BACKGROUND, dtype=np.int64)
    layer = np.full((h, w), BACKGROUND, dtype=np.int64)
    if not boxes:
        return LabelGrid(box_index, layer)

    ch = img.channels
    pts = np.stack([ch[CH_X], ch[CH_Y], ch[CH_Z]], axis=-1).reshape(-1, 3)
    filled = (img.ranges > 0.0).ravel()
    best = np.full(h * w, np.inf)
    owner = np.full(h * w, BACKGROUND, dtype=np.int64)
    for bi, box in enumerate(boxes):
        inside = points_in_box_mask(pts, box) & filled
        if not inside.any():
            continue
        d = np.linalg.norm(pts[inside] - box.center, axis=1)
        sel = np.where(inside)[0]
        better = d < best[sel]
        take = sel[better]
        best[take] = d[better]
        owner[take] = bi

    owner = owner.reshape(h, w)
    box_index[:] = owner
    layers = np.array([assign_layer(b.center_range, config) for b in boxes])
    fg = owner >= 0
    layer[fg] = layers[owner[fg]]
    return LabelGrid(box_index, layer)
