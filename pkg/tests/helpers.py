"""Shared test utilities: consistent synthetic images, Monte Carlo IoU, and
loop-based reference implementations kept independent of the library's
vectorized code paths."""

from __future__ import annotations

import numpy as np

from rvdet.geom import Box7, bev_corners
from rvdet.postproc import IouKind, Proposal
from rvdet.rimg import (
    CH_AZIMUTH,
    CH_ELONGATION,
    CH_INCLINATION,
    CH_INTENSITY,
    CH_RANGE,
    CH_X,
    CH_Y,
    CH_Z,
    NUM_CHANNELS,
    BeamTable,
    RangeImage,
    column_azimuth,
    normalize_angle,
)
from rvdet import geom


def linear_beams(rows: int, top: float = 0.35, bottom: float = -0.35) -> BeamTable:
    return BeamTable(np.linspace(top, bottom, rows))


def filled_image(height, width, rng, hole_fraction=0.0, r_lo=2.0, r_hi=60.0):
    """Range image with every return on its exact pixel-center direction, so
    the pixel invariants hold by construction. hole_fraction empties a random
    subset of pixels."""
    beams = linear_beams(height)
    r = rng.uniform(r_lo, r_hi, (height, width))
    if hole_fraction > 0.0:
        r[rng.random((height, width)) < hole_fraction] = 0.0
    filled = r > 0.0
    az = np.broadcast_to(column_azimuth(np.arange(width), width), (height, width))
    inc = np.broadcast_to(beams.inclinations[:, None], (height, width))
    ch = np.zeros((NUM_CHANNELS, height, width))
    ch[CH_RANGE] = np.where(filled, r, 0.0)
    ch[CH_INTENSITY] = np.where(filled, rng.random((height, width)), 0.0)
    ch[CH_ELONGATION] = np.where(filled, rng.random((height, width)), 0.0)
    ch[CH_X] = np.where(filled, r * np.cos(inc) * np.cos(az), 0.0)
    ch[CH_Y] = np.where(filled, r * np.cos(inc) * np.sin(az), 0.0)
    ch[CH_Z] = np.where(filled, r * np.sin(inc), 0.0)
    ch[CH_AZIMUTH] = np.where(filled, az, 0.0)
    ch[CH_INCLINATION] = np.where(filled, inc, 0.0)
    return RangeImage(ch, beams)


def random_box(rng, span=6.0, z_span=1.5, dims=(0.8, 5.0)) -> Box7:
    return Box7(
        rng.uniform(-span, span),
        rng.uniform(-span, span),
        rng.uniform(-z_span, z_span),
        rng.uniform(*dims),
        rng.uniform(*dims),
        rng.uniform(*dims),
        rng.uniform(-np.pi, np.pi),
    )


def _in_footprint(pts: np.ndarray, b: Box7) -> np.ndarray:
    d = pts - np.array([b.cx, b.cy])
    c, s = np.cos(b.yaw), np.sin(b.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(lx) <= b.length / 2.0) & (np.abs(ly) <= b.width / 2.0)


def mc_iou_bev(a: Box7, b: Box7, samples: int, rng) -> float:
    """Monte Carlo BEV IoU over the corners' joint bounding rectangle."""
    corners = np.vstack([bev_corners(a), bev_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = lo + rng.random((samples, 2)) * (hi - lo)
    in_a, in_b = _in_footprint(pts, a), _in_footprint(pts, b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def naive_meta_forward(layer, feats, img) -> np.ndarray:
    """Triple-loop reference for metakernel.forward: per pixel, per neighbor
    offset, per channel, with invalid neighbors contributing zero products."""
    from rvdet.metakernel import AggMode, build_meta

    p = {k: t.data for k, t in layer.params.items()}
    h, w = img.height, img.width
    out = np.zeros((h, w, layer.c_out))
    for r in range(h):
        for c in range(w):
            prods = []
            for dr, dc in layer.grid.offsets:
                vec, ok = build_meta(img, (r, c), (dr, dc), layer.meta)
                if not ok:
                    prods.append(np.zeros(layer.c_in))
                    continue
                hid = np.maximum(vec @ p["mlp_w1"] + p["mlp_b1"], 0.0)
                wgt = hid @ p["mlp_w2"] + p["mlp_b2"]
                if layer.relu_weights:
                    wgt = np.maximum(wgt, 0.0)
                prods.append(wgt * feats[r + dr, c + dc])
            if layer.agg_mode is AggMode.CONCAT_FC:
                out[r, c] = np.concatenate(prods) @ p["agg_w"] + p["agg_b"]
            elif layer.agg_mode is AggMode.SUM:
                out[r, c] = np.sum(prods, axis=0)
            else:
                out[r, c] = np.max(prods, axis=0)
    return out


def _fuse_reference(props, members):
    """Same averaging arithmetic as the library's cluster fusion, kept here
    so agreement can be asserted bit for bit."""
    seed = props[members[0]]
    scores = np.array([props[k].score for k in members])
    g = np.array([[props[k].box.cx, props[k].box.cy, props[k].box.cz,
                   props[k].box.length, props[k].box.width, props[k].box.height]
                  for k in members])
    yaws = np.array([props[k].box.yaw for k in members])
    avg = np.sum(scores[:, None] * g, axis=0) / np.sum(scores)
    aligned = np.where(np.cos(yaws - seed.box.yaw) < 0.0, yaws + np.pi, yaws)
    yaw = np.arctan2(np.sum(scores * np.sin(aligned)), np.sum(scores * np.cos(aligned)))
    box = Box7(avg[0], avg[1], avg[2], avg[3], avg[4], avg[5], float(normalize_angle(yaw)))
    return Proposal(box, seed.score)


def exhaustive_wnms(props, cfg):
    """Weighted-NMS reference built on a precomputed all-pairs IoU matrix."""
    iou_fn = geom.iou_bev if cfg.iou_kind is IouKind.BEV else geom.iou_3d
    surv = [i for i, p in enumerate(props) if p.score >= cfg.score_threshold]
    surv.sort(key=lambda i: -props[i].score)  # stable, ties keep input order
    n = len(props)
    iou = np.zeros((n, n))
    for ai in range(len(surv)):
        for bi in range(ai + 1, len(surv)):
            i, j = surv[ai], surv[bi]
            iou[i, j] = iou[j, i] = iou_fn(props[i].box, props[j].box)
    out = []
    remaining = list(surv)
    while remaining:
        seed = remaining[0]
        members = [k for k in remaining if k == seed or iou[seed, k] > cfg.iou_threshold]
        out.append(_fuse_reference(props, members))
        remaining = [k for k in remaining if k not in members]
    return out


def random_proposals(rng, max_count=64, span=4.0):
    """Proposal set with deliberate clumping so clusters actually form."""
    count = int(rng.integers(1, max_count + 1))
    anchors = [random_box(rng, span=span, dims=(1.5, 4.0)) for _ in range(max(1, count // 4))]
    props = []
    for _ in range(count):
        a = anchors[int(rng.integers(0, len(anchors)))]
        jit = rng.normal(0.0, 0.4, 3)
        box = Box7(a.cx + jit[0], a.cy + jit[1], a.cz + 0.1 * jit[2],
                   a.length * rng.uniform(0.9, 1.1), a.width * rng.uniform(0.9, 1.1),
                   a.height * rng.uniform(0.9, 1.1),
                   a.yaw + rng.normal(0.0, 0.15))
        props.append(Proposal(box, float(rng.random())))
    return props
