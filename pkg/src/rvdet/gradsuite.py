"""Finite-difference verification of every differentiable building block:
the meta-kernel layer across selector/aggregation combinations and both
losses. Shared by the test suite and the `gradcheck` CLI command.

The layer output is piecewise linear in the feature tensor, and feature
probes never move the weight-MLP pre-activations (those depend only on
image geometry), so the only kinks a probe can cross are max-pool
selection switches. Each check draws seeded random instances and keeps
the first whose smallest top-2 product gap comfortably exceeds the probe
step and whose smallest gradient entry is large enough for the central
difference to resolve.
"""

from __future__ import annotations

import numpy as np

from . import grad, metakernel, synth
from .assign import label_pixels
from .geom import Box7
from .grad import Tensor, grad_check
from .metakernel import AggMode, MetaInput, MetaKernelLayer
from .rimg import RangeImage
from .targets import cls_loss, reg_loss

THRESHOLD = 1e-6
EPS = 1e-5
KINK_MARGIN = 1e-4
GRAD_FLOOR = 1e-3

CHECK_SELECTORS = (MetaInput.REL_XYZ, MetaInput.REL_RANGE, MetaInput.REL_XYZ_RANGE)
CHECK_AGG_MODES = (AggMode.CONCAT_FC, AggMode.MAXPOOL, AggMode.SUM)


def _small_image(seed: int = 0, holes: bool = True, width: int = 8,
                 rows: int = 8) -> RangeImage:
    """Small ray-cast image with a box in view; optionally punch extra empty
    pixels so neighbor invalidation is exercised."""
    spec = synth.SceneSpec(
        seed=seed,
        boxes=((Box7(8.0, 0.0, 0.9, 4.0, 2.0, 1.8, 0.4), synth.VEHICLE_LIKE),),
        width=width,
        beam_table=synth.default_beam_table(rows, 2.0, -20.0),
    )
    img, _ = synth.raycast(spec)
    if holes:
        ch = img.channels.copy()
        rng = np.random.default_rng(seed + 1)
        filled = np.argwhere(ch[0] > 0.0)
        for r, c in filled[rng.permutation(len(filled))[:3]]:
            ch[:, r, c] = 0.0
        img = RangeImage(ch, img.beam_table)
    return img


def _maxpool_gap(layer: MetaKernelLayer, img: RangeImage, feats: np.ndarray):
    """(smallest top-2 product gap the max pool sees, largest |weight|);
    (inf, 0) for other modes. All invalid neighbors share the constant 0
    branch, so a tie among them is no kink and they collapse into a single
    candidate."""
    if layer.agg_mode is not AggMode.MAXPOOL:
        return np.inf, 0.0
    idx, valid = metakernel._neighbor_tables(img, layer.grid)
    metas = metakernel._meta_table(img, layer.grid, layer.meta, idx, valid)
    k, n, _ = metas.shape
    pre = metas.reshape(k * n, -1) @ layer.params["mlp_w1"].data + layer.params["mlp_b1"].data
    hidden = np.maximum(pre, 0.0)
    w = hidden @ layer.params["mlp_w2"].data + layer.params["mlp_b2"].data
    flat = feats.reshape(n, layer.c_in)
    prods = w.reshape(k, n, layer.c_in) * flat[idx]
    vp = np.where(valid[:, :, None], prods, -np.inf)
    top2 = np.sort(vp, axis=0)[-2:, :, :]
    zero_cand = np.where(valid.all(axis=0), -np.inf, 0.0)[:, None]
    cand = np.stack([top2[1], top2[0],
                     np.broadcast_to(zero_cand, top2[0].shape)], axis=0)
    cand = np.sort(cand, axis=0)[::-1]
    pair_gap = cand[0] - cand[1]
    finite = np.isfinite(pair_gap)
    if not finite.any():
        return np.inf, float(np.max(np.abs(w)))
    return float(np.min(pair_gap[finite])), float(np.max(np.abs(w)))


def _layer_instance(meta: MetaInput, agg: AggMode, seed: int):
    """Layer, image, features, and probe direction for one check, reseeded
    until the max-pool gap clears KINK_MARGIN and every feature-gradient
    entry clears GRAD_FLOOR."""
    c_in = 4
    c_out = 3 if agg is AggMode.CONCAT_FC else c_in
    for attempt in range(50):
        s = seed + 1000 * attempt
        rng = np.random.default_rng(s)
        img = _small_image(s)
        layer = MetaKernelLayer.create(c_in, c_out, meta=meta, agg_mode=agg,
                                       rng=np.random.default_rng(s + 7))
        for name, p in layer.params.items():
            if name in ("mlp_b1", "mlp_b2", "agg_b"):
                p.data[...] = rng.normal(0.2, 0.3, p.data.shape)
        feats = rng.normal(0.0, 1.0, (img.height, img.width, c_in))
        probe = rng.normal(0.0, 1.0, (img.height, img.width, c_out))
        x = Tensor(feats.copy(), requires_grad=True)
        loss = grad.tsum(grad.mul(metakernel.forward(layer, x, img), probe))
        loss.backward()
        # features of empty pixels are used nowhere: their gradient is an
        # exact zero on both sides of the comparison, which is safe; the
        # floor guards the small-but-nonzero entries
        live = x.grad[x.grad != 0.0]
        floor = float(np.min(np.abs(live))) if live.size else 0.0
        gap, wmax = _maxpool_gap(layer, img, feats)
        # a feature bump of EPS moves each product by at most wmax * EPS
        if gap > max(KINK_MARGIN, 10.0 * EPS * wmax) and floor > GRAD_FLOOR:
            return layer, img, feats, probe
    raise RuntimeError(f"no well-conditioned instance found for {meta}/{agg}")


def check_metakernel(meta: MetaInput, agg: AggMode, seed: int = 0) -> float:
    """Max relative gradient error w.r.t. the feature tensor for one layer
    configuration, parameters held fixed."""
    layer, img, feats, probe = _layer_instance(meta, agg, seed)

    def f(t):
        return grad.tsum(grad.mul(metakernel.forward(layer, t, img), probe))

    x = Tensor(feats.copy(), requires_grad=True)
    return grad_check(f, x, EPS)


def check_cls_loss(seed: int = 0) -> float:
    """Gradient of the classification loss w.r.t. the score grid, mixing
    positive, negative, and invalid pixels."""
    rng = np.random.default_rng(seed)
    h, w = 4, 5
    scores = rng.uniform(0.05, 0.95, (h, w))
    q = np.where(rng.uniform(size=(h, w)) < 0.4, rng.uniform(0.1, 0.9, (h, w)), 0.0)
    valid = rng.uniform(size=(h, w)) < 0.8
    x = Tensor(scores, requires_grad=True)
    return grad_check(lambda t: cls_loss(t, q, valid), x, EPS)


def check_reg_loss(seed: int = 0) -> float:
    """Gradient of the regression loss w.r.t. the prediction grid on a
    ray-cast scene with real foreground labels."""
    spec = synth.SceneSpec(
        seed=seed,
        boxes=((Box7(8.0, 0.0, 0.9, 4.0, 2.0, 1.8, 0.4), synth.VEHICLE_LIKE),),
        width=16,
        beam_table=synth.default_beam_table(6, 2.0, -20.0),
    )
    img, gts = synth.raycast(spec)
    labels = label_pixels(img, gts)
    if not labels.foreground_mask.any():
        raise RuntimeError("check scene has no foreground pixels")
    box_arr = np.array([[b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw]
                        for b in gts])
    from .targets import encode_batch
    pts = img.points().reshape(-1, 3)
    own = labels.box_index.ravel()
    for attempt in range(50):
        rng = np.random.default_rng(seed + 31 * attempt)
        preds = rng.normal(0.0, 0.4, (img.height, img.width, 8))
        # keep every |pred - target| off the SmoothL1 switch at 1
        fg = np.where(own >= 0)[0]
        tgt = encode_batch(pts[fg], box_arr[own[fg]])
        d = np.abs(preds.reshape(-1, 8)[fg] - tgt)
        if np.min(np.abs(d - 1.0)) > KINK_MARGIN:
            x = Tensor(preds, requires_grad=True)
            return grad_check(lambda t: reg_loss(t, labels, gts, img.points()), x, EPS)
    raise RuntimeError("no kink-free regression instance found")


def check_vfl(seed: int = 0) -> float:
    """Gradient of the pointwise loss itself: one positive and one negative
    prediction through the tensor path."""
    rng = np.random.default_rng(seed)
    scores = rng.uniform(0.2, 0.8, (1, 2))
    q = np.array([[0.7, 0.0]])
    valid = np.ones((1, 2), dtype=bool)
    x = Tensor(scores, requires_grad=True)
    return grad_check(lambda t: cls_loss(t, q, valid), x, EPS)


def run_suite(report=print):
    """Run every check; returns (all_passed, list of (name, max_rel_error))."""
    rows = []
    for meta in CHECK_SELECTORS:
        for agg in CHECK_AGG_MODES:
            err = check_metakernel(meta, agg)
            rows.append((f"metakernel {meta.value}/{agg.value}", err))
    rows.append(("vfl", check_vfl()))
    rows.append(("cls_loss", check_cls_loss()))
    rows.append(("reg_loss", check_reg_loss()))
    ok = True
    for name, err in rows:
        passed = err < THRESHOLD
        ok &= passed
        if report is not None:
            report(f"{'PASS' if passed else 'FAIL'}  {name:40s} max rel err {err:.3e}")
    return ok, rows
