"""Toy end-to-end detector: the 8 image channels, scaled to comparable
magnitudes, feed one meta-kernel layer, a tanh, and two per-pixel affine
heads (classification through a sigmoid, regression to the 8 target
components). Plain gradient descent; everything is seeded and deterministic.
"""

from __future__ import annotations

import numpy as np

from . import grad, metakernel, targets
from .assign import LabelGrid, RcpConfig, label_pixels
from .geom import Box7, iou_3d
from .grad import Tensor
from .metakernel import AggMode, MetaInput, MetaKernelLayer, SamplingGrid
from .postproc import Proposal, WnmsConfig, standard_nms, weighted_nms
from .rimg import RangeImage
from .targets import VflConfig, cls_loss, decode_batch, reg_loss

# per-channel multipliers bringing range/xyz (tens of meters) and angles
# (radians) to roughly unit scale for the shared MLP trunk
FEATURE_SCALE = np.array([0.05, 1.0, 1.0, 0.05, 0.05, 0.2, 1.0 / np.pi, 2.0])

# meta offsets reach the weight MLP in meters; shrink its first layer so
# hidden pre-activations start near unit scale
META_W1_SCALE = 0.1

# exp() guard on predicted log-dimensions before boxes are materialized
LOG_DIM_CLAMP = 6.0

# classification term weight in the training objective; the score loss is
# averaged over every valid pixel, so its per-pixel gradients are hundreds of
# times smaller than the box term's and need rebalancing
CLS_WEIGHT = 50.0

# shrink the output-affine init the same way; it feeds a tanh and starting
# partly saturated costs precision the heads never recover
AGG_W_SCALE = 0.6

# default sampling pattern for the trunk: a dilated 3 x 5 stencil whose
# column reach covers most of a nearby object's azimuth span at toy
# resolution, where a dense 3 x 3 window sees only a sliver of it
TRUNK_GRID = tuple((r, c) for r in (-2, 0, 2) for c in (-6, -3, 0, 3, 6))


def _tanh(x):
    # composed from the sigmoid primitive; bounded trunk features keep
    # fixed-step descent stable when depth edges produce huge meta offsets
    return grad.add(grad.mul(grad.sigmoid(grad.mul(x, 2.0)), 2.0), -1.0)


class ToyModel:
    """Meta-kernel trunk plus classification and regression heads."""

    def __init__(self, c_hidden: int = 16, meta: MetaInput = MetaInput.REL_XYZ,
                 agg_mode: AggMode = AggMode.CONCAT_FC, relu_weights: bool = False,
                 seed: int = 0, grid: tuple | None = None):
        self.c_hidden = int(c_hidden)
        self.grid_offsets = tuple(
            (int(r), int(c)) for r, c in (TRUNK_GRID if grid is None else grid))
        rng = np.random.default_rng(seed)
        self.layer = MetaKernelLayer.create(
            8, self.c_hidden, meta=meta, agg_mode=agg_mode,
            grid=SamplingGrid(self.grid_offsets), relu_weights=relu_weights, rng=rng)
        self.layer.params["mlp_w1"].data *= META_W1_SCALE
        if "agg_w" in self.layer.params:
            self.layer.params["agg_w"].data *= AGG_W_SCALE
        c = self.c_hidden
        # zero-initialized heads: the trunk sees no gradient until the heads
        # have grown, which keeps fixed-step descent stable from the start
        self.cls_w = Tensor(np.zeros((c, 1)), requires_grad=True)
        self.cls_b = Tensor(np.zeros(1), requires_grad=True)
        self.reg_w = Tensor(np.zeros((c, 8)), requires_grad=True)
        self.reg_b = Tensor(np.zeros(8), requires_grad=True)

    def parameters(self) -> dict:
        out = {f"mk.{k}": v for k, v in self.layer.parameters().items()}
        out.update({"cls_w": self.cls_w, "cls_b": self.cls_b,
                    "reg_w": self.reg_w, "reg_b": self.reg_b})
        return out

    def param_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_param_arrays(self, arrays: dict) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            missing = set(params) - set(arrays)
            extra = set(arrays) - set(params)
            raise grad.ContractError(
                f"checkpoint does not match model: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for k, t in params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise grad.ContractError(
                    f"parameter {k}: checkpoint shape {arr.shape} != model {t.data.shape}")
            t.data[...] = arr

    def config_dict(self) -> dict:
        return {
            "c_hidden": self.c_hidden,
            "meta": self.layer.meta.value,
            "agg_mode": self.layer.agg_mode.value,
            "relu_weights": self.layer.relu_weights,
            "grid": [list(o) for o in self.grid_offsets],
            "feature_scale": FEATURE_SCALE.tolist(),
        }

    def forward(self, img: RangeImage):
        """Returns (scores, reg): (H, W) sigmoid probabilities and the
        (H, W, 8) raw regression grid."""
        h, w = img.height, img.width
        feats = np.moveaxis(img.channels, 0, -1) * FEATURE_SCALE
        trunk = _tanh(metakernel.forward(self.layer, Tensor(feats), img))
        flat = grad.reshape(trunk, (h * w, self.c_hidden))
        # the score branch reads the trunk without feeding gradients back:
        # early on every quality target is zero, and letting that blanket
        # suppression steer the trunk collapses it before the box branch can
        # shape it
        flat_ro = Tensor(flat.data)
        logits = grad.affine(flat_ro, self.cls_w, self.cls_b)
        scores = grad.reshape(grad.sigmoid(logits), (h, w))
        reg = grad.reshape(grad.affine(flat, self.reg_w, self.reg_b), (h, w, 8))
        return scores, reg


def _boxes_from_rows(rows: np.ndarray):
    # callers clamp log-dims before decode, so dims are positive and finite
    return [Box7(*r) for r in rows]


def iou_targets_grid(img: RangeImage, labels: LabelGrid, gts, reg_data: np.ndarray) -> np.ndarray:
    """Per-pixel classification target q: volume IoU between the decoded
    prediction and the owning ground-truth box on foreground pixels, 0
    elsewhere. Pure numpy on detached predictions."""
    h, w = labels.shape
    q = np.zeros((h, w))
    owner = labels.box_index.ravel()
    fg = np.where(owner >= 0)[0]
    if fg.size == 0 or not gts:
        return q
    pts = img.points().reshape(-1, 3)[fg]
    t = reg_data.reshape(-1, 8)[fg].copy()
    t[:, 3:6] = np.clip(t[:, 3:6], -LOG_DIM_CLAMP, LOG_DIM_CLAMP)
    rows = decode_batch(pts, t)
    pred_boxes = _boxes_from_rows(rows)
    qf = q.ravel()
    for k, flat in enumerate(fg):
        qf[flat] = iou_3d(pred_boxes[k], gts[owner[flat]])
    return qf.reshape(h, w)


def scene_losses(model: ToyModel, img: RangeImage, gts, labels: LabelGrid,
                 vfl_cfg: VflConfig | None = None, cls_weight: float = 1.0):
    """Forward pass plus both losses for one scene.

    Returns (total, cls, reg) loss Tensors where total is
    cls_weight * cls + reg; the reported cls value stays unweighted. The
    IoU target q is recomputed from the current (detached) predictions on
    every call.
    """
    scores, reg = model.forward(img)
    valid = ~img.empty_mask()
    q = iou_targets_grid(img, labels, gts, reg.data)
    l_cls = cls_loss(scores, q, valid, vfl_cfg)
    l_reg = reg_loss(reg, labels, gts, img.points())
    total = grad.add(grad.mul(l_cls, cls_weight) if cls_weight != 1.0 else l_cls, l_reg)
    return total, l_cls, l_reg


def train_toy(scenes, iterations: int = 500, step_size: float = 0.1,
              rcp: RcpConfig | None = None, vfl_cfg: VflConfig | None = None,
              log=None, batch: int = 1):
    """Plain gradient descent over the scenes, visited round-robin.

    scenes: list of (RangeImage, list of Box7). Returns (model, history)
    where history holds one (total, cls, reg) float triple per iteration.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    model = ToyModel()
    return train_toy_model(model, scenes, iterations, step_size, rcp, vfl_cfg,
                           log, batch)


def train_toy_model(model: ToyModel, scenes, iterations: int, step_size: float,
                    rcp: RcpConfig | None = None, vfl_cfg: VflConfig | None = None,
                    log=None, batch: int = 1, cls_weight: float = CLS_WEIGHT):
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if step_size <= 0:
        raise ValueError("step size must be positive")
    if batch < 1:
        raise ValueError("batch must be positive")
    label_cache = [label_pixels(img, gts, rcp) for img, gts in scenes]
    params = model.parameters()
    history = []
    for it in range(iterations):
        total = cls_part = reg_part = None
        for b in range(batch):
            si = (it * batch + b) % len(scenes)
            img, gts = scenes[si]
            t, l_cls, l_reg = scene_losses(model, img, gts, label_cache[si],
                                           vfl_cfg, cls_weight)
            total = t if total is None else grad.add(total, t)
            cls_part = l_cls if cls_part is None else grad.add(cls_part, l_cls)
            reg_part = l_reg if reg_part is None else grad.add(reg_part, l_reg)
        if batch > 1:
            total = grad.mul(total, 1.0 / batch)
        for t in params.values():
            t.zero_grad()
        total.backward()
        for t in params.values():
            # a parameter outside this iteration's graph (no foreground
            # anywhere reaches the trunk only through the box branch) has no
            # grad; that is a zero update, not an error
            if t.grad is not None:
                t.data[...] = t.data - step_size * t.grad
        history.append((float(total.data),
                        float(cls_part.data) / batch,
                        float(reg_part.data) / batch))
        if log is not None:
            log(it, history[-1])
    return model, history


def infer(model: ToyModel, img: RangeImage, cfg: WnmsConfig | None = None,
          use_standard: bool = False):
    """Decode every non-empty pixel at or above the score threshold into a
    proposal, then de-duplicate. Returns the list of kept proposals."""
    if cfg is None:
        cfg = WnmsConfig()
    scores, reg = model.forward(img)
    p = scores.data.ravel()
    keep = np.where((~img.empty_mask()).ravel() & (p >= cfg.score_threshold))[0]
    if keep.size == 0:
        return []
    pts = img.points().reshape(-1, 3)[keep]
    t = reg.data.reshape(-1, 8)[keep].copy()
    t[:, 3:6] = np.clip(t[:, 3:6], -LOG_DIM_CLAMP, LOG_DIM_CLAMP)
    rows = decode_batch(pts, t)
    props = [Proposal(b, float(p[k])) for b, k in zip(_boxes_from_rows(rows), keep)]
    nms = standard_nms if use_standard else weighted_nms
    return nms(props, cfg)
