"""Meta-kernel convolution: per-neighbor weight vectors generated by an MLP
from pixel geometry, combined with neighbor features by elementwise product
and aggregated over the sampling grid.

Meta vectors follow the neighbor-minus-center orientation: for center pixel
p0 and offset pn, relative quantities are (value at p0+pn) - (value at p0).
Out-of-bounds or empty neighbors are invalid: their meta vector is zero and
their product vector is zeroed before aggregation, so image borders behave
like zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import grad
from .grad import ShapeError, Tensor
from .rimg import CH_RANGE, CH_X, CH_Y, CH_Z, RangeImage

MLP_HIDDEN = 64


def _default_offsets():
    return tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1))


@dataclass(frozen=True)
class SamplingGrid:
    """Ordered neighbor offsets; the default is the 3x3 dilation-1 grid.

    The order is part of the layer contract: concatenation aggregation lays
    the product vectors out in exactly this order.
    """

    offsets: tuple = field(default_factory=_default_offsets)

    def __post_init__(self):
        offs = tuple((int(r), int(c)) for r, c in self.offsets)
        if len(set(offs)) != len(offs):
            raise ValueError("sampling offsets must be distinct")
        object.__setattr__(self, "offsets", offs)

    def __len__(self):
        return len(self.offsets)


class MetaInput(Enum):
    """What the weight-generating MLP sees for each (center, neighbor) pair."""

    REL_XYZ = "rel_xyz"                      # (dx, dy, dz)
    ABS_XYZ_NEIGHBOR = "abs_xyz_neighbor"    # neighbor (x, y, z)
    REL_PIX = "rel_pix"                      # (drow, dcol)
    ABS_XYZ_BOTH = "abs_xyz_both"            # neighbor xyz, center xyz
    REL_RANGE = "rel_range"                  # (dr,)
    REL_XYZ_RANGE = "rel_xyz_range"          # (dx, dy, dz, dr)
    REL_XYZ_PIX = "rel_xyz_pix"              # (dx, dy, dz, drow, dcol)

    @property
    def dim(self) -> int:
        return _META_DIMS[self]


_META_DIMS = {
    MetaInput.REL_XYZ: 3,
    MetaInput.ABS_XYZ_NEIGHBOR: 3,
    MetaInput.REL_PIX: 2,
    MetaInput.ABS_XYZ_BOTH: 6,
    MetaInput.REL_RANGE: 1,
    MetaInput.REL_XYZ_RANGE: 4,
    MetaInput.REL_XYZ_PIX: 5,
}


class AggMode(Enum):
    CONCAT_FC = "concat_fc"
    MAXPOOL = "maxpool"
    SUM = "sum"


class MetaKernelLayer:
    """Weight-generating MLP (meta_dim -> 64 -> c_in, ReLU after the hidden
    layer only) plus, in concat mode, an affine aggregation over the
    concatenated per-neighbor products.

    `relu_weights=True` additionally rectifies the generated weights; off by
    default so weights may be negative.
    """

    def __init__(self, c_in, c_out, meta=MetaInput.REL_XYZ, agg_mode=AggMode.CONCAT_FC,
                 grid=None, relu_weights=False, params=None):
        if c_in < 1 or c_out < 1:
            raise ValueError("channel counts must be positive")
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.meta = meta
        self.agg_mode = agg_mode
        self.grid = grid if grid is not None else SamplingGrid()
        self.relu_weights = bool(relu_weights)
        if agg_mode is not AggMode.CONCAT_FC and c_out != c_in:
            raise ValueError(f"{agg_mode.value} aggregation requires c_out == c_in")
        if params is None:
            params = self._init_params(np.random.default_rng(0))
        self._set_params(params)

    def _init_params(self, rng):
        d = self.meta.dim
        k = len(self.grid)
        p = {
            "mlp_w1": rng.normal(0.0, 1.0 / np.sqrt(d), (d, MLP_HIDDEN)),
            "mlp_b1": np.zeros(MLP_HIDDEN),
            "mlp_w2": rng.normal(0.0, 1.0 / np.sqrt(MLP_HIDDEN), (MLP_HIDDEN, self.c_in)),
            "mlp_b2": np.zeros(self.c_in),
        }
        if self.agg_mode is AggMode.CONCAT_FC:
            p["agg_w"] = rng.normal(0.0, 1.0 / np.sqrt(k * self.c_in), (k * self.c_in, self.c_out))
            p["agg_b"] = np.zeros(self.c_out)
        return p

    def _set_params(self, params):
        expect = {
            "mlp_w1": (self.meta.dim, MLP_HIDDEN),
            "mlp_b1": (MLP_HIDDEN,),
            "mlp_w2": (MLP_HIDDEN, self.c_in),
            "mlp_b2": (self.c_in,),
        }
        if self.agg_mode is AggMode.CONCAT_FC:
            expect["agg_w"] = (len(self.grid) * self.c_in, self.c_out)
            expect["agg_b"] = (self.c_out,)
        self.params = {}
        for name, shape in expect.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True)

    @classmethod
    def create(cls, c_in, c_out, meta=MetaInput.REL_XYZ, agg_mode=AggMode.CONCAT_FC,
               grid=None, relu_weights=False, rng=None):
        layer = cls(c_in, c_out, meta, agg_mode, grid, relu_weights)
        if rng is not None:
            layer._set_params(layer._init_params(rng))
        return layer

    def parameters(self):
        return self.params

    def generated_weights(self, meta_vec: Tensor) -> Tensor:
        """Run the weight MLP on an (N, meta_dim) batch of meta vectors."""
        h = grad.relu(grad.affine(meta_vec, self.params["mlp_w1"], self.params["mlp_b1"]))
        w = grad.affine(h, self.params["mlp_w2"], self.params["mlp_b2"])
        return grad.relu(w) if self.relu_weights else w


def build_meta(img: RangeImage, p0, pn, meta: MetaInput):
    """Meta vector for center pixel p0 = (row, col) and offset pn = (drow, dcol).

    Returns (vector, valid). Out-of-bounds or empty neighbors yield a zero
    vector with valid=False.
    """
    r0, c0 = p0
    if not (0 <= r0 < img.height and 0 <= c0 < img.width):
        raise ValueError(f"center pixel {p0} out of bounds for {img.height}x{img.width}")
    rn, cn = r0 + pn[0], c0 + pn[1]
    if not (0 <= rn < img.height and 0 <= cn < img.width) or img.ranges[rn, cn] <= 0.0:
        return np.zeros(meta.dim), False
    ch = img.channels
    ctr = np.array([ch[CH_X, r0, c0], ch[CH_Y, r0, c0], ch[CH_Z, r0, c0]])
    nbr = np.array([ch[CH_X, rn, cn], ch[CH_Y, rn, cn], ch[CH_Z, rn, cn]])
    if meta is MetaInput.REL_XYZ:
        vec = nbr - ctr
    elif meta is MetaInput.ABS_XYZ_NEIGHBOR:
        vec = nbr
    elif meta is MetaInput.REL_PIX:
        vec = np.array([float(pn[0]), float(pn[1])])
    elif meta is MetaInput.ABS_XYZ_BOTH:
        vec = np.concatenate([nbr, ctr])
    elif meta is MetaInput.REL_RANGE:
        vec = np.array([ch[CH_RANGE, rn, cn] - ch[CH_RANGE, r0, c0]])
    elif meta is MetaInput.REL_XYZ_RANGE:
        vec = np.append(nbr - ctr, ch[CH_RANGE, rn, cn] - ch[CH_RANGE, r0, c0])
    elif meta is MetaInput.REL_XYZ_PIX:
        vec = np.concatenate([nbr - ctr, [float(pn[0]), float(pn[1])]])
    else:  # pragma: no cover
        raise ValueError(f"unknown meta selector {meta}")
    return vec, True


def _neighbor_tables(img: RangeImage, grid: SamplingGrid):
    """Flat neighbor indices and validity masks for every offset.

    Returns (idx, valid): idx is (K, H*W) int64 into the flattened image
    (0 where invalid), valid is (K, H*W) bool.
    """
    h, w = img.height, img.width
    rows, cols = np.mgrid[0:h, 0:w]
    rows, cols = rows.ravel(), cols.ravel()
    filled = (img.ranges > 0.0).ravel()
    idx = np.empty((len(grid), h * w), dtype=np.int64)
    valid = np.empty((len(grid), h * w), dtype=bool)
    for k, (dr, dc) in enumerate(grid.offsets):
        rn, cn = rows + dr, cols + dc
        inb = (rn >= 0) & (rn < h) & (cn >= 0) & (cn < w)
        flat = np.where(inb, rn * w + cn, 0)
        valid[k] = inb & filled[flat]
        idx[k] = np.where(valid[k], flat, 0)
    return idx, valid


def _meta_table(img: RangeImage, grid: SamplingGrid, meta: MetaInput, idx, valid):
    """(K, H*W, meta_dim) meta vectors, zeroed where invalid."""
    ch = img.channels
    n = img.height * img.width
    xyz = np.stack([ch[CH_X], ch[CH_Y], ch[CH_Z]], axis=-1).reshape(n, 3)
    rng = ch[CH_RANGE].reshape(n, 1)
    out = np.zeros((len(grid), n, meta.dim))
    for k, (dr, dc) in enumerate(grid.offsets):
        nbr_xyz, nbr_rng = xyz[idx[k]], rng[idx[k]]
        if meta is MetaInput.REL_XYZ:
            vec = nbr_xyz - xyz
        elif meta is MetaInput.ABS_XYZ_NEIGHBOR:
            vec = nbr_xyz
        elif meta is MetaInput.REL_PIX:
            vec = np.broadcast_to(np.array([float(dr), float(dc)]), (n, 2))
        elif meta is MetaInput.ABS_XYZ_BOTH:
            vec = np.concatenate([nbr_xyz, xyz], axis=1)
        elif meta is MetaInput.REL_RANGE:
            vec = nbr_rng - rng
        elif meta is MetaInput.REL_XYZ_RANGE:
            vec = np.concatenate([nbr_xyz - xyz, nbr_rng - rng], axis=1)
        elif meta is MetaInput.REL_XYZ_PIX:
            pix = np.broadcast_to(np.array([float(dr), float(dc)]), (n, 2))
            vec = np.concatenate([nbr_xyz - xyz, pix], axis=1)
        else:  # pragma: no cover
            raise ValueError(f"unknown meta selector {meta}")
        out[k] = np.where(valid[k][:, None], vec, 0.0)
    return out


def forward(layer: MetaKernelLayer, features, img: RangeImage) -> Tensor:
    """Apply the meta-kernel to (H, W, c_in) features aligned with `img`.

    Per pixel and neighbor: weights = MLP(meta), product = weights * neighbor
    features (zeroed for invalid neighbors), then aggregation: concatenation
    in grid order followed by the affine layer, or channel-wise max / sum.
    Differentiable w.r.t. features and all layer parameters.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    h, w = img.height, img.width
    if feats.data.shape != (h, w, layer.c_in):
        raise ShapeError(
            f"features shape {feats.data.shape} does not match "
            f"image {h}x{w} with c_in={layer.c_in}"
        )
    n = h * w
    idx, valid = _neighbor_tables(img, layer.grid)
    metas = _meta_table(img, layer.grid, layer.meta, idx, valid)
    flat = grad.reshape(feats, (n, layer.c_in))

    products = []
    for k in range(len(layer.grid)):
        wk = layer.generated_weights(Tensor(metas[k]))
        fk = grad.gather(flat, idx[k])
        mask = np.repeat(valid[k][:, None], layer.c_in, axis=1).astype(np.float64)
        products.append(grad.mul(grad.mul(wk, fk), Tensor(mask)))

    if layer.agg_mode is AggMode.CONCAT_FC:
        cat = grad.concat(products, axis=1)
        out = grad.affine(cat, layer.params["agg_w"], layer.params["agg_b"])
    elif layer.agg_mode is AggMode.SUM:
        out = products[0]
        for p in products[1:]:
            out = grad.add(out, p)
    else:  # MAXPOOL
        out = products[0]
        for p in products[1:]:
            out = grad.maximum(out, p)
    return grad.reshape(out, (h, w, layer.c_out))


def conv3x3_baseline(features, kernel, bias) -> Tensor:
    """Dense stride-1 convolution with zero padding; the plain-conv baseline.

    kernel has shape (kh, kw, c_in, c_out) with odd kh/kw, bias (c_out,).
    Differentiable w.r.t. features, kernel, and bias.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    kern = kernel if isinstance(kernel, Tensor) else Tensor(kernel)
    bias = bias if isinstance(bias, Tensor) else Tensor(bias)
    if feats.data.ndim != 3 or kern.data.ndim != 4:
        raise ShapeError(
            f"expected (H, W, c_in) features and (kh, kw, c_in, c_out) kernel, "
            f"got {feats.data.shape} and {kern.data.shape}"
        )
    h, w, c_in = feats.data.shape
    kh, kw, kc_in, c_out = kern.data.shape
    if kc_in != c_in or kh % 2 != 1 or kw % 2 != 1:
        raise ShapeError(
            f"kernel {kern.data.shape} incompatible with features {feats.data.shape}"
        )
    if bias.data.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({c_out},)")

    n = h * w
    rows, cols = np.mgrid[0:h, 0:w]
    rows, cols = rows.ravel(), cols.ravel()
    flat = grad.reshape(feats, (n, c_in))
    out = None
    for ki in range(kh):
        for kj in range(kw):
            dr, dc = ki - kh // 2, kj - kw // 2
            rn, cn = rows + dr, cols + dc
            inb = (rn >= 0) & (rn < h) & (cn >= 0) & (cn < w)
            idx = np.where(inb, rn * w + cn, 0)
            fk = grad.mul(grad.gather(flat, idx),
                          Tensor(np.repeat(inb[:, None], c_in, axis=1).astype(np.float64)))
            tap = grad.matmul(fk, grad.reshape(grad.gather(
                grad.reshape(kern, (kh * kw, c_in * c_out)), [ki * kw + kj]),
                (c_in, c_out)))
            out = tap if out is None else grad.add(out, tap)
    out = grad.add(out, bias)
    return grad.reshape(out, (h, w, c_out))
