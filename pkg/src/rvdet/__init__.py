"""Range-view LiDAR detection toolkit.

Range-image codec, rotated-box geometry, a small autodiff engine, the
meta-kernel convolution, target encoding and losses, weighted NMS, range-view
augmentation, a deterministic ray-cast simulator, AP evaluation, and a CLI
that ties them into a toy end-to-end detector.
"""

from .assign import LabelGrid, PixelLabel, RcpConfig, assign_layer, label_pixels
from .geom import Box7, bev_corners, iou_3d, iou_bev, point_in_box
from .grad import ContractError, ShapeError, Tensor, grad_check
from .metakernel import AggMode, MetaInput, MetaKernelLayer, SamplingGrid
from .postproc import IouKind, Proposal, WnmsConfig, standard_nms, weighted_nms
from .rimg import (
    BeamTable,
    CartesianPoint,
    DegenerateInput,
    RangeImage,
    SphericalCoord,
    decode,
    project,
)
from .synth import SceneSpec, default_beam_table, raycast, slab_intersect
from .targets import DegenerateAzimuth, TargetVector, VflConfig
from .targets import decode as decode_target
from .targets import encode as encode_target
from .targets import vfl

__version__ = "0.1.0"

__all__ = [
    "AggMode", "BeamTable", "Box7", "CartesianPoint", "ContractError",
    "DegenerateAzimuth", "DegenerateInput", "IouKind", "LabelGrid",
    "MetaInput", "MetaKernelLayer", "PixelLabel", "Proposal", "RangeImage",
    "RcpConfig", "SamplingGrid", "SceneSpec", "ShapeError", "SphericalCoord",
    "TargetVector", "Tensor", "VflConfig", "WnmsConfig", "assign_layer",
    "bev_corners", "decode", "decode_target", "default_beam_table",
    "encode_target", "grad_check", "iou_3d", "iou_bev", "label_pixels",
    "point_in_box", "project", "raycast", "slab_intersect", "standard_nms",
    "vfl", "weighted_nms",
]
