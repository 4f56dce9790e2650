"""Lift multi-view patch features into 3D, pool them, and ground boxes with a k-NN attention decoder."""

from .decoder import DecoderConfig, DecoderWeights, GroundingOutput, grounding_forward
from .errors import CapacityError, DivergenceError, FormatError, InvalidArgument, VoxliftError
from .geometry import CameraView, Extrinsics, Intrinsics, backproject_patch_centers, patch_grid_dims
from .lift import Patch3DSet, encode_coordinate_token, make_3d_patches, pos_encode
from .mlp import MlpWeights
from .objective import Box3D, diou_loss, info_nce, iou3d, match
from .pooling import PooledTokens, fps_pool, voxel_pool
from .spatial import fps, knn, voxel_key

__all__ = [
    "DecoderConfig",
    "DecoderWeights",
    "GroundingOutput",
    "grounding_forward",
    "CapacityError",
    "DivergenceError",
    "FormatError",
    "InvalidArgument",
    "VoxliftError",
    "CameraView",
    "Extrinsics",
    "Intrinsics",
    "backproject_patch_centers",
    "patch_grid_dims",
    "Patch3DSet",
    "encode_coordinate_token",
    "make_3d_patches",
    "pos_encode",
    "MlpWeights",
    "Box3D",
    "diou_loss",
    "info_nce",
    "iou3d",
    "match",
    "PooledTokens",
    "fps_pool",
    "voxel_pool",
    "fps",
    "knn",
    "voxel_key",
]

__version__ = "0.1.0"
