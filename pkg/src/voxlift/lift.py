"""3D patches: 2D patch features plus an MLP encoding of their world position."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .geometry import CameraView, backproject_patch_centers, patch_grid_dims
from .mlp import MlpWeights, mlp_forward


@dataclass(frozen=True)
class Patch3DSet:
    features: np.ndarray  # (n, d) float32
    positions: np.ndarray  # (n, 3) float32
    source: np.ndarray  # (n, 3) int64: view index, patch row, patch col

    def __post_init__(self):
        n = self.features.shape[0]
        if self.positions.shape != (n, 3) or self.source.shape != (n, 3):
            raise InvalidArgument(
                f"inconsistent token counts: features {self.features.shape}, "
                f"positions {self.positions.shape}, source {self.source.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class CoordinateToken:
    embedding: np.ndarray
    coordinate: np.ndarray


def pos_encode(mlp: MlpWeights, positions: np.ndarray) -> np.ndarray:
    """Position embeddings for (n, 3) world coordinates, float32 (n, d)."""
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise InvalidArgument(f"positions must be (n, 3), got {positions.shape}")
    if mlp.d_in != 3:
        raise InvalidArgument(f"position MLP must take 3 inputs, takes {mlp.d_in}")
    return mlp_forward(mlp, positions.astype(np.float32))


def make_3d_patches(features: np.ndarray, pos_embeddings: np.ndarray) -> np.ndarray:
    if features.shape != pos_embeddings.shape:
        raise InvalidArgument(f"shape mismatch: {features.shape} vs {pos_embeddings.shape}")
    return features + pos_embeddings


def encode_coordinate_token(mlp: MlpWeights, xyz) -> CoordinateToken:
    xyz = np.asarray(xyz, dtype=np.float32).reshape(3)
    if not np.all(np.isfinite(xyz)):
        raise InvalidArgument(f"coordinate must be finite, got {xyz}")
    return CoordinateToken(pos_encode(mlp, xyz[None, :])[0], xyz)


def lift_views(views: Sequence[CameraView], mlp: MlpWeights) -> Patch3DSet:
    """Backproject every view's patch grid and add position embeddings.

    Invalid-depth tokens are dropped. Tokens are ordered by (view, row, col).
    """
    if not views:
        raise InvalidArgument("no views to lift")
    feats, poss, srcs = [], [], []
    for vi, view in enumerate(views):
        if view.features is None or view.patch is None:
            raise InvalidArgument(f"view {vi} has no feature grid")
        if view.features.shape[2] != mlp.d_out:
            raise InvalidArgument(
                f"view {vi} feature dim {view.features.shape[2]} != position embedding dim {mlp.d_out}"
            )
        field = backproject_patch_centers(view, view.patch)
        w, h = patch_grid_dims(view.intrinsics.width, view.intrinsics.height, view.patch)
        rows, cols = np.divmod(np.arange(w * h), w)
        keep = field.validity
        f = np.asarray(view.features, dtype=np.float32).reshape(h * w, -1)[keep]
        p = field.positions[keep].astype(np.float32)
        feats.append(make_3d_patches(f, pos_encode(mlp, p)))
        poss.append(p)
        srcs.append(np.stack([np.full(keep.sum(), vi), rows[keep], cols[keep]], axis=1))
    return Patch3DSet(
        np.concatenate(feats).astype(np.float32),
        np.concatenate(poss),
        np.concatenate(srcs).astype(np.int64),
    )


def token_budget(n_views: int, width: int = 336, height: int = 336, patch: int = 14) -> int:
    """Pre-pooling token count for ``n_views`` full views."""
    w, h = patch_grid_dims(width, height, patch)
    return n_views * w * h
