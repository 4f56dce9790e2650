"""Token compression of 3D patches: voxel averaging or farthest point selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .lift import Patch3DSet
from .spatial import fps, voxel_keys

DEFAULT_CAP = 3096


@dataclass(frozen=True)
class PooledTokens:
    features: np.ndarray  # (t, d) float32
    positions: np.ndarray  # (t, 3) float32
    counts: np.ndarray  # (t,) int64
    strategy: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]


def voxel_groups(positions: np.ndarray, voxel_size: float):
    """Group ids per point, numbered in order of each group's first member."""
    keys = voxel_keys(positions, voxel_size)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse], len(first)


def voxel_pool(patches: Patch3DSet, voxel_size: float, cap: int | None = None) -> PooledTokens:
    """Average features and positions of the patches in each occupied voxel.

    The grid is anchored at the world origin. Output tokens follow the index
    of their first member. With ``cap`` set and more occupied voxels than
    ``cap``, the voxel tokens are thinned by farthest point sampling (seed 0)
    and kept in their original order.
    """
    if len(patches) == 0:
        raise InvalidArgument("cannot pool an empty patch set")
    group, t = voxel_groups(patches.positions, voxel_size)
    counts = np.bincount(group, minlength=t)
    # np.add.at reduces unbuffered in input order, so each sum is ascending-index
    feat_sum = np.zeros((t, patches.dim))
    np.add.at(feat_sum, group, patches.features.astype(np.float64))
    pos_sum = np.zeros((t, 3))
    np.add.at(pos_sum, group, patches.positions.astype(np.float64))
    features = (feat_sum / counts[:, None]).astype(np.float32)
    positions = (pos_sum / counts[:, None]).astype(np.float32)
    strategy = {"strategy": "voxel", "voxel_size": float(voxel_size)}
    if cap is not None:
        if cap < 1:
            raise InvalidArgument(f"cap must be >= 1, got {cap}")
        strategy["cap"] = int(cap)
        if t > cap:
            keep = np.sort(fps(positions, cap, 0))
            features, positions, counts = features[keep], positions[keep], counts[keep]
    return PooledTokens(features, positions, counts.astype(np.int64), strategy)


def fps_pool(patches: Patch3DSet, count: int, seed_index: int = 0) -> PooledTokens:
    """Keep ``count`` patches chosen by farthest point sampling, in selection order."""
    if len(patches) == 0:
        raise InvalidArgument("cannot pool an empty patch set")
    if count > len(patches):
        raise InvalidArgument(f"fps count {count} exceeds {len(patches)} patches")
    sel = fps(patches.positions, count, seed_index)
    return PooledTokens(
        patches.features[sel].copy(),
        patches.positions[sel].copy(),
        np.ones(count, dtype=np.int64),
        {"strategy": "fps", "count": int(count), "seed": int(seed_index)},
    )


def pool(patches: Patch3DSet, strategy: str, *, voxel_size: float | None = None,
         count: int | None = None, seed: int = 0, cap: int | None = DEFAULT_CAP) -> PooledTokens:
    if strategy == "voxel":
        if voxel_size is None:
            raise InvalidArgument("voxel pooling needs voxel_size")
        return voxel_pool(patches, voxel_size, cap)
    if strategy == "fps":
        if count is None:
            raise InvalidArgument("fps pooling needs count")
        return fps_pool(patches, count, seed)
    raise InvalidArgument(f"unknown pooling strategy {strategy!r}")
