"""Glue from manifests and weight files to lifted, pooled and grounded scenes."""

from __future__ import annotations

import numpy as np

from .decoder import GroundingOutput, grounding_forward
from .errors import InvalidArgument
from .formats import PoolingConfig, RunConfig, SceneManifest, WeightBundle
from .lift import Patch3DSet, lift_views
from .objective import TrainingScene
from .pooling import PooledTokens, pool


def lift_scene(manifest: SceneManifest, weights: WeightBundle) -> Patch3DSet:
    if manifest.feature_dim != weights.dim:
        raise InvalidArgument(
            f"manifest feature_dim {manifest.feature_dim} != weight embedding dim {weights.dim}"
        )
    return lift_views(manifest.camera_views(), weights.pos_mlp)


def pool_patches(patches: Patch3DSet, cfg: PoolingConfig) -> PooledTokens:
    return pool(patches, cfg.strategy, voxel_size=cfg.voxel_size, count=cfg.count,
                seed=cfg.seed, cap=cfg.cap)


def ground_scene(manifest: SceneManifest, cfg: RunConfig, weights: WeightBundle,
                 loc: np.ndarray | None = None) -> GroundingOutput:
    """lift -> pool -> decoder for one scene."""
    if weights.decoder is None:
        raise InvalidArgument("weight file holds no decoder tensors")
    if loc is None:
        loc = manifest.location_embedding()
    tokens = pool_patches(lift_scene(manifest, weights), cfg.pooling)
    return grounding_forward(tokens.features, tokens.positions, loc, cfg.decoder, weights.decoder)


def training_scene(manifest: SceneManifest, cfg: RunConfig, weights: WeightBundle) -> TrainingScene:
    """Run the frozen decoder once and keep what box-head training needs."""
    out = ground_scene(manifest, cfg, weights)
    if not out.layer_values:
        raise InvalidArgument("box-head training needs at least one decoder layer")
    boxes = manifest.boxes()
    return TrainingScene(
        layer_values=out.layer_values,
        positions=out.positions,
        loc=out.loc,
        gt_centers=np.array([b.center for b in boxes]),
        gt_sizes=np.array([b.size for b in boxes]),
        target=manifest.target_index,
    )
