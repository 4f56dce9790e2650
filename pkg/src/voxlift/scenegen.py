"""Deterministic synthetic RGB-D scenes: boxes in a room, an orbit of posed cameras,
exact depth by ray/box slab intersection, and per-patch feature grids.

World frame is z-up; the room spans ``[-ex/2, ex/2] x [-ey/2, ey/2] x [0, ez]``
and boxes rest on the floor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, InvalidArgument
from .formats import SceneManifest, ViewRecord, write_f32
from .geometry import (CameraView, Extrinsics, Intrinsics, focal_from_fov, nearest_pixel,
                       patch_centers, patch_grid_dims)
from .objective import Box3D

FEATURE_MODES = ("random", "box_onehot_plus_noise")
FEATURE_NOISE = 0.05
DEFAULT_VIEWS = 32


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_boxes: int = 4
    room_extent: tuple = (6.0, 6.0, 3.0)
    n_views: int = DEFAULT_VIEWS
    image: tuple = (336, 336, 14)  # width, height, patch
    feature_mode: str = "box_onehot_plus_noise"
    feature_dim: int = 64
    fov_degrees: float = 60.0
    min_box: float = 0.4
    max_box: float = 1.2

    def __post_init__(self):
        if self.n_boxes < 1 or self.n_views < 1:
            raise InvalidArgument("a scene needs at least one box and one view")
        if self.feature_mode not in FEATURE_MODES:
            raise InvalidArgument(f"unknown feature_mode {self.feature_mode!r}")
        width, height, patch = self.image
        patch_grid_dims(width, height, patch)
        if min(self.room_extent) <= self.max_box:
            raise InvalidArgument("room must be larger than the largest box")


@dataclass
class GroundTruth:
    boxes: list  # list[Box3D]
    labels: list


@dataclass
class SyntheticScene:
    spec: SceneSpec
    views: list  # list[CameraView]
    ground_truth: GroundTruth
    target: int
    loc: np.ndarray  # (d,) float32
    hit_ids: list = field(default_factory=list)  # per view, (H, W) box index or -1


def place_boxes(rng: np.random.Generator, spec: SceneSpec) -> list[Box3D]:
    """Rejection-sample non-overlapping floor-standing boxes inside the room."""
    ex, ey, ez = spec.room_extent
    boxes: list[Box3D] = []
    budget = 10 * spec.n_boxes * 100
    attempts = 0
    while len(boxes) < spec.n_boxes:
        attempts += 1
        if attempts > budget:
            raise CapacityError(f"placed {len(boxes)} of {spec.n_boxes} boxes in {budget} attempts")
        size = rng.uniform(spec.min_box, spec.max_box, size=3)
        size[2] = min(size[2], ez)
        cx = rng.uniform(-ex / 2 + size[0] / 2, ex / 2 - size[0] / 2)
        cy = rng.uniform(-ey / 2 + size[1] / 2, ey / 2 - size[1] / 2)
        cand = Box3D([cx, cy, size[2] / 2], size)
        if all(np.any((cand.hi <= b.lo) | (b.hi <= cand.lo)) for b in boxes):
            boxes.append(cand)
    return boxes


def orbit_cameras(spec: SceneSpec) -> list[Extrinsics]:
    ex, ey, ez = spec.room_extent
    radius = 0.5 * math.hypot(ex, ey) + 1.0
    target = np.array([0.0, 0.0, 0.25 * ez])
    out = []
    for v in range(spec.n_views):
        theta = 2 * math.pi * v / spec.n_views
        eye = [radius * math.cos(theta), radius * math.sin(theta), 0.9 * ez]
        out.append(Extrinsics.look_at(eye, target))
    return out


def ray_box_hits(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Nearest positive ray parameter per ray against one box (slab method); inf on miss.

    A ray starting inside the box reports its exit parameter.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    # rays parallel to a slab: unbounded inside it (faces included), empty outside
    parallel = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = near.max(axis=-1)
    t_far = far.min(axis=-1)
    hit = (t_far >= t_near) & (t_far > 0)
    t = np.where(t_near > 0, t_near, t_far)
    return np.where(hit, t, np.inf)


def render_depth(intr: Intrinsics, extr: Extrinsics, boxes, with_ids: bool = False):
    """Per-pixel camera-frame depth of the nearest box surface; 0 where nothing is hit.

    Ray directions are scaled to unit camera-z, so the ray parameter is the depth.
    """
    v, u = np.meshgrid(np.arange(intr.height, dtype=np.float64),
                       np.arange(intr.width, dtype=np.float64), indexing="ij")
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    dirs = d_cam @ extr.rotation.T
    origin = extr.translation
    best = np.full((intr.height, intr.width), np.inf)
    ids = np.full((intr.height, intr.width), -1, dtype=np.int64)
    for bi, box in enumerate(boxes):
        t = ray_box_hits(origin, dirs, box.lo, box.hi)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = bi
    depth = np.where(np.isfinite(best), best, 0.0).astype(np.float32)
    return (depth, ids) if with_ids else depth


def patch_hit_ids(ids: np.ndarray, width: int, height: int, patch: int) -> np.ndarray:
    """Box index seen at each patch center's depth pixel, as an (h, w) grid."""
    w, h = patch_grid_dims(width, height, patch)
    u, v = patch_centers(width, height, patch)
    return ids[nearest_pixel(v, height), nearest_pixel(u, width)].reshape(h, w)


def make_features(rng: np.random.Generator, patch_ids: np.ndarray, labels, mode: str, dim: int) -> np.ndarray:
    h, w = patch_ids.shape
    if mode == "random":
        return rng.standard_normal((h, w, dim)).astype(np.float32)
    feats = rng.normal(0.0, FEATURE_NOISE, size=(h, w, dim))
    hit = patch_ids >= 0
    channels = np.asarray(labels)[patch_ids[hit]] % dim
    feats[hit, channels] += 1.0
    return feats.astype(np.float32)


def generate(spec: SceneSpec) -> SyntheticScene:
    """Build a scene fully determined by ``spec.seed``.

    Per-view features draw from a generator seeded by ``(seed, view index)``.
    """
    rng = np.random.default_rng(spec.seed)
    boxes = place_boxes(rng, spec)
    labels = list(range(len(boxes)))
    target = int(rng.integers(len(boxes)))
    loc = np.zeros(spec.feature_dim)
    loc[labels[target] % spec.feature_dim] = 1.0
    loc = (loc + rng.normal(0.0, FEATURE_NOISE, size=spec.feature_dim)).astype(np.float32)

    width, height, patch = spec.image
    f = focal_from_fov(width, spec.fov_degrees)
    intr = Intrinsics(f, f, width / 2.0, height / 2.0, width, height)
    views, hit_ids = [], []
    for vi, extr in enumerate(orbit_cameras(spec)):
        depth, ids = render_depth(intr, extr, boxes, with_ids=True)
        vrng = np.random.default_rng([spec.seed, vi])
        feats = make_features(vrng, patch_hit_ids(ids, width, height, patch), labels,
                              spec.feature_mode, spec.feature_dim)
        views.append(CameraView(intr, extr, depth, feats, patch))
        hit_ids.append(ids)
    return SyntheticScene(spec, views, GroundTruth(boxes, labels), target, loc, hit_ids)


def write_scene(scene: SyntheticScene, out_dir, scene_id: str) -> Path:
    """Write manifest and blobs under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for vi, view in enumerate(scene.views):
        depth_name = f"view_{vi:03d}_depth.f32"
        feat_name = f"view_{vi:03d}_features.f32"
        write_f32(out_dir / depth_name, view.depth)
        write_f32(out_dir / feat_name, view.features)
        intr = view.intrinsics
        records.append(ViewRecord(
            width=intr.width, height=intr.height, patch=view.patch,
            intrinsics={"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy},
            camera_to_world=[float(x) for x in view.extrinsics.camera_to_world.ravel()],
            depth_blob=depth_name, feature_blob=feat_name, feature_dim=int(view.features.shape[2]),
        ))
    write_f32(out_dir / "loc.f32", scene.loc)
    gt = [dict(b.to_json(), label=int(lab))
          for b, lab in zip(scene.ground_truth.boxes, scene.ground_truth.labels)]
    manifest = SceneManifest(scene_id, records, gt, target_index=scene.target, loc_blob="loc.f32")
    path = out_dir / "manifest.json"
    manifest.save(path)
    return path


def summary(scene: SyntheticScene, scene_id: str, manifest_path) -> str:
    valid = sum(int((v.depth > 0).sum()) for v in scene.views)
    return json.dumps({
        "scene_id": scene_id,
        "manifest": str(manifest_path),
        "views": len(scene.views),
        "boxes": len(scene.ground_truth.boxes),
        "target_index": scene.target,
        "valid_depth_pixels": valid,
    })
