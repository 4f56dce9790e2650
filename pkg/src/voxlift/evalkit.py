"""Grounding accuracy at IoU thresholds and the pooling ablation table."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .lift import Patch3DSet
from .objective import Box3D, iou3d
from .pooling import fps_pool, voxel_pool
from .spatial import covering_radius

DEFAULT_THRESHOLDS = (0.25, 0.5)


def _key(t: float) -> str:
    return f"{t:g}"


@dataclass
class SceneResult:
    scene_id: str
    best_iou: float
    hits: dict  # threshold key -> hit (0/1, or F1 in multi-target mode)


@dataclass
class EvalReport:
    acc_at: dict
    per_scene: list
    n_scenes: int

    def to_json(self) -> dict:
        return {
            "acc_at": self.acc_at,
            "n_scenes": self.n_scenes,
            "per_scene": [
                {"scene_id": s.scene_id, "best_iou": s.best_iou, "hits": s.hits} for s in self.per_scene
            ],
        }

    def to_csv(self, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scene_id", "best_iou"] + [f"hit_{round(t * 100):03d}" for t in thresholds])
        for s in self.per_scene:
            writer.writerow([s.scene_id, repr(s.best_iou)] + [s.hits[_key(t)] for t in thresholds])
        return buf.getvalue()


def _greedy_pairs(preds: Sequence[Box3D], gts: Sequence[Box3D]):
    """One-to-one greedy matching by descending IoU; ties by (pred, gt) index."""
    cand = sorted(((-iou3d(p, g), i, j) for i, p in enumerate(preds) for j, g in enumerate(gts)))
    used_p, used_g, pairs = set(), set(), []
    for neg, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append(-neg)
    return pairs


def acc_at_iou(preds: Sequence, gts: Sequence, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
               scene_ids: Sequence[str] | None = None) -> EvalReport:
    """Fraction of scenes whose selected box reaches each IoU threshold.

    Each element of ``preds``/``gts`` is a Box3D (single target) or a list of
    Box3D (multi-target). Multi-target scenes score the F1 of a greedy
    one-to-one IoU matching at each threshold.
    """
    if len(preds) != len(gts):
        raise InvalidArgument(f"{len(preds)} predictions for {len(gts)} scenes")
    if len(thresholds) == 0:
        raise InvalidArgument("need at least one IoU threshold")
    ids = list(scene_ids) if scene_ids is not None else [str(i) for i in range(len(preds))]
    per_scene = []
    for sid, p, g in zip(ids, preds, gts):
        if isinstance(p, Box3D) and isinstance(g, Box3D):
            iou = iou3d(p, g)
            hits = {_key(t): int(iou >= t) for t in thresholds}
            per_scene.append(SceneResult(sid, iou, hits))
            continue
        plist = [p] if isinstance(p, Box3D) else list(p)
        glist = [g] if isinstance(g, Box3D) else list(g)
        ious = _greedy_pairs(plist, glist) if plist and glist else []
        hits = {}
        for t in thresholds:
            tp = sum(1 for v in ious if v >= t)
            hits[_key(t)] = 0.0 if tp == 0 else 2 * tp / (len(plist) + len(glist))
        per_scene.append(SceneResult(sid, max(ious, default=0.0), hits))
    n = len(per_scene)
    acc = {_key(t): (sum(s.hits[_key(t)] for s in per_scene) / n if n else 0.0) for t in thresholds}
    return EvalReport(acc, per_scene, n)


@dataclass
class AblationRow:
    scene: int
    strategy: str
    parameter: float
    tokens: int
    covering_radius: float


def pooling_ablation(scenes: Sequence[Patch3DSet], sizes: Sequence[float] = (0.4, 0.3, 0.2),
                     counts: Sequence[int] = (576, 1024)) -> list[AblationRow]:
    """Token count and covering radius per scene and pooling configuration.

    The covering radius is the largest distance from any input patch to its
    nearest pooled token. FPS counts larger than a scene's patch count are
    clamped to it.
    """
    if not scenes:
        raise InvalidArgument("no scenes")
    rows = []
    for si, patches in enumerate(scenes):
        for size in sizes:
            pooled = voxel_pool(patches, size)
            rows.append(AblationRow(si, "voxel", float(size), len(pooled),
                                    covering_radius(patches.positions, pooled.positions)))
        for count in counts:
            pooled = fps_pool(patches, min(count, len(patches)))
            rows.append(AblationRow(si, "fps", float(count), len(pooled),
                                    covering_radius(patches.positions, pooled.positions)))
    return rows


def summarize_ablation(rows: Sequence[AblationRow]) -> list[dict]:
    """Mean token count and covering radius per (strategy, parameter), in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.strategy, r.parameter), []).append(r)
    return [
        {"strategy": s, "parameter": p,
         "mean_tokens": float(np.mean([r.tokens for r in rs])),
         "mean_covering_radius": float(np.mean([r.covering_radius for r in rs]))}
        for (s, p), rs in groups.items()
    ]
