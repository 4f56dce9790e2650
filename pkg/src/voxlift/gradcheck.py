"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgument
from .mlp import MlpWeights
from .objective import (TrainingScene, box_head_loss, diou_loss_arrays, info_nce)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the flattened gradients."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def random_box_pair(rng: np.random.Generator, min_gap: float = 1e-3):
    """Overlapping-or-near box pair whose faces stay ``min_gap`` away from coinciding."""
    while True:
        pc = rng.uniform(-1, 1, 3)
        ps = rng.uniform(0.3, 2.0, 3)
        gc = pc + rng.uniform(-1, 1, 3)
        gs = rng.uniform(0.3, 2.0, 3)
        faces_p = np.concatenate([pc - ps / 2, pc + ps / 2])
        faces_g = np.concatenate([gc - gs / 2, gc + gs / 2])
        gaps = np.abs(faces_p[:, None] - faces_g[None, :]).reshape(2, 3, 2, 3)
        # compare faces on the same axis only
        same_axis = np.stack([gaps[:, a, :, a] for a in range(3)])
        if same_axis.min() > min_gap:
            return pc, ps, gc, gs


def check_diou(rng: np.random.Generator, h: float = 1e-5) -> float:
    pc, ps, gc, gs = random_box_pair(rng)
    _, g_c, g_s = diou_loss_arrays(pc[None], ps[None], gc[None], gs[None])
    analytic = np.concatenate([g_c[0], g_s[0]])

    def f(theta):
        return float(diou_loss_arrays(theta[None, :3], theta[None, 3:], gc[None], gs[None])[0][0])

    return rel_error(analytic, numeric_grad(f, np.concatenate([pc, ps]), h))


def check_infonce(rng: np.random.Generator, h: float = 1e-5, n: int = 6, dim: int = 8,
                  temperature: float = 0.5) -> float:
    q = rng.standard_normal((n, dim))
    loc = rng.standard_normal(dim)
    pos = int(rng.integers(n))
    _, g_q, g_l = info_nce(q, loc, pos, temperature)
    num_q = numeric_grad(lambda x: info_nce(x, loc, pos, temperature)[0], q, h)
    num_l = numeric_grad(lambda x: info_nce(q, x, pos, temperature)[0], loc, h)
    return rel_error(np.concatenate([g_q.ravel(), g_l]), np.concatenate([num_q.ravel(), num_l]))


def random_training_scene(rng: np.random.Generator, n_queries: int, dim: int, n_gt: int,
                          layers: int = 1) -> TrainingScene:
    centers = rng.uniform(-2, 2, (n_gt, 3))
    return TrainingScene(
        layer_values=[rng.standard_normal((n_queries, dim)) for _ in range(layers)],
        positions=centers[rng.integers(n_gt, size=n_queries)] + rng.normal(0, 0.3, (n_queries, 3)),
        loc=rng.standard_normal(dim),
        gt_centers=centers,
        gt_sizes=rng.uniform(0.3, 1.5, (n_gt, 3)),
        target=int(rng.integers(n_gt)),
    )


def check_box_head(scenes, head: MlpWeights, h: float = 1e-6, aux_loss: bool = False) -> float:
    """Analytic box-head gradient vs central differences of the full matched loss."""
    head64 = head.astype(np.float64)
    report = box_head_loss(scenes, head64, aux_loss)
    names = ("w1", "b1", "w2", "b2")
    analytic = np.concatenate([report.gradients[k].ravel() for k in names])
    base = head64.tensors()
    flat = np.concatenate([base[k].ravel() for k in names])
    shapes = [base[k].shape for k in names]

    def f(theta):
        parts, off = [], 0
        for s in shapes:
            size = int(np.prod(s))
            parts.append(theta[off:off + size].reshape(s))
            off += size
        return box_head_loss(scenes, MlpWeights(*parts), aux_loss, with_grad=False).diou_loss

    return rel_error(analytic, numeric_grad(f, flat, h))


@dataclass
class GradcheckResult:
    op: str
    trials: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def to_json(self) -> dict:
        return {"op": self.op, "trials": self.trials, "max_rel_error": self.max_rel_error,
                "tol": self.tol, "passed": self.passed}


def run(op: str, trials: int, tol: float, seed: int = 0) -> GradcheckResult:
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    rng = np.random.default_rng(seed)
    if op == "diou":
        errs = [check_diou(rng) for _ in range(trials)]
    elif op == "infonce":
        errs = [check_infonce(rng) for _ in range(trials)]
    elif op == "boxhead":
        errs = []
        for _ in range(trials):
            scenes = [random_training_scene(rng, 12, 6, 3) for _ in range(2)]
            head = MlpWeights.init(rng, 6, 6, 6).astype(np.float64)
            errs.append(check_box_head(scenes, head))
    else:
        raise InvalidArgument(f"unknown gradcheck op {op!r}")
    return GradcheckResult(op, trials, float(max(errs)), tol)
