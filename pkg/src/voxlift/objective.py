"""Box overlap metrics, grounding losses with analytic gradients, matching, box-head training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DivergenceError, InvalidArgument
from .mlp import MlpWeights, mlp_backward, mlp_forward_cached, sigmoid, softplus

log = logging.getLogger(__name__)

SIZE_FLOOR = 1e-4
DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned box, center and full edge lengths in meters."""

    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        s = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(s > 0):
            raise InvalidArgument(f"box size must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.size / 2

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.size / 2

    def to_json(self) -> dict:
        return {"center": [float(x) for x in self.center], "size": [float(x) for x in self.size]}

    @classmethod
    def from_json(cls, d: dict) -> "Box3D":
        return cls(np.array(d["center"], dtype=np.float64), np.array(d["size"], dtype=np.float64))


def _stack(boxes: Sequence[Box3D]):
    return (np.array([b.center for b in boxes]).reshape(-1, 3),
            np.array([b.size for b in boxes]).reshape(-1, 3))


def _overlap(pc, ps, gc, gs):
    lo, hi = pc - ps / 2, pc + ps / 2
    glo, ghi = gc - gs / 2, gc + gs / 2
    ov = np.maximum(0.0, np.minimum(hi, ghi) - np.maximum(lo, glo))
    return lo, hi, glo, ghi, ov


def iou_arrays(pc, ps, gc, gs) -> np.ndarray:
    """Broadcasting IoU over stacked centers/sizes of shape (..., 3)."""
    *_, ov = _overlap(pc, ps, gc, gs)
    inter = ov.prod(axis=-1)
    union = ps.prod(axis=-1) + gs.prod(axis=-1) - inter
    return inter / union


def iou3d(a: Box3D, b: Box3D) -> float:
    return float(iou_arrays(a.center, a.size, b.center, b.size))


def diou_arrays(pc, ps, gc, gs) -> np.ndarray:
    lo, hi, glo, ghi, ov = _overlap(pc, ps, gc, gs)
    inter = ov.prod(axis=-1)
    union = ps.prod(axis=-1) + gs.prod(axis=-1) - inter
    enc = np.maximum(hi, ghi) - np.minimum(lo, glo)
    diag2 = (enc ** 2).sum(axis=-1)
    rho2 = ((pc - gc) ** 2).sum(axis=-1)
    return inter / union - rho2 / diag2


def diou3d(a: Box3D, b: Box3D) -> float:
    return float(diou_arrays(a.center, a.size, b.center, b.size))


def _prod_others(x: np.ndarray) -> np.ndarray:
    # product over the other two axes, without dividing (x may hold zeros)
    return np.stack([x[..., 1] * x[..., 2], x[..., 0] * x[..., 2], x[..., 0] * x[..., 1]], axis=-1)


def _step(x: np.ndarray) -> np.ndarray:
    # 1 where x > 0, 0 where x < 0, 0.5 on ties
    return 0.5 * (1.0 + np.sign(x))


def diou_loss_arrays(pc, ps, gc, gs):
    """Loss ``1 - DIoU`` and its gradient w.r.t. pred center and size.

    Inputs are (n, 3); returns ``loss`` (n,), ``grad_center`` (n, 3),
    ``grad_size`` (n, 3). Where two faces coincide the two one-sided
    derivatives are averaged, which gives a zero gradient at pred == gt.
    """
    pc, ps, gc, gs = (np.asarray(a, dtype=np.float64) for a in (pc, ps, gc, gs))
    lo, hi, glo, ghi, ov = _overlap(pc, ps, gc, gs)
    inter = ov.prod(axis=-1)
    vp = ps.prod(axis=-1)
    union = vp + gs.prod(axis=-1) - inter
    iou = inter / union

    enc = np.maximum(hi, ghi) - np.minimum(lo, glo)
    diag2 = (enc ** 2).sum(axis=-1)
    delta = pc - gc
    rho2 = (delta ** 2).sum(axis=-1)
    loss = 1.0 - iou + rho2 / diag2

    positive = ov > 0
    hi_inner = _step(ghi - hi)
    lo_inner = _step(lo - glo)
    dov_dc = positive * (hi_inner - lo_inner)
    dov_ds = positive * 0.5 * (hi_inner + lo_inner)
    di_dov = _prod_others(ov)
    di_dc = di_dov * dov_dc
    di_ds = di_dov * dov_ds
    dvp_ds = _prod_others(ps)
    u = union[:, None]
    i = inter[:, None]
    diou_dc = di_dc / u + i * di_dc / u ** 2
    diou_ds = di_ds / u - i * (dvp_ds - di_ds) / u ** 2

    hi_outer = _step(hi - ghi)
    lo_outer = _step(glo - lo)
    de_dc = hi_outer - lo_outer
    de_ds = 0.5 * (hi_outer + lo_outer)
    d2 = diag2[:, None]
    r2 = rho2[:, None]
    dpen_dc = 2 * delta / d2 - r2 * 2 * enc * de_dc / d2 ** 2
    dpen_ds = -r2 * 2 * enc * de_ds / d2 ** 2

    return loss, dpen_dc - diou_dc, dpen_ds - diou_ds


def diou_loss(pred: Box3D, gt: Box3D) -> tuple[float, np.ndarray]:
    """``1 - DIoU`` and its gradient w.r.t. ``(cx, cy, cz, sx, sy, sz)`` of ``pred``."""
    loss, gc, gs = diou_loss_arrays(pred.center[None], pred.size[None], gt.center[None], gt.size[None])
    return float(loss[0]), np.concatenate([gc[0], gs[0]])


def info_nce(query_embs: np.ndarray, loc_emb: np.ndarray, positive: int,
             temperature: float = DEFAULT_TEMPERATURE):
    """Contrastive loss of the positive query against the location embedding.

    Similarities are cosines divided by ``temperature``. Returns
    ``(loss, grad_queries (N, C), grad_loc (C,))``.
    """
    q = np.asarray(query_embs, dtype=np.float64)
    loc = np.asarray(loc_emb, dtype=np.float64).reshape(-1)
    if not temperature > 0:
        raise InvalidArgument(f"temperature must be positive, got {temperature}")
    if q.ndim != 2 or q.shape[1] != loc.shape[0]:
        raise InvalidArgument(f"shape mismatch: queries {q.shape}, loc {loc.shape}")
    if not 0 <= positive < q.shape[0]:
        raise InvalidArgument(f"positive index {positive} out of range")
    qn = np.linalg.norm(q, axis=1)
    ln = float(np.linalg.norm(loc))
    if np.any(qn == 0) or ln == 0:
        raise InvalidArgument("zero-norm embedding has no cosine similarity")
    cos = np.einsum("nc,c->n", q, loc) / (qn * ln)
    s = cos / temperature
    shifted = s - s.max()
    denom = np.exp(shifted).sum()
    loss = float(np.log(denom) - shifted[positive])

    g_s = np.exp(shifted) / denom
    g_s[positive] -= 1.0
    g_cos = g_s / temperature
    dcos_dq = loc[None, :] / (qn[:, None] * ln) - cos[:, None] * q / qn[:, None] ** 2
    dcos_dl = q / (qn[:, None] * ln) - cos[:, None] * loc[None, :] / ln ** 2
    grad_q = g_cos[:, None] * dcos_dq
    grad_l = (g_cos[:, None] * dcos_dl).sum(axis=0)
    return loss, grad_q, grad_l


def cosine_scores(values: np.ndarray, loc: np.ndarray) -> np.ndarray:
    """Cosine similarity of each row with ``loc``; rows of zero norm score 0."""
    values = np.asarray(values, dtype=np.float64)
    loc = np.asarray(loc, dtype=np.float64).reshape(-1)
    norms = np.linalg.norm(values, axis=1) * np.linalg.norm(loc)
    dots = np.einsum("nc,c->n", values, loc)
    return np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)


@dataclass(frozen=True)
class Assignment:
    pairs: list  # (query index, gt index), ascending query index
    cost: float


def match_arrays(pc, ps, gc, gs) -> Assignment:
    if len(pc) == 0 or len(gc) == 0:
        raise InvalidArgument("matching needs nonempty predictions and ground truth")
    cost = 1.0 - diou_arrays(pc[:, None, :], ps[:, None, :], gc[None, :, :], gs[None, :, :])
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return Assignment(pairs, float(sum(cost[r, c] for r, c in pairs)))


def match(preds: Sequence[Box3D], gts: Sequence[Box3D]) -> Assignment:
    """Minimum total ``1 - DIoU`` one-to-one assignment (Hungarian)."""
    if not preds or not gts:
        raise InvalidArgument("matching needs nonempty predictions and ground truth")
    pc, ps = _stack(preds)
    gc, gs = _stack(gts)
    return match_arrays(pc, ps, gc, gs)


# ---------------------------------------------------------------------------
# box-head training

@dataclass
class TrainingScene:
    """Frozen decoder state for one scene; only the box head is trained on it."""

    layer_values: list  # per decoder layer, (N, C) query values after that layer
    positions: np.ndarray  # (N, 3)
    loc: np.ndarray  # (C,)
    gt_centers: np.ndarray  # (G, 3)
    gt_sizes: np.ndarray  # (G, 3)
    target: int = 0


@dataclass
class LossReport:
    diou_loss: float
    infonce_loss: float
    gradients: dict = field(default_factory=dict)


def box_params(raw: np.ndarray, positions: np.ndarray):
    """Decode box-head outputs (N, 6) into centers and strictly positive sizes."""
    return positions + raw[:, :3], softplus(raw[:, 3:]) + SIZE_FLOOR


def box_head_loss(scenes: Sequence[TrainingScene], head: MlpWeights, aux_loss: bool = False,
                  temperature: float = DEFAULT_TEMPERATURE, with_grad: bool = True) -> LossReport:
    """Mean matched DIoU loss over scenes and its gradient w.r.t. the box head.

    Matching is recomputed from the current predictions and then held fixed.
    Without ``aux_loss`` only the last layer contributes. The InfoNCE term is
    reported (positive = query matched to the target box) but not
    differentiated, since queries and the location token are frozen here.
    """
    if not scenes:
        raise InvalidArgument("no training scenes")
    head64 = head.astype(np.float64)
    grads = {k: np.zeros_like(v) for k, v in head64.tensors().items()}
    total, nce_total = 0.0, 0.0
    for scene in scenes:
        layers = scene.layer_values if aux_loss else scene.layer_values[-1:]
        if not layers:
            raise InvalidArgument("scene has no decoder layers to supervise")
        weight = 1.0 / (len(scenes) * len(layers))
        for li, values in enumerate(layers):
            raw, pre, hidden = mlp_forward_cached(head64, values)
            centers, sizes = box_params(raw, scene.positions)
            assign = match_arrays(centers, sizes, scene.gt_centers, scene.gt_sizes)
            q_idx = np.array([p[0] for p in assign.pairs])
            g_idx = np.array([p[1] for p in assign.pairs])
            loss, g_c, g_s = diou_loss_arrays(centers[q_idx], sizes[q_idx],
                                              scene.gt_centers[g_idx], scene.gt_sizes[g_idx])
            total += weight * loss.mean()
            if li == len(layers) - 1:
                pos = q_idx[g_idx == scene.target]
                if pos.size:
                    nce_total += info_nce(values, scene.loc, int(pos[0]), temperature)[0] / len(scenes)
            if with_grad:
                g_raw = np.zeros_like(raw)
                scale = weight / len(q_idx)
                g_raw[q_idx, :3] = g_c * scale
                g_raw[q_idx, 3:] = g_s * scale * sigmoid(raw[q_idx, 3:])
                for k, g in mlp_backward(head64, values, pre, hidden, g_raw).items():
                    grads[k] += g
    return LossReport(float(total), float(nce_total), grads if with_grad else {})


@dataclass
class TrainResult:
    head: MlpWeights
    trajectory: list  # (step, diou_loss, infonce_loss); step 0 is the initial loss


def train_box_head(scenes: Sequence[TrainingScene], head: MlpWeights, steps: int, lr: float,
                   aux_loss: bool = False, momentum: float = 0.95,
                   temperature: float = DEFAULT_TEMPERATURE) -> TrainResult:
    """Heavy-ball gradient descent on the box head only.

    The trajectory has ``steps + 1`` rows: the loss before any update and
    after each of the ``steps`` updates.
    """
    if steps < 1:
        raise InvalidArgument(f"steps must be >= 1, got {steps}")
    if lr < 0:
        raise InvalidArgument(f"lr must be >= 0, got {lr}")
    params = {k: v.copy() for k, v in head.astype(np.float64).tensors().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    trajectory = []
    for step in range(steps + 1):
        report = box_head_loss(scenes, MlpWeights(**params), aux_loss, temperature, with_grad=step < steps)
        if not np.isfinite(report.diou_loss):
            raise DivergenceError(step)
        trajectory.append((step, report.diou_loss, report.infonce_loss))
        if step == steps:
            break
        for k in params:
            velocity[k] = momentum * velocity[k] - lr * report.gradients[k]
            params[k] = params[k] + velocity[k]
        if step % 100 == 0:
            log.debug("step %d diou %.5f", step, report.diou_loss)
    return TrainResult(MlpWeights(**params).astype(np.float32), trajectory)
