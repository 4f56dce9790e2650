"""Grounding decoder: FPS-seeded instance queries refined by k-NN cross-attention
and distance-adaptive self-attention, with a box head after every layer.

Row-vector convention throughout: a projection ``W`` maps ``x`` to ``x @ W``.
All arithmetic is float64; weights are stored as float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .mlp import MlpWeights, dense, mlp_forward, softplus, uniform_layer
from .objective import Box3D, box_params, cosine_scores
from .spatial import fps, knn

DEFAULT_KNN = (16, 32, 64, 128)


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 4
    queries: int = 512
    knn_schedule: tuple = DEFAULT_KNN
    dim: int = 64
    selection_threshold: float = 0.5
    multi_target: bool = False

    def __post_init__(self):
        object.__setattr__(self, "knn_schedule", tuple(int(k) for k in self.knn_schedule))
        if self.layers < 0:
            raise InvalidArgument(f"layers must be >= 0, got {self.layers}")
        if len(self.knn_schedule) != self.layers:
            raise InvalidArgument(
                f"knn_schedule has {len(self.knn_schedule)} entries for {self.layers} layers"
            )
        if any(k < 1 for k in self.knn_schedule):
            raise InvalidArgument("every k in knn_schedule must be >= 1")
        if self.queries < 1 or self.dim < 1:
            raise InvalidArgument("queries and dim must be >= 1")
        if not 0.0 <= self.selection_threshold <= 1.0:
            raise InvalidArgument("selection_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def tensors(self) -> dict:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    @classmethod
    def init(cls, rng, dim):
        return cls(*(uniform_layer(rng, dim, dim, bias=False) for _ in range(4)))

    @classmethod
    def identity(cls, dim):
        eye = np.eye(dim, dtype=np.float32)
        return cls(eye, eye.copy(), eye.copy(), eye.copy())


@dataclass(frozen=True)
class LayerWeights:
    cross: AttentionWeights
    self_attn: AttentionWeights
    rel_pe: MlpWeights
    sigma_w: np.ndarray  # (C,)
    sigma_b: float


@dataclass(frozen=True)
class DecoderWeights:
    layers: list
    query_pos: MlpWeights
    box_head: MlpWeights

    @property
    def dim(self) -> int:
        return self.query_pos.d_out

    def check(self, cfg: DecoderConfig):
        if self.dim != cfg.dim:
            raise InvalidArgument(f"decoder weights have dim {self.dim}, config wants {cfg.dim}")
        if len(self.layers) < cfg.layers:
            raise InvalidArgument(f"weights hold {len(self.layers)} layers, config wants {cfg.layers}")
        if self.box_head.d_out != 6 or self.box_head.d_in != self.dim:
            raise InvalidArgument(f"box head must map {self.dim} -> 6")

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, n_layers: int) -> "DecoderWeights":
        layers = []
        for _ in range(n_layers):
            cross = AttentionWeights.init(rng, dim)
            self_attn = AttentionWeights.init(rng, dim)
            rel_pe = MlpWeights.init(rng, 3, dim, dim)
            sw, sb = uniform_layer(rng, dim, 1)
            layers.append(LayerWeights(cross, self_attn, rel_pe, sw[:, 0], float(sb[0])))
        query_pos = MlpWeights.init(rng, 3, dim, dim)
        box_head = MlpWeights.init(rng, dim, dim, 6)
        return cls(layers, query_pos, box_head)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for li, layer in enumerate(self.layers):
            p = f"decoder.layers.{li}."
            for k, v in layer.cross.tensors().items():
                out[p + "cross." + k] = v
            for k, v in layer.self_attn.tensors().items():
                out[p + "self." + k] = v
            for k, v in layer.rel_pe.tensors().items():
                out[p + "rel_pe." + k] = v
            out[p + "sigma.w"] = np.asarray(layer.sigma_w, dtype=np.float32)
            out[p + "sigma.b"] = np.array([layer.sigma_b], dtype=np.float32)
        for k, v in self.query_pos.tensors().items():
            out["decoder.query_pos." + k] = v
        for k, v in self.box_head.tensors().items():
            out["decoder.box_head." + k] = v
        return out

    @classmethod
    def from_named(cls, tensors: dict) -> "DecoderWeights":
        def mlp(prefix):
            return MlpWeights(*(tensors[prefix + k] for k in ("w1", "b1", "w2", "b2")))

        def attn(prefix):
            return AttentionWeights(*(tensors[prefix + k] for k in ("wq", "wk", "wv", "wo")))

        layers = []
        li = 0
        while f"decoder.layers.{li}.cross.wq" in tensors:
            p = f"decoder.layers.{li}."
            layers.append(LayerWeights(
                attn(p + "cross."), attn(p + "self."), mlp(p + "rel_pe."),
                tensors[p + "sigma.w"], float(tensors[p + "sigma.b"][0]),
            ))
            li += 1
        return cls(layers, mlp("decoder.query_pos."), mlp("decoder.box_head."))


@dataclass
class QueryState:
    values: np.ndarray  # (N, C)
    positions: np.ndarray  # (N, 3)
    pos_enc: np.ndarray  # (N, C)


@dataclass(frozen=True)
class LocationToken:
    embedding: np.ndarray


@dataclass
class CrossTrace:
    neighbors: np.ndarray  # (N, k)
    logits: np.ndarray  # (N, k)
    attn: np.ndarray  # (N, k)


@dataclass
class SelfTrace:
    distances: np.ndarray  # (N+1, N+1), loc row/column zero
    sigma: np.ndarray  # (N+1,)
    logits: np.ndarray  # (N+1, N+1)
    attn: np.ndarray  # (N+1, N+1)


@dataclass
class GroundingOutput:
    boxes_per_layer: list  # per layer: (centers (N, 3), sizes (N, 3))
    scores: np.ndarray
    selected: list
    positions: np.ndarray
    layer_values: list = field(default_factory=list)
    loc: np.ndarray | None = None  # location token after the last layer

    def boxes(self, layer: int = -1) -> list[Box3D]:
        centers, sizes = self.boxes_per_layer[layer]
        return [Box3D(c, s) for c, s in zip(centers, sizes)]

    def to_json(self) -> dict:
        def boxes_json(centers, sizes):
            return [{"center": [float(x) for x in c], "size": [float(x) for x in s]}
                    for c, s in zip(centers, sizes)]

        per_layer = [boxes_json(c, s) for c, s in self.boxes_per_layer]
        return {
            "scores": [float(s) for s in self.scores],
            "boxes": per_layer[-1] if per_layer else [],
            "selected": [int(i) for i in self.selected],
            "boxes_per_layer": per_layer,
            "query_positions": [[float(x) for x in p] for p in self.positions],
        }


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def init_queries(positions: np.ndarray, cfg: DecoderConfig, weights: DecoderWeights) -> QueryState:
    """Queries at FPS-selected token positions (seed 0) with zero values."""
    positions = _f64(positions).reshape(-1, 3)
    if positions.shape[0] == 0:
        raise InvalidArgument("cannot initialize queries from an empty token set")
    n = min(cfg.queries, positions.shape[0])
    qpos = positions[fps(positions, n, 0)]
    pos_enc = mlp_forward(weights.query_pos.astype(np.float64), qpos)
    return QueryState(np.zeros((n, weights.dim)), qpos, pos_enc)


def knn_cross_attention(state: QueryState, patch_features: np.ndarray, patch_positions: np.ndarray,
                        k: int, layer: LayerWeights, trace: bool = False):
    """Each query attends to its ``k`` nearest tokens with relative position encodings.

    ``pe_ij = rel_pe(p_j - p_i)`` is added to the projected query and to the
    projected key; values receive a residual update.
    """
    feats = _f64(patch_features)
    ppos = _f64(patch_positions)
    C = state.values.shape[1]
    if feats.ndim != 2 or feats.shape[1] != C or ppos.shape != (feats.shape[0], 3):
        raise InvalidArgument(
            f"patch tensors {feats.shape}/{ppos.shape} incompatible with query dim {C}"
        )
    w = layer.cross
    nb = knn(state.positions, ppos, k).indices  # (N, k)
    rel = ppos[nb] - state.positions[:, None, :]
    pe = mlp_forward(layer.rel_pe.astype(np.float64), rel)  # (N, k, C)
    q = dense(state.values + state.pos_enc, _f64(w.wq))  # (N, C)
    keys = dense(feats, _f64(w.wk))[nb]  # (N, k, C)
    vals = dense(feats, _f64(w.wv))[nb]
    logits = ((q[:, None, :] + pe) * (keys + pe)).sum(axis=-1) / math.sqrt(C)
    attn = _softmax_rows(logits)
    update = dense((attn[:, :, None] * vals).sum(axis=1), _f64(w.wo))
    new_values = state.values + update
    if trace:
        return new_values, CrossTrace(nb, logits, attn)
    return new_values


def dense_cross_attention(state: QueryState, patch_features, patch_positions, layer: LayerWeights):
    """Reference cross-attention over every token (no neighbor restriction)."""
    feats = _f64(patch_features)
    ppos = _f64(patch_positions)
    C = state.values.shape[1]
    w = layer.cross
    rel = ppos[None, :, :] - state.positions[:, None, :]
    pe = mlp_forward(layer.rel_pe.astype(np.float64), rel)
    q = dense(state.values + state.pos_enc, _f64(w.wq))
    keys = dense(feats, _f64(w.wk))[None]
    vals = dense(feats, _f64(w.wv))
    logits = ((q[:, None, :] + pe) * (keys + pe)).sum(axis=-1) / math.sqrt(C)
    attn = _softmax_rows(logits)
    return state.values + dense(attn @ vals, _f64(w.wo))


def query_distances(positions: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances, padded with a zero row/column for the location token."""
    p = _f64(positions)
    diff = p[:, None, :] - p[None, :, :]
    n = p.shape[0]
    D = np.zeros((n + 1, n + 1))
    D[:n, :n] = np.sqrt((diff ** 2).sum(axis=-1))
    return D


def distance_adaptive_self_attention(state: QueryState, loc: np.ndarray, layer: LayerWeights,
                                     trace: bool = False):
    """Self-attention over queries plus the location token, logits penalized by ``sigma_i * D_ij``.

    ``sigma_i = softplus(w . v_i + b)`` from the query's current value. Queries
    use ``value + pos_enc`` for Q and K; the location token has no position
    and zero distance to everything. Returns updated ``(values, loc)``.
    """
    loc = _f64(loc).reshape(-1)
    C = state.values.shape[1]
    if loc.shape != (C,):
        raise InvalidArgument(f"location token has shape {loc.shape}, expected ({C},)")
    w = layer.self_attn
    x_qk = np.vstack([state.values + state.pos_enc, loc[None]])
    x_v = np.vstack([state.values, loc[None]])
    Q = dense(x_qk, _f64(w.wq))
    K = dense(x_qk, _f64(w.wk))
    V = dense(x_v, _f64(w.wv))
    sigma = softplus(dense(x_v, _f64(layer.sigma_w)[:, None])[:, 0] + layer.sigma_b)
    D = query_distances(state.positions)
    logits = np.einsum("ic,jc->ij", Q, K) / math.sqrt(C) - sigma[:, None] * D
    attn = _softmax_rows(logits)
    out = x_v + dense(np.einsum("ij,jc->ic", attn, V), _f64(w.wo))
    if trace:
        return out[:-1], out[-1], SelfTrace(D, sigma, logits, attn)
    return out[:-1], out[-1]


def box_head(values: np.ndarray, positions: np.ndarray, head: MlpWeights):
    """Box centers and sizes (each (N, 3)) from query values; sizes are strictly positive."""
    raw = mlp_forward(head.astype(np.float64), _f64(values))
    return box_params(raw, _f64(positions))


def box_head_boxes(values, positions, head: MlpWeights) -> list[Box3D]:
    centers, sizes = box_head(values, positions, head)
    return [Box3D(c, s) for c, s in zip(centers, sizes)]


def select(scores: np.ndarray, cfg: DecoderConfig) -> list[int]:
    if cfg.multi_target:
        return [int(i) for i in np.flatnonzero(scores >= cfg.selection_threshold)]
    return [int(np.argmax(scores))]


def grounding_forward(patch_features: np.ndarray, patch_positions: np.ndarray, loc,
                      cfg: DecoderConfig, weights: DecoderWeights) -> GroundingOutput:
    """Full decoder pass; scores are cosines between final query values and the location token."""
    weights.check(cfg)
    loc = _f64(loc.embedding if isinstance(loc, LocationToken) else loc).reshape(-1)
    if not np.all(np.isfinite(loc)):
        raise InvalidArgument("location token must be finite")
    state = init_queries(patch_positions, cfg, weights)
    boxes, layer_values = [], []
    for li in range(cfg.layers):
        layer = weights.layers[li]
        state.values = knn_cross_attention(state, patch_features, patch_positions, cfg.knn_schedule[li], layer)
        state.values, loc = distance_adaptive_self_attention(state, loc, layer)
        boxes.append(box_head(state.values, state.positions, weights.box_head))
        layer_values.append(state.values.copy())
    scores = cosine_scores(state.values, loc)
    return GroundingOutput(boxes, scores, select(scores, cfg), state.positions, layer_values, loc)
