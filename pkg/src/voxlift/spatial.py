"""Voxel keys, exact k-nearest neighbors and farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class KnnResult:
    indices: np.ndarray  # (q, k) int64
    distances: np.ndarray  # (q, k) float64, ascending per row


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates (n, 3); cells are closed on the left, open on the right."""
    if not voxel_size > 0:
        raise InvalidArgument(f"voxel_size must be positive, got {voxel_size}")
    pts = np.asarray(points, dtype=np.float64)
    return np.floor(pts / voxel_size).astype(np.int64)


def voxel_key(p, voxel_size: float) -> tuple[int, int, int]:
    ix, iy, iz = voxel_keys(np.asarray(p, dtype=np.float64).reshape(1, 3), voxel_size)[0]
    return int(ix), int(iy), int(iz)


def _sq_dist(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # Explicit per-axis form: brute force and grid paths must round identically.
    dx = pts[..., 0] - q[..., 0]
    dy = pts[..., 1] - q[..., 1]
    dz = pts[..., 2] - q[..., 2]
    return dx * dx + dy * dy + dz * dz


def _check_knn_args(query_pos, point_pos, k):
    q = np.asarray(query_pos, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(point_pos, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] == 0:
        raise InvalidArgument("knn needs at least one point")
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    return q, p, min(int(k), p.shape[0])


def knn_brute(query_pos, point_pos, k: int, chunk: int = 256) -> KnnResult:
    q, p, k = _check_knn_args(query_pos, point_pos, k)
    idx = np.empty((q.shape[0], k), dtype=np.int64)
    d2 = np.empty((q.shape[0], k))
    for s in range(0, q.shape[0], chunk):
        block = _sq_dist(q[s:s + chunk, None, :], p[None, :, :])
        # stable sort keeps ascending point index among equal distances
        order = np.argsort(block, axis=1, kind="stable")[:, :k]
        idx[s:s + chunk] = order
        d2[s:s + chunk] = np.take_along_axis(block, order, axis=1)
    return KnnResult(idx, np.sqrt(d2))


def _median_nn_spacing(p: np.ndarray, sample: int = 64) -> float:
    step = max(1, p.shape[0] // sample)
    probe = p[::step][:sample]
    d2 = _sq_dist(probe[:, None, :], p[None, :, :])
    d2[d2 == 0] = np.inf
    nn = np.sqrt(d2.min(axis=1))
    nn = nn[np.isfinite(nn)]
    return float(np.median(nn)) if nn.size else 0.0


class _Grid:
    """Uniform hash grid over a point set, used for exact shell-expanding search."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = points
        self.cell = cell
        keys = np.floor(points / cell).astype(np.int64)
        self.lo = keys.min(axis=0)
        self.hi = keys.max(axis=0)
        self.cells: dict[tuple, np.ndarray] = {}
        order = np.lexsort((np.arange(len(keys)), keys[:, 2], keys[:, 1], keys[:, 0]))
        sk = keys[order]
        breaks = np.flatnonzero(np.any(np.diff(sk, axis=0) != 0, axis=1)) + 1
        for group in np.split(order, breaks):
            self.cells[tuple(keys[group[0]])] = group

    def query(self, q: np.ndarray, k: int):
        c = np.floor(q / self.cell).astype(np.int64)
        cand: list[np.ndarray] = []
        n_found = 0
        r = 0
        while True:
            for off in _shell(r):
                key = (c[0] + off[0], c[1] + off[1], c[2] + off[2])
                members = self.cells.get(key)
                if members is not None:
                    cand.append(members)
                    n_found += len(members)
            covers_all = np.all(c - r <= self.lo) and np.all(c + r >= self.hi)
            if n_found >= k or covers_all:
                idx = np.concatenate(cand) if cand else np.empty(0, np.int64)
                d2 = _sq_dist(q[None, :], self.points[idx])
                if covers_all:
                    break
                kth = np.partition(d2, k - 1)[k - 1]
                # distance from q to the outside of the searched block of cells
                lower = (c - r) * self.cell
                upper = (c + r + 1) * self.cell
                margin = min(np.min(q - lower), np.min(upper - q))
                # strict: a point outside at exactly the kth distance could win the index tie-break
                if np.sqrt(kth) < margin * (1 - 1e-9) - 1e-12:
                    break
            r += 1
        order = np.lexsort((idx, d2))[:k]
        return idx[order], d2[order]


_SHELLS: dict[int, list] = {}


def _shell(r: int):
    if r not in _SHELLS:
        if r == 0:
            _SHELLS[r] = [(0, 0, 0)]
        else:
            rng = range(-r, r + 1)
            _SHELLS[r] = [o for o in product(rng, rng, rng) if max(abs(o[0]), abs(o[1]), abs(o[2])) == r]
    return _SHELLS[r]


def knn_grid(query_pos, point_pos, k: int, cell: float | None = None) -> KnnResult:
    """Grid-accelerated exact k-NN; identical output to :func:`knn_brute`."""
    q, p, k = _check_knn_args(query_pos, point_pos, k)
    if cell is None:
        cell = _median_nn_spacing(p)
        if cell <= 0:
            extent = float(np.max(p.max(axis=0) - p.min(axis=0)))
            cell = extent / max(1.0, np.cbrt(p.shape[0])) if extent > 0 else 1.0
        cell *= max(1.0, np.cbrt(k))
    grid = _Grid(p, cell)
    idx = np.empty((q.shape[0], k), dtype=np.int64)
    d2 = np.empty((q.shape[0], k))
    for i, row in enumerate(q):
        idx[i], d2[i] = grid.query(row, k)
    return KnnResult(idx, np.sqrt(d2))


def knn(query_pos, point_pos, k: int, method: str = "auto") -> KnnResult:
    """Exact k nearest neighbors by Euclidean distance, ties to the smaller index.

    Returns ``min(k, m)`` columns. ``method`` is ``"brute"``, ``"grid"`` or
    ``"auto"``; all produce identical results.
    """
    if method == "brute":
        return knn_brute(query_pos, point_pos, k)
    if method == "grid":
        return knn_grid(query_pos, point_pos, k)
    if method != "auto":
        raise InvalidArgument(f"unknown knn method {method!r}")
    n_q = np.asarray(query_pos).reshape(-1, 3).shape[0]
    m = np.asarray(point_pos).reshape(-1, 3).shape[0]
    if n_q * m <= 4_000_000:
        return knn_brute(query_pos, point_pos, k)
    return knn_grid(query_pos, point_pos, k)


def fps(points, count: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; returns indices in selection order.

    Each pick maximizes the distance to the already-selected set, ties going
    to the smaller index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = pts.shape[0]
    if not 1 <= count <= m:
        raise InvalidArgument(f"cannot sample {count} of {m} points")
    if not 0 <= seed_index < m:
        raise InvalidArgument(f"seed_index {seed_index} out of range for {m} points")
    out = np.empty(count, dtype=np.int64)
    out[0] = seed_index
    min_d2 = _sq_dist(pts[seed_index], pts)
    min_d2[seed_index] = -1.0
    for s in range(1, count):
        nxt = int(np.argmax(min_d2))
        out[s] = nxt
        np.minimum(min_d2, _sq_dist(pts[nxt], pts), out=min_d2)
        min_d2[nxt] = -1.0
    return out


def covering_radius(points, kept_positions) -> float:
    """Largest distance from any point to its nearest kept position."""
    res = knn(points, kept_positions, 1)
    return float(res.distances[:, 0].max())
