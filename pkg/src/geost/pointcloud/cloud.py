"""Point-cloud data model, kNN graphs, farthest point sampling and receptive fields."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

# Extra kd-tree candidates fetched per query so distance ties at the k-th
# neighbor can be resolved by index without a second query in most rows.
_KNN_SLACK = 4


@dataclass(frozen=True)
class PointCloud:
    """Unordered set of 3D points.

    ``origin`` optionally records, for every point, the flat (row-major) pixel
    index of the organized scan it was read from.
    """

    points: np.ndarray
    origin: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.origin is not None:
            origin = np.asarray(self.origin, dtype=np.int64)
            if origin.shape != (len(pts),):
                raise ValueError("origin must hold one pixel index per point")
            object.__setattr__(self, "origin", origin)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        origin = None if self.origin is None else self.origin[indices]
        return PointCloud(self.points[indices], origin)


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class NeighborGraph:
    """k nearest neighbors of every point, self excluded.

    Rows are sorted by ascending (distance, index).
    """

    neighbors: np.ndarray
    distances: np.ndarray

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self) -> int:
        return self.neighbors.shape[0]


def _row_sort(cand: np.ndarray, dist: np.ndarray):
    order = np.lexsort((cand, dist), axis=-1)
    return np.take_along_axis(cand, order, -1), np.take_along_axis(dist, order, -1)


def build_knn_graph(cloud: CloudLike, k: int) -> NeighborGraph:
    """Exact kNN graph backed by a kd-tree.

    Candidate distances are recomputed as ``sqrt(sum((q - p)**2))`` so that the
    result matches an exhaustive scan bit for bit, including index tie-breaks.
    """
    pts = as_points(cloud)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < k + 1:
        raise ValueError(f"a {k}-neighbor graph needs at least {k + 1} points, got {n}")

    tree = cKDTree(pts)
    q = min(n, k + 1 + _KNN_SLACK)
    _, cand = tree.query(pts, k=q)
    cand = cand.astype(np.int64)
    dist = np.sqrt(((pts[cand] - pts[:, None, :]) ** 2).sum(-1))
    rows = np.arange(n)
    dist[cand == rows[:, None]] = np.inf
    cand, dist = _row_sort(cand, dist)
    neighbors = cand[:, :k].copy()
    distances = dist[:, :k].copy()

    if q < n:
        # Rows whose k-th distance reaches the last candidate may hide ties
        # outside the candidate set; resolve those with a radius query.
        last = np.where(np.isfinite(dist), dist, -np.inf).max(axis=1)
        kth = distances[:, -1]
        ambiguous = np.nonzero(last - kth <= 1e-9 * (1.0 + kth))[0]
        for i in ambiguous:
            radius = kth[i] * (1 + 1e-9) + 1e-12
            members = np.asarray(tree.query_ball_point(pts[i], radius), dtype=np.int64)
            members = members[members != i]
            d = np.sqrt(((pts[members] - pts[i]) ** 2).sum(-1))
            order = np.lexsort((members, d))[:k]
            neighbors[i] = members[order]
            distances[i] = d[order]

    return NeighborGraph(neighbors, distances)


def brute_force_knn(cloud: CloudLike, k: int) -> NeighborGraph:
    """O(n^2) exhaustive kNN with the same tie rule; used as a fallback and oracle."""
    pts = as_points(cloud)
    n = len(pts)
    if n < k + 1:
        raise ValueError(f"a {k}-neighbor graph needs at least {k + 1} points, got {n}")
    neighbors = np.empty((n, k), dtype=np.int64)
    distances = np.empty((n, k))
    idx = np.arange(n)
    for i in range(n):
        d = np.sqrt(((pts - pts[i]) ** 2).sum(-1))
        d[i] = np.inf
        order = np.lexsort((idx, d))[:k]
        neighbors[i] = order
        distances[i] = d[order]
    return NeighborGraph(neighbors, distances)


def farthest_point_sample(
    cloud: CloudLike, n: int, seed: int = 0, start: Optional[int] = None
) -> np.ndarray:
    """Greedy farthest point sampling.

    The first index is drawn from ``np.random.default_rng(seed)`` unless
    ``start`` is given. Later picks maximize the squared distance to the
    selected set; ties go to the lowest index.
    """
    pts = as_points(cloud)
    total = len(pts)
    if n > total:
        raise ValueError(f"cannot sample {n} points from a cloud of {total}")
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    if start is None:
        start = int(np.random.default_rng(seed).integers(total))
    if not 0 <= start < total:
        raise IndexError(f"start index {start} out of range")

    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    # Contiguous columns; (dx^2 + dy^2) + dz^2 matches the row-sum order bit for bit.
    x, y, z = (np.ascontiguousarray(pts[:, j]) for j in range(3))

    def sq_dist(i):
        dx, dy, dz = x - x[i], y - y[i], z - z[i]
        return dx * dx + dy * dy + dz * dz

    min_d = sq_dist(start)
    min_d[start] = -np.inf
    for i in range(1, n):
        nxt = int(np.argmax(min_d))
        selected[i] = nxt
        np.minimum(min_d, sq_dist(nxt), out=min_d)
        min_d[nxt] = -np.inf
    return selected


def scaling_factor(clouds: Iterable[CloudLike], k: int, graphs: Optional[Sequence[NeighborGraph]] = None) -> float:
    """Mean distance of every point to its k nearest neighbors over a dataset.

    kNN is computed inside each cloud; the mean runs over the union of points.
    """
    clouds = list(clouds)
    if not clouds:
        raise ValueError("scaling factor of an empty dataset")
    total = 0.0
    count = 0
    for i, cloud in enumerate(clouds):
        graph = graphs[i] if graphs is not None else build_knn_graph(cloud, k)
        if graph.k != k:
            raise ValueError(f"graph has k={graph.k}, expected {k}")
        total += float(graph.distances.sum())
        count += graph.distances.size
    s = total / count
    if not s > 0:
        raise ValueError("degenerate dataset: all neighbor distances are zero")
    return s


def normalize_cloud(cloud: CloudLike, s: float) -> CloudLike:
    """Scale coordinates by ``1/s``; keeps the input's type."""
    if not s > 0:
        raise ValueError(f"scaling factor must be positive, got {s}")
    if isinstance(cloud, PointCloud):
        return PointCloud(cloud.points / s, cloud.origin)
    return as_points(cloud) / s


@dataclass(frozen=True)
class ReceptiveField:
    center: int
    members: np.ndarray = field(repr=False)
    hops: int = 0

    def __contains__(self, index) -> bool:
        return bool(np.isin(index, self.members))

    def __len__(self) -> int:
        return len(self.members)


def receptive_field(graph: NeighborGraph, center: int, hops: int) -> ReceptiveField:
    """Union of the 0..hops-fold kNN neighborhoods of ``center`` (sorted indices)."""
    n = len(graph)
    if not 0 <= center < n:
        raise IndexError(f"center {center} out of range for {n} points")
    if hops < 0:
        raise ValueError("hops must be non-negative")
    seen = np.zeros(n, dtype=bool)
    seen[center] = True
    frontier = np.array([center], dtype=np.int64)
    for _ in range(hops):
        nxt = np.unique(graph.neighbors[frontier].ravel())
        nxt = nxt[~seen[nxt]]
        if nxt.size == 0:
            break
        seen[nxt] = True
        frontier = nxt
    return ReceptiveField(center, np.nonzero(seen)[0], hops)


def center_receptive_field(cloud: CloudLike, field: ReceptiveField) -> np.ndarray:
    pts = as_points(cloud)[field.members]
    if len(pts) == 0:
        raise ValueError("empty receptive field")
    return pts - pts.mean(axis=0)
