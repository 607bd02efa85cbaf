"""Point-cloud preprocessing: depth segmentation, density clustering,
outlier removal, depth-window graph clustering, and chamfer auditing.

All filters return subsets of their input points. Depth ("z") always means
the third coordinate of a point array; callers orient their clouds so that
the sensor axis is z before filtering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    EmptyInputError,
    EmptyResultError,
    EmptySegmentationError,
    ShapeError,
)


@dataclass
class DepthMap:
    """Depth image in meters (0 marks invalid pixels) plus pinhole intrinsics."""

    values: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"depth map must be 2D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ShapeError("depth values must be finite and nonnegative")

    def backproject(self) -> np.ndarray:
        """Points (K, 3) for all nonzero pixels, camera frame, z forward."""
        rows, cols = np.nonzero(self.values)
        z = self.values[rows, cols]
        x = (cols - self.cx) * z / self.fx
        y = (rows - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=1)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based cluster labels; -1 marks noise.

    A point is core when its eps-ball (itself included) holds at least
    min_pts points. Clusters grow by breadth-first expansion from core
    points in index order, so labels are deterministic for a fixed point
    order.
    """
    points = np.asarray(points, dtype=np.float64)
    if eps <= 0:
        raise ShapeError("eps must be positive")
    if min_pts < 1:
        raise ShapeError("min_pts must be >= 1")
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neighborhoods = tree.query_ball_point(points, eps)
    core = np.array([len(nb) >= min_pts for nb in neighborhoods])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        frontier = [i]
        visited[i] = True
        labels[i] = cluster
        while frontier:
            p = frontier.pop(0)
            for q in neighborhoods[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                if not visited[q] and core[q]:
                    visited[q] = True
                    frontier.append(q)
        cluster += 1
    return labels


def sor(points: np.ndarray, k: int, std_ratio: float) -> np.ndarray:
    """Statistical outlier removal.

    Drops points whose mean distance to their k nearest neighbors exceeds
    the global mean of those distances plus std_ratio standard deviations.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k >= n:
        raise ShapeError(f"k must be < number of points ({k} >= {n})")
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=k + 1)  # first hit is the point itself
    mean_knn = dists[:, 1:].mean(axis=1)
    threshold = mean_knn.mean() + std_ratio * mean_knn.std()
    return points[mean_knn <= threshold]


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of squared nearest-neighbor distances between two sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyInputError("chamfer distance needs nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def segment_human(
    depth: DepthMap,
    reference: DepthMap,
    tau: float,
    extrinsics: np.ndarray,
    dbscan_eps: float = 0.1,
    dbscan_min_pts: int = 8,
    sor_k: int = 8,
    sor_std_ratio: float = 2.0,
) -> np.ndarray:
    """Segment the human body from a depth map against a static reference.

    Pixels within tau of the reference are zeroed, the largest 8-connected
    nonzero component survives, points are back-projected and transformed by
    the 4x4 extrinsics, then DBSCAN noise points are dropped and SOR refines
    the rest.
    """
    if depth.values.shape != reference.values.shape:
        raise ShapeError("depth and reference shapes differ")
    if tau <= 0:
        raise ShapeError("tau must be positive")
    extrinsics = np.asarray(extrinsics, dtype=np.float64)
    if extrinsics.shape != (4, 4):
        raise ShapeError("extrinsics must be 4x4")

    fg = depth.values.copy()
    fg[np.abs(depth.values - reference.values) < tau] = 0.0
    if not np.any(fg > 0):
        raise EmptySegmentationError("all pixels match the reference depth")

    labels, count = ndimage.label(fg > 0, structure=np.ones((3, 3), dtype=int))
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, count + 1))
    keep = int(np.argmax(sizes)) + 1
    fg[labels != keep] = 0.0

    component = DepthMap(fg, depth.fx, depth.fy, depth.cx, depth.cy)
    pts = component.backproject()
    homo = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    pts = (homo @ extrinsics.T)[:, :3]

    labels = dbscan(pts, dbscan_eps, dbscan_min_pts)
    pts = pts[labels >= 0]
    if pts.shape[0] == 0:
        raise EmptySegmentationError("no dense cluster after DBSCAN")
    if pts.shape[0] > sor_k:
        pts = sor(pts, sor_k, sor_std_ratio)
    return pts


@dataclass
class GpcParams:
    """Knobs for depth-window graph clustering.

    m1/m2 override the depth window; left as None they derive from the
    largest cluster's depth range widened by depth_margin.
    """

    lam: float = 2.0
    n_c: int = 10
    k: int = 8
    cell: float = 0.05
    depth_margin: float = 0.3
    m1: float | None = None
    m2: float | None = None

    def __post_init__(self) -> None:
        if self.lam <= 0 or self.n_c < 1 or self.k < 1:
            raise ShapeError("lam must be > 0 and n_c, k >= 1")
        if self.cell <= 0:
            raise ShapeError("cell must be positive")
        if self.m1 is not None and self.m2 is not None and not self.m1 < self.m2:
            raise ShapeError("depth window requires m1 < m2")


def _grid_clusters(xy: np.ndarray, cell: float) -> list[np.ndarray]:
    """Connected components of the proximity graph linking points within
    ``cell`` in the xy-plane, found by BFS over a hashed grid."""
    n = xy.shape[0]
    keys = np.floor(xy / cell).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        buckets.setdefault(key, []).append(i)
    labels = np.full(n, -1, dtype=np.int64)
    clusters: list[np.ndarray] = []
    for start in range(n):
        if labels[start] >= 0:
            continue
        cluster_id = len(clusters)
        members = []
        frontier = [start]
        labels[start] = cluster_id
        while frontier:
            p = frontier.pop()
            members.append(p)
            kx, ky = keys[p]
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for q in buckets.get((kx + dx, ky + dy), ()):
                        if labels[q] < 0 and np.linalg.norm(xy[q] - xy[p]) <= cell:
                            labels[q] = cluster_id
                            frontier.append(q)
        clusters.append(np.array(sorted(members), dtype=np.int64))
    return clusters


def gpc(points: np.ndarray, params: GpcParams) -> np.ndarray:
    """Graph-based point cloud cleaning.

    Clusters the xy-projection with a proximity graph, trims each cluster to
    points whose depth sits within lam standard deviations of the cluster
    mean, drops clusters smaller than n_c, then keeps the largest cluster
    plus every cluster reached through a k-nearest-neighbor link whose
    endpoint depth falls inside the window (m1, m2) derived from the largest
    cluster.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < params.n_c:
        raise ShapeError("fewer points than the minimum cluster size")

    clusters = _grid_clusters(points[:, :2], params.cell)

    trimmed: list[np.ndarray] = []
    for members in clusters:
        z = points[members, 2]
        keep = np.abs(z - z.mean()) < params.lam * z.std()
        survivors = members[keep]
        if survivors.shape[0] >= params.n_c:
            trimmed.append(survivors)
    if not trimmed:
        raise EmptyResultError("every cluster was trimmed away")

    sizes = [c.shape[0] for c in trimmed]
    largest = int(np.argmax(sizes))  # argmax takes the lowest index on ties
    main = trimmed[largest]

    z_main = points[main, 2]
    m1 = params.m1 if params.m1 is not None else float(z_main.min() - params.depth_margin)
    m2 = params.m2 if params.m2 is not None else float(z_main.max() + params.depth_margin)

    all_idx = np.concatenate(trimmed)
    owner = np.concatenate([np.full(c.shape[0], ci) for ci, c in enumerate(trimmed)])
    tree = cKDTree(points[all_idx])
    k = min(params.k + 1, all_idx.shape[0])
    _, nn = tree.query(points[main], k=k)
    nn = np.atleast_2d(nn)

    reachable = {largest}
    for row in nn:
        for local in row:
            ci = int(owner[local])
            if ci == largest or ci in reachable:
                continue
            z = points[all_idx[local], 2]
            if m1 < z < m2:
                reachable.add(ci)

    keep_idx = np.concatenate([trimmed[ci] for ci in sorted(reachable)])
    return points[np.sort(keep_idx)]
