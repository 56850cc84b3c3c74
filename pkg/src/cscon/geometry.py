"""Point-cloud preprocessing: normalization, FPS, KNN grouping, patch frames.

All distances are squared Euclidean computed in float64. Ties are broken
toward the lower point index everywhere so results are a total function of
the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None
    degenerate: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValueError(f"point cloud must be (p>=1, 3), got {self.points.shape}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PatchSet:
    centers: np.ndarray  # (N, 3)
    patches: np.ndarray  # (N, k, 3), center-relative
    center_indices: np.ndarray | None = field(default=None)

    @property
    def N(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.patches.shape[1]


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float32)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide collapses to zeros and is flagged
    ``degenerate`` instead of being scaled.
    """
    pts = np.asarray(cloud.points, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise ValueError("normalize_cloud: non-finite coordinates in input")
    pts = pts - pts.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1)).max()
    if radius == 0.0 or np.all(pts == pts[0]):
        return PointCloud(np.zeros_like(pts), cloud.label, degenerate=True)
    return PointCloud(pts / radius, cloud.label)


def sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(..., C, p) squared distances between ``centers`` (..., C, 3) and ``points`` (..., p, 3)."""
    diff = points[..., None, :, :].astype(np.float64) - centers[..., :, None, :].astype(np.float64)
    return (diff * diff).sum(axis=-1)


def fps_indices(points: np.ndarray, n: int, start=0) -> np.ndarray:
    """Farthest point sampling on one cloud (p, 3) or a batch (B, p, 3).

    ``start`` is an int or, for batches, one start index per cloud.
    Selected points are excluded from later picks, so duplicates in the
    cloud never produce repeated indices.
    """
    pts = np.asarray(points)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    b, p, _ = pts.shape
    if not 1 <= n <= p:
        raise ValueError(f"fps: need 1 <= N <= p, got N={n}, p={p}")
    starts = np.broadcast_to(np.asarray(start, dtype=np.intp), (b,))
    if (starts < 0).any() or (starts >= p).any():
        raise ValueError(f"fps: start index out of range for p={p}")
    pts64 = pts.astype(np.float64)
    rows = np.arange(b)
    out = np.empty((b, n), dtype=np.intp)
    out[:, 0] = starts
    mind = np.full((b, p), np.inf)
    cur = starts.copy()
    for i in range(1, n):
        diff = pts64 - pts64[rows, cur][:, None, :]
        d = (diff * diff).sum(axis=-1)
        np.minimum(mind, d, out=mind)
        mind[rows, cur] = -np.inf
        cur = mind.argmax(axis=1)
        out[:, i] = cur
    return out[0] if single else out


def fps(cloud, n: int, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    pts = _points(cloud)
    idx = fps_indices(pts, n, start)
    return pts[idx], idx


def knn_indices(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points per center, ascending distance then index."""
    p = points.shape[-2]
    if not 1 <= k <= p:
        raise ValueError(f"knn: need 1 <= k <= p, got k={k}, p={p}")
    d = sq_dists(points, centers)
    if k == p:
        return np.argsort(d, axis=-1, kind="stable")
    # the k-th smallest distance bounds the candidates; ties at the boundary
    # need the full stable order, so fall back to it only for those rows
    part = np.sort(np.argpartition(d, k - 1, axis=-1)[..., :k], axis=-1)
    sel = np.take_along_axis(d, part, axis=-1)
    order = np.take_along_axis(part, np.argsort(sel, axis=-1, kind="stable"), axis=-1)
    tied = (d <= sel.max(axis=-1, keepdims=True)).sum(axis=-1) > k
    if tied.any():
        full = np.argsort(d[tied], axis=-1, kind="stable")[..., :k]
        order[tied] = full
    return order


def knn(cloud, centers: np.ndarray, k: int) -> np.ndarray:
    """Absolute coordinates of each center's ``k`` nearest cloud points, (N, k, 3)."""
    pts = _points(cloud)
    idx = knn_indices(pts, np.asarray(centers, dtype=np.float32), k)
    return pts[idx]


def normalize_patches(patches_absolute: np.ndarray, centers: np.ndarray, center_indices=None) -> PatchSet:
    patches_absolute = np.asarray(patches_absolute, dtype=np.float32)
    centers = np.asarray(centers, dtype=np.float32)
    if (
        patches_absolute.ndim != 3
        or patches_absolute.shape[2] != 3
        or centers.shape != (patches_absolute.shape[0], 3)
    ):
        raise ValueError(
            f"normalize_patches: patches {patches_absolute.shape} vs centers {centers.shape}"
        )
    rel = patches_absolute - centers[:, None, :]
    return PatchSet(centers=centers, patches=rel, center_indices=center_indices)


def patchify(cloud, n: int, k: int, start: int = 0) -> PatchSet:
    pts = _points(cloud)
    centers, idx = fps(pts, n, start)
    return normalize_patches(knn(pts, centers, k), centers, idx)


def patchify_batch(points: np.ndarray, n: int, k: int, starts=0) -> tuple[np.ndarray, np.ndarray]:
    """Batched FPS + KNN: (B, p, 3) -> centers (B, N, 3), relative patches (B, N, k, 3)."""
    points = np.asarray(points, dtype=np.float32)
    cidx = fps_indices(points, n, starts)
    centers = np.take_along_axis(points, cidx[..., None], axis=1)
    nidx = knn_indices(points, centers, k)
    b = points.shape[0]
    groups = points[np.arange(b)[:, None, None], nidx]
    return centers, groups - centers[:, :, None, :]
