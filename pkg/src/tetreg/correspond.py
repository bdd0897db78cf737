"""Correspondence construction between a model surface and an observed cloud.

A correspondence set is a strict one-to-one partial matching: no source
index and no target index appears twice. Builders: mutual nearest neighbors
under a rigid pre-alignment, optimal binarization of an externally supplied
soft score matrix, and robust outlier pruning. Rigid alignment itself comes
from point-to-point ICP with a closed-form Procrustes fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .mesh import PointCloud

# Pairwise-distance matrices up to this many entries use brute force, which
# breaks ties by lowest index exactly; larger inputs go through a k-d tree.
_BRUTE_FORCE_LIMIT = 4_000_000


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).ravel()
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-8 or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class CorrespondenceSet:
    """One-to-one pairs (source index, target index), sorted by source index."""

    pairs: np.ndarray
    n_source: int
    n_target: int

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        pairs = pairs[np.argsort(pairs[:, 0], kind="stable")]
        object.__setattr__(self, "pairs", pairs)
        if len(pairs):
            if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= self.n_source:
                raise ValueError("source index out of range")
            if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= self.n_target:
                raise ValueError("target index out of range")
            if len(np.unique(pairs[:, 0])) != len(pairs) or len(np.unique(pairs[:, 1])) != len(pairs):
                raise ValueError("correspondences must be one-to-one")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def source_indices(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target_indices(self) -> np.ndarray:
        return self.pairs[:, 1]

    def save(self, path) -> None:
        np.savetxt(path, self.pairs, fmt="%d", header=f"{self.n_source} {self.n_target}")

    @classmethod
    def load(cls, path) -> "CorrespondenceSet":
        with open(path) as fh:
            header = fh.readline().lstrip("#").split()
            n, m = int(header[0]), int(header[1])
            body = fh.read().split()
        pairs = np.array(body, dtype=np.int64).reshape(-1, 2)
        return cls(pairs=pairs, n_source=n, n_target=m)


def _nearest(query: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and distance of the nearest point; exact ties resolve to the lowest index."""
    if query.size * len(points) <= _BRUTE_FORCE_LIMIT * 3:
        d2 = ((query[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        return idx, np.sqrt(d2[np.arange(len(query)), idx])
    tree = cKDTree(points)
    k = min(4, len(points))
    dist, idx = tree.query(query, k=k)
    if k == 1:
        return idx, dist
    best = dist[:, :1]
    tied = dist <= best + 1e-12 * np.maximum(best, 1.0)
    pick = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    return pick, dist[:, 0]


def mutual_nn(
    x: PointCloud,
    y: PointCloud,
    rigid: RigidTransform | None = None,
    radius: float | None = None,
) -> CorrespondenceSet:
    """Pairs (i, j) where each is the other's nearest neighbor under the alignment.

    Source points are mapped through the rigid transform before the forward
    query; target points through its inverse for the reverse query. Pairs
    farther apart than ``radius`` (defaults to 2.5x the median target
    spacing) are dropped.
    """
    rigid = rigid or RigidTransform.identity()
    if radius is None:
        radius = 2.5 * median_spacing(y)
    if radius <= 0:
        raise ValueError("radius must be positive")
    xt = rigid.apply(x.points)
    fwd_idx, fwd_dist = _nearest(xt, y.points)
    rev_idx, _ = _nearest(rigid.inverse().apply(y.points), x.points)
    i = np.arange(len(x.points))
    mutual = rev_idx[fwd_idx] == i
    keep = mutual & (fwd_dist < radius)
    pairs = np.column_stack([i[keep], fwd_idx[keep]])
    return CorrespondenceSet(pairs=pairs, n_source=len(x.points), n_target=len(y.points))


def median_spacing(cloud: PointCloud) -> float:
    """Median nearest-neighbor distance within a cloud (0 for a single point)."""
    if len(cloud) < 2:
        return 0.0
    tree = cKDTree(cloud.points)
    dist, _ = tree.query(cloud.points, k=2)
    return float(np.median(dist[:, 1]))


def lap_binarize(soft: np.ndarray) -> CorrespondenceSet:
    """Optimal one-to-one matching maximizing the total soft score.

    Rectangular matrices produce min(n, m) pairs. An all-zero matrix carries
    no information and is rejected.
    """
    soft = np.asarray(soft, dtype=np.float64)
    if soft.ndim != 2 or soft.size == 0:
        raise ValueError("soft matrix must be 2-D and nonempty")
    if soft.min() < 0:
        raise ValueError("soft scores must be nonnegative")
    if not soft.any():
        raise ValueError("soft matrix is identically zero")
    rows, cols = linear_sum_assignment(-soft)
    pairs = np.column_stack([rows, cols])
    return CorrespondenceSet(pairs=pairs, n_source=soft.shape[0], n_target=soft.shape[1])


def load_soft_matrix(path) -> np.ndarray:
    mat = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return mat


def prune_outliers(
    corr: CorrespondenceSet,
    x: PointCloud,
    y: PointCloud,
    rigid: RigidTransform | None = None,
) -> CorrespondenceSet:
    """Drop pairs whose aligned distance exceeds median + 3 * MAD.

    Robust and parameter-free; the minimum-distance pair is always kept so
    the result is never empty.
    """
    if len(corr) == 0:
        raise ValueError("cannot prune an empty correspondence set")
    rigid = rigid or RigidTransform.identity()
    d = np.linalg.norm(
        rigid.apply(x.points[corr.source_indices]) - y.points[corr.target_indices], axis=1
    )
    med = np.median(d)
    mad = np.median(np.abs(d - med))
    keep = d <= med + 3.0 * mad
    keep[np.argmin(d)] = True
    return CorrespondenceSet(
        pairs=corr.pairs[keep], n_source=corr.n_source, n_target=corr.n_target
    )


def residuals(
    corr: CorrespondenceSet, x: PointCloud, y: PointCloud
) -> tuple[np.ndarray, np.ndarray]:
    """Per-source displacement y_j - x_i for matched pairs.

    Returns (residuals, matched) where residuals has shape (n_source, 3),
    is zero on unmatched rows, and matched flags the rows that carry data.
    """
    out = np.zeros((corr.n_source, 3))
    matched = np.zeros(corr.n_source, dtype=bool)
    out[corr.source_indices] = y.points[corr.target_indices] - x.points[corr.source_indices]
    matched[corr.source_indices] = True
    return out, matched


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares proper rigid motion mapping src onto dst (Procrustes).

    The SVD sign guard rules out reflections. Degenerate (collinear) inputs
    are rejected since the rotation about the line axis is unconstrained.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise ValueError("need at least 3 paired points")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise ValueError("points are collinear; rigid fit is degenerate")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, c_dst - r @ c_src)


@dataclass
class IcpResult:
    transform: RigidTransform
    rms: float
    iterations: int
    rms_history: list[float] = field(default_factory=list)


def icp_rigid(
    src: PointCloud, dst: PointCloud, max_iter: int = 50, tol: float = 1e-6
) -> IcpResult:
    """Point-to-point ICP: alternate nearest-neighbor matching and Procrustes fits.

    Stops when the RMS improvement drops below ``tol`` (mm) and returns the
    transform of the best RMS seen. The RMS sequence is non-increasing by
    the alternating-minimization structure.
    """
    if len(src) < 3 or len(dst) < 3:
        raise ValueError("ICP needs at least 3 points on each side")
    for name, cloud in (("source", src), ("destination", dst)):
        centered = cloud.points - cloud.points.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 2:
            raise ValueError(f"{name} points are collinear; rigid fit is degenerate")
    current = RigidTransform.identity()
    best: IcpResult | None = None
    history: list[float] = []
    for it in range(1, max_iter + 1):
        moved = current.apply(src.points)
        idx, dist = _nearest(moved, dst.points)
        rms = float(np.sqrt(np.mean(dist**2)))
        history.append(rms)
        if best is None or rms < best.rms:
            best = IcpResult(transform=current, rms=rms, iterations=it)
        if best.rms == 0.0 or (len(history) > 1 and history[-2] - rms < tol):
            break
        current = fit_rigid(src.points, dst.points[idx])
    assert best is not None
    best.rms_history = history
    return best
