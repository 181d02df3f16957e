"""Non-differentiable point-set geometry.

Sampling, neighbor search, grouping, density estimation and interpolation
weights are computed here in float64 numpy and fed to the differentiable
stack as constants (indices, local coordinates, densities). All functions
are pure and deterministic: distance ties always break to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pointconv import tensor as T

__all__ = [
    "PointCloud",
    "Neighborhood",
    "CANONICAL_START",
    "farthest_point_sample",
    "knn_group",
    "kde_density",
    "inverse_density",
    "three_nn_interpolate",
]

# sentinel start for farthest point sampling: seed at the point nearest the
# coordinate mean (deterministic, used for evaluation)
CANONICAL_START = "canonical"


class GeometryError(ValueError):
    """Invalid point-set operation arguments."""


@dataclass
class PointCloud:
    """Positions with optional per-point features, labels and densities.

    Coordinates are dimensionless model units; generated clouds are scaled
    to the unit ball (``normalized`` set). ``labels`` is a per-cloud int for
    classification or an (N,) int array for segmentation.
    """

    positions: np.ndarray
    features: np.ndarray | None = None
    labels: object = None
    density: np.ndarray | None = None
    normalized: bool = False
    has_normals: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[0] < 1:
            raise GeometryError(f"positions must be (N, d) with N >= 1, got {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise GeometryError("positions contain non-finite values")
        if self.features is not None:
            self.features = np.ascontiguousarray(self.features)
            if self.features.shape[0] != self.n:
                raise GeometryError(
                    f"features rows {self.features.shape[0]} != point count {self.n}"
                )
        if self.normalized and np.linalg.norm(self.positions, axis=1).max() > 1 + 1e-6:
            raise GeometryError("normalized cloud exceeds the unit ball")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass
class Neighborhood:
    """Grouped local regions around sampled centroids for one layer."""

    centroid_indices: np.ndarray  # (N',)
    neighbor_indices: np.ndarray  # (N', K)
    local_coords: np.ndarray      # (N', K, d): neighbor minus centroid, exact
    grouped_features: np.ndarray | None = None       # (N', K, C)
    grouped_inverse_density: np.ndarray | None = None  # (N', K), normalized


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact pairwise squared distances (M, N) between rows of a and b.

    Summed per coordinate as (a0-b0)^2 + (a1-b1)^2 + ... so every entry is
    the exact elementwise form (no |a|^2+|b|^2-2ab cancellation), keeping
    distance ties between symmetric configurations exact.
    """
    sq = np.square(a[:, 0, None] - b[None, :, 0])
    for d in range(1, a.shape[1]):
        sq += np.square(a[:, d, None] - b[None, :, d])
    return sq


def _fps_seed(pos: np.ndarray, start) -> int:
    if start == CANONICAL_START:
        return int(np.argmin(((pos - pos.mean(axis=0)) ** 2).sum(axis=1)))
    seed = int(start)
    if not 0 <= seed < pos.shape[0]:
        raise GeometryError(f"start index {seed} outside [0, {pos.shape[0]})")
    return seed


def _fps_core(n_out: int, seed: int, row_of) -> np.ndarray:
    """Greedy max-min selection given a function yielding squared-distance rows."""
    chosen = np.empty(n_out, dtype=np.int64)
    chosen[0] = seed
    min_sq = row_of(seed).copy()
    for i in range(1, n_out):
        nxt = int(np.argmax(min_sq))
        chosen[i] = nxt
        np.minimum(min_sq, row_of(nxt), out=min_sq)
    return chosen


def farthest_point_sample(cloud: PointCloud, n_out: int, start=CANONICAL_START) -> np.ndarray:
    """Greedy max-min subsampling; returns n_out distinct indices.

    Each step adds the point with the largest distance to the chosen set,
    lowest index on ties. ``start`` is either an explicit seed index or
    CANONICAL_START (the point nearest the coordinate mean).
    """
    n = cloud.n
    if not 1 <= n_out <= n:
        raise GeometryError(f"n_out={n_out} outside [1, {n}]")
    pos = cloud.positions
    seed = _fps_seed(pos, start)
    return _fps_core(n_out, seed, lambda i: ((pos - pos[i]) ** 2).sum(axis=1))


def _topk_by_value_index(sq_rows: np.ndarray, k: int, n: int) -> np.ndarray:
    """Per-row indices of the k smallest entries in exact (value, index) order.

    Fast path: partition to k candidates, list them index-ascending, then a
    stable value sort (which therefore breaks ties by index). Rows where a
    value tie crosses the selection boundary are re-done with a full stable
    sort, so the result always equals the full-sort answer.
    """
    part = np.argpartition(sq_rows, k - 1, axis=1)[:, :k]
    cand = np.sort(part, axis=1)
    vals = np.take_along_axis(sq_rows, cand, axis=1)
    order = np.argsort(vals, axis=1, kind="stable")
    sel = np.take_along_axis(cand, order, axis=1)
    kth_val = np.take_along_axis(vals, order[:, -1:], axis=1)
    inside = (vals == kth_val).sum(axis=1)
    total = (sq_rows == kth_val).sum(axis=1)
    ambiguous = total > inside
    if np.any(ambiguous):
        full = np.argsort(sq_rows[ambiguous], axis=1, kind="stable")[:, :k]
        sel[ambiguous] = full
    return sel


def _assemble_neighborhood(cloud, centroid_indices, k, sq_rows) -> Neighborhood:
    """Self-first neighbor rows from precomputed squared-distance rows."""
    pos = cloud.positions
    n = cloud.n
    m = centroid_indices.shape[0]
    nbr = np.empty((m, k), dtype=np.int64)
    nbr[:, 0] = centroid_indices
    if k > 1 and k >= n:
        order = np.argsort(sq_rows, axis=1, kind="stable")  # stable = ties to lowest index
        # drop the centroid's own entry from the sorted order, keep k-1 others
        keep = order != centroid_indices[:, None]
        others = order[keep].reshape(m, n - 1)
        avail = min(k - 1, n - 1)
        nbr[:, 1:1 + avail] = others[:, :avail]
        if avail < k - 1:
            nbr[:, 1 + avail:] = nbr[:, :1]  # pad by repeating the nearest entry
    elif k > 1:
        sel = _topk_by_value_index(sq_rows, k, n)
        keep = sel != centroid_indices[:, None]
        # the centroid is normally among its own k nearest; when coincident
        # lower-index twins push it out, drop the k-th candidate instead
        spare = keep.sum(axis=1) == k
        keep[spare, -1] = False
        nbr[:, 1:] = sel[keep].reshape(m, k - 1)

    local = pos[nbr] - pos[centroid_indices][:, None, :]
    grouped_features = cloud.features[nbr] if cloud.features is not None else None
    grouped_inv = None
    if cloud.density is not None:
        grouped_inv = inverse_density(cloud.density)[nbr]
    return Neighborhood(centroid_indices, nbr, local, grouped_features, grouped_inv)


def knn_group(cloud: PointCloud, centroid_indices: np.ndarray, k: int) -> Neighborhood:
    """Group the K nearest points (self first) around each centroid.

    Neighbors after the centroid itself are ordered by (distance, index);
    when the cloud has fewer than K points the first neighbor is repeated.
    Local coordinates are exact position differences. Densities, when
    present on the cloud, are grouped as normalized inverse densities.
    """
    if k < 1:
        raise GeometryError(f"k must be >= 1, got {k}")
    centroid_indices = np.asarray(centroid_indices, dtype=np.int64)
    sq = _sq_dists(cloud.positions[centroid_indices], cloud.positions)
    return _assemble_neighborhood(cloud, centroid_indices, k, sq)


def _kde_from_sq(sq: np.ndarray, dim: int, bandwidth: float) -> np.ndarray:
    h2 = bandwidth * bandwidth
    norm = (2.0 * np.pi * h2) ** (-dim / 2.0)
    return norm * np.exp(sq / (-2.0 * h2)).mean(axis=1)


def kde_density(cloud: PointCloud, bandwidth: float) -> np.ndarray:
    """Gaussian kernel density estimate at every point, self term included.

    density(p_i) = (1/N) sum_j (2 pi h^2)^(-d/2) exp(-|p_i - p_j|^2 / (2 h^2))

    computed exactly over the whole cloud and stored on ``cloud.density``.
    """
    if bandwidth <= 0:
        raise GeometryError(f"bandwidth must be positive, got {bandwidth}")
    pos = cloud.positions
    dens = _kde_from_sq(_sq_dists(pos, pos), cloud.dim, bandwidth)
    cloud.density = dens
    return dens


def _full_sq(cloud: PointCloud, keep: bool) -> np.ndarray:
    """The cloud's full pairwise matrix, optionally kept on its cache."""
    sq = cloud._cache.get("sqfull")
    if sq is None:
        sq = _sq_dists(cloud.positions, cloud.positions)
        if keep:
            cloud._cache["sqfull"] = sq
    return sq


def level_geometry(cloud: PointCloud, n_out: int, k: int, bandwidth=None,
                   start=CANONICAL_START, keep_sq=False):
    """One encoding level's geometry from a single exact distance matrix.

    Runs KDE density (when a bandwidth is given), farthest point sampling
    and k-NN grouping off one shared pairwise matrix; results are identical
    to calling kde_density, farthest_point_sample and knn_group in sequence.
    ``keep_sq`` retains the matrix on the cloud for reuse by a later level
    (meant for short-lived training clouds). Returns (subsampled PointCloud,
    Neighborhood).
    """
    n = cloud.n
    if not 1 <= n_out <= n:
        raise GeometryError(f"n_out={n_out} outside [1, {n}]")
    pos = cloud.positions
    sq = _full_sq(cloud, keep_sq)
    if bandwidth is not None:
        if bandwidth <= 0:
            raise GeometryError(f"bandwidth must be positive, got {bandwidth}")
        cloud.density = _kde_from_sq(sq, cloud.dim, bandwidth)
    cents = _fps_core(n_out, _fps_seed(pos, start), lambda i: sq[i])
    neigh = _assemble_neighborhood(cloud, cents, k, sq[cents])
    return PointCloud(pos[cents]), neigh


def self_geometry(cloud: PointCloud, k: int, bandwidth=None, keep_sq=False) -> Neighborhood:
    """k-NN grouping with every point as its own centroid (plus optional KDE)."""
    sq = _full_sq(cloud, keep_sq)
    if bandwidth is not None:
        if bandwidth <= 0:
            raise GeometryError(f"bandwidth must be positive, got {bandwidth}")
        cloud.density = _kde_from_sq(sq, cloud.dim, bandwidth)
    return _assemble_neighborhood(cloud, np.arange(cloud.n), k, sq)


def inverse_density(density: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Normalized inverse density in (0, 1]: 1/(d + eps) scaled by its max."""
    density = np.asarray(density, dtype=np.float64)
    inv = 1.0 / (density + eps)
    return inv / inv.max()


def _three_nn(targets: np.ndarray, sources: np.ndarray):
    """Indices and convex weights of the 3 nearest sources per target."""
    n = sources.shape[0]
    sq = _sq_dists(targets, sources)
    order = np.argsort(sq, axis=1, kind="stable")
    if n >= 3:
        idx = order[:, :3]
    else:
        idx = np.concatenate([order, np.repeat(order[:, :1], 3 - n, axis=1)], axis=1)
    dist = np.sqrt(np.take_along_axis(sq, idx, axis=1))
    w = 1.0 / (dist + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def three_nn_interpolate(targets: np.ndarray, sources: np.ndarray, source_features):
    """Inverse-distance interpolation from the 3 nearest sources per target.

    Weights are constants of the geometry; the result is differentiable with
    respect to ``source_features`` when those are a Tensor.
    """
    targets = np.asarray(targets, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    idx, w = _three_nn(targets, sources)
    if isinstance(source_features, T.Tensor):
        gathered = T.gather(source_features, idx)  # (M, 3, C)
        weights = T.Tensor(w[:, :, None])
        return T.reduce_sum(T.mul(gathered, weights), axis=1)
    feats = np.asarray(source_features)
    return np.einsum("mk,mkc->mc", w, feats[idx])
