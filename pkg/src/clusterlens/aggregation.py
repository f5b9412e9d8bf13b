"""Aggregation methods that compress a dense embedding map into representatives.

Each method turns K per-location vectors into N << K representative vectors:
k-means centroids, Ward agglomerative cluster means (with or without grid
connectivity), segmentation-mask means, fixed multi-resolution anchor means,
BIC-selected adaptive k-means, and attention-queried soft aggregation.

Clustering runs on raw (unnormalized) embeddings; normalization belongs to
cosine scoring, not here. Internals use float64 for numerical headroom;
emitted representatives are float32 like the pack format.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_seed
from .tensor import EmbeddingMap, FeatureGrid, ProjectionWeights, soft_attention_aggregate

__all__ = [
    "METHODS",
    "ClusterAssignment",
    "RepresentativeSet",
    "KMeansParams",
    "AggregationConfig",
    "SegmentMask",
    "WardResult",
    "kmeans_cluster",
    "agglomerative_cluster",
    "ward_linkage",
    "grid_adjacency",
    "downsample_mask",
    "region_mask_aggregate",
    "anchors_aggregate",
    "mean_aggregate",
    "bic_score",
    "adaptive_kmeans",
    "mix_global",
    "attention_aggregate",
]

METHODS = (
    "dense",
    "global",
    "kmeans",
    "ag_t",
    "ag_f",
    "region_proposal",
    "anchors",
    "attention",
    "adaptive_kmeans",
    "mixed",
)

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-location cluster labels over a grid: values in 0..cluster_count-1."""

    labels: np.ndarray
    cluster_count: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if labels.ndim != 1 or labels.shape[0] < 1:
            raise ValueError("labels must be a non-empty 1-D array")
        n = int(self.cluster_count)
        if n < 1:
            raise ValueError("cluster_count must be >= 1")
        present = np.unique(labels)
        if present[0] < 0 or present[-1] >= n:
            raise ValueError(f"labels must lie in 0..{n - 1}")
        if present.shape[0] != n:
            raise ValueError("every cluster index must appear at least once")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "cluster_count", n)


@dataclass(frozen=True)
class RepresentativeSet:
    """N aggregated vectors standing for one image.

    ``fallback`` records degenerate handling (fewer distinct points than
    clusters, all masks empty); it is runtime metadata, not persisted.
    A zero-vector set is only valid as the degenerate input to mix_global;
    stores and indexes require N >= 1.
    """

    image_id: str
    method: str
    vectors: np.ndarray  # (N, C_o) float32
    assignment: ClusterAssignment | None
    grid_dims: tuple[int, int]
    fallback: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        vecs = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2:
            raise ValueError("vectors must be (N, C_o)")
        if not np.all(np.isfinite(vecs)):
            raise ValueError("vectors contain non-finite values")
        h, w = self.grid_dims
        if h < 1 or w < 1:
            raise ValueError("grid_dims must be >= 1")
        if self.assignment is not None and self.assignment.cluster_count != vecs.shape[0]:
            raise ValueError("assignment cluster_count must equal vector count")
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "grid_dims", (int(h), int(w)))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class KMeansParams:
    init: str = "random"
    n_init: int = 10
    max_iter: int = 300
    tol: float = 1e-4

    def __post_init__(self):
        if self.init != "random":
            raise ValueError("only random point init is supported")
        if self.n_init < 1 or self.max_iter < 1 or self.tol < 0:
            raise ValueError("invalid k-means parameters")


@dataclass(frozen=True)
class AggregationConfig:
    method: str = "kmeans"
    cluster_count: int = 10
    kmeans: KMeansParams = field(default_factory=KMeansParams)
    adaptive_candidates: tuple[int, ...] = (5, 10, 15, 20)
    anchors_divisions: tuple[int, ...] = (2, 3, 5, 7)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.cluster_count < 1:
            raise ValueError("cluster_count must be >= 1")
        cands = tuple(int(c) for c in self.adaptive_candidates)
        if any(b <= a for a, b in zip(cands, cands[1:])) or not cands:
            raise ValueError("adaptive_candidates must be non-empty, strictly increasing")
        object.__setattr__(self, "adaptive_candidates", cands)
        object.__setattr__(self, "anchors_divisions", tuple(int(g) for g in self.anchors_divisions))


@dataclass(frozen=True)
class SegmentMask:
    """Binary segmentation masks for one image, all at image resolution H x W.

    Empty masks are tolerated here; region aggregation drops whatever is
    empty after downsampling.
    """

    image_id: str
    masks: tuple[np.ndarray, ...]

    def __post_init__(self):
        masks = tuple(np.ascontiguousarray(m, dtype=bool) for m in self.masks)
        if masks:
            dims = masks[0].shape
            for m in masks:
                if m.ndim != 2 or m.shape != dims:
                    raise ValueError("all masks must share one H x W resolution")
        object.__setattr__(self, "masks", masks)


# ---------------------------------------------------------------------------
# k-means (Lloyd)


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin breaks distance ties toward the lowest cluster index.
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return labels
    labels = labels.copy()
    dist_own = np.sum((x - centroids[labels]) ** 2, axis=1)
    for j in empty:
        # Reseed at the farthest point whose donor cluster keeps a member;
        # stealing from a singleton would just relocate the hole.
        movable = counts[labels] > 1
        p = int(np.argmax(np.where(movable, dist_own, -np.inf)))
        counts[labels[p]] -= 1
        counts[j] += 1
        labels[p] = j
        centroids[j] = x[p]
        dist_own[p] = -np.inf
    return labels


def _means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    return sums / counts[:, None]


def _lloyd(x: np.ndarray, init: np.ndarray, max_iter: int, tol_scaled: float):
    """One Lloyd run. Returns (labels, centroids, inertia, per-iteration inertia)."""
    centroids = init.astype(np.float64).copy()
    k = centroids.shape[0]
    history: list[float] = []
    prev_labels = None
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        labels = _assign(x, centroids)
        labels = _repair_empty(x, labels, centroids, k)
        new_centroids = _means(x, labels, k)
        history.append(float(np.sum((x - new_centroids[labels]) ** 2)))
        shift = float(np.sum((new_centroids - centroids) ** 2))
        centroids = new_centroids
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        if shift <= tol_scaled:
            break
        prev_labels = labels
    inertia = float(np.sum((x - centroids[labels]) ** 2))
    return labels, centroids, inertia, history


def _cluster_points(x: np.ndarray, image_id: str, config: AggregationConfig, k: int):
    """Best-of-restarts Lloyd on float64 points; handles the distinct-point fallback."""
    n = x.shape[0]
    if k > n:
        raise ValueError(f"cluster_count {k} exceeds point count {n}")
    distinct = np.unique(x, axis=0).shape[0]
    fallback = None
    if distinct < k:
        fallback = f"distinct points {distinct} < requested clusters {k}"
        k = distinct
    rng = np.random.default_rng(derive_seed(config.seed, image_id))
    tol_scaled = config.kmeans.tol * float(np.mean(np.var(x, axis=0)))
    best = None
    for _ in range(config.kmeans.n_init):
        init = x[rng.choice(n, size=k, replace=False)]
        labels, centroids, inertia, _ = _lloyd(x, init, config.kmeans.max_iter, tol_scaled)
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia)
    labels, centroids, inertia = best
    return labels, centroids, inertia, k, fallback


def kmeans_cluster(map: EmbeddingMap, config: AggregationConfig) -> RepresentativeSet:
    """Lloyd k-means over the map's vectors; representatives are the centroids.

    Random point init, best of n_init restarts by inertia. Deterministic:
    the RNG stream is derived from (config.seed, map.image_id).
    """
    x = map.values.astype(np.float64)
    labels, centroids, _, k, fallback = _cluster_points(x, map.image_id, config, config.cluster_count)
    return RepresentativeSet(
        image_id=map.image_id,
        method="kmeans",
        vectors=centroids.astype(np.float32),
        assignment=ClusterAssignment(labels, k),
        grid_dims=(map.height, map.width),
        fallback=fallback,
    )


# ---------------------------------------------------------------------------
# Ward agglomerative


@dataclass(frozen=True)
class WardResult:
    """Flat labels plus the recorded merge sequence.

    merges: (id_a, id_b, cost) per step, ids scipy-style (originals 0..K-1,
    the t-th merge creating id K+t); cost is the SSE increase
    n_a*n_b/(n_a+n_b) * ||mu_a - mu_b||^2.
    """

    labels: np.ndarray
    merges: tuple[tuple[int, int, float], ...]
    cluster_count: int


def grid_adjacency(height: int, width: int) -> np.ndarray:
    """Boolean (K, K) matrix of 4-adjacency between row-major grid cells."""
    k = height * width
    adj = np.zeros((k, k), dtype=bool)
    idx = np.arange(k).reshape(height, width)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    for a, b in np.concatenate([horiz, vert]):
        adj[a, b] = adj[b, a] = True
    return adj


def ward_linkage(points: np.ndarray, n_clusters: int = 1, adjacency: np.ndarray | None = None) -> WardResult:
    """Greedy Ward merging down to n_clusters, recording every merge.

    Each step merges the allowed pair with the smallest SSE increase
    (ties: lowest slot pair). With ``adjacency``, only pairs of clusters
    containing at least one adjacent point pair may merge.
    """
    x = np.asarray(points, dtype=np.float64)
    k = x.shape[0]
    if not 1 <= n_clusters <= k:
        raise ValueError(f"n_clusters must be in 1..{k}")
    size = np.ones(k, dtype=np.float64)
    centroid = x.copy()
    members: list[list[int]] = [[i] for i in range(k)]
    cluster_id = list(range(k))
    active = np.ones(k, dtype=bool)
    if adjacency is None:
        allowed = ~np.eye(k, dtype=bool)
    else:
        allowed = adjacency.copy()
        np.fill_diagonal(allowed, False)

    diff = centroid[:, None, :] - centroid[None, :, :]
    cost = 0.5 * np.sum(diff * diff, axis=2)  # size-1 clusters: n_i*n_j/(n_i+n_j) = 1/2

    merges: list[tuple[int, int, float]] = []
    upper = np.triu(np.ones((k, k), dtype=bool), 1)
    remaining = k
    while remaining > n_clusters:
        eligible = upper & allowed & active[:, None] & active[None, :]
        masked = np.where(eligible, cost, np.inf)
        flat = int(np.argmin(masked))
        i, j = divmod(flat, k)
        if not np.isfinite(masked[i, j]):
            raise ValueError(
                f"connectivity leaves {remaining} components; cannot reach {n_clusters} clusters"
            )
        c_ij = float(cost[i, j])
        merges.append((cluster_id[i], cluster_id[j], c_ij))
        n_i, n_j = size[i], size[j]
        # Lance-Williams update of Ward costs against every other active cluster.
        n_c = size
        new_row = ((n_i + n_c) * cost[i] + (n_j + n_c) * cost[j] - n_c * c_ij) / (n_i + n_j + n_c)
        cost[i] = new_row
        cost[:, i] = new_row
        cost[i, i] = 0.0
        centroid[i] = (n_i * centroid[i] + n_j * centroid[j]) / (n_i + n_j)
        size[i] = n_i + n_j
        members[i] = members[i] + members[j]
        cluster_id[i] = k + len(merges) - 1
        active[j] = False
        allowed[i] |= allowed[j]
        allowed[:, i] |= allowed[:, j]
        allowed[i, i] = False
        remaining -= 1

    order = sorted(np.flatnonzero(active), key=lambda s: min(members[s]))
    labels = np.empty(k, dtype=np.int32)
    for new_label, slot in enumerate(order):
        labels[members[slot]] = new_label
    return WardResult(labels=labels, merges=tuple(merges), cluster_count=n_clusters)


def agglomerative_cluster(
    map: EmbeddingMap, config: AggregationConfig, connectivity: bool
) -> RepresentativeSet:
    """Ward clustering of the map; representative = mean of cluster members.

    connectivity=True (ag_t) restricts merges to clusters with 4-adjacent
    grid cells; False (ag_f) allows any pair.
    """
    if config.cluster_count > map.locations:
        raise ValueError(f"cluster_count {config.cluster_count} exceeds K={map.locations}")
    adj = grid_adjacency(map.height, map.width) if connectivity else None
    x = map.values.astype(np.float64)
    result = ward_linkage(x, n_clusters=config.cluster_count, adjacency=adj)
    n = result.cluster_count
    vectors = np.stack([x[result.labels == j].mean(axis=0) for j in range(n)])
    return RepresentativeSet(
        image_id=map.image_id,
        method="ag_t" if connectivity else "ag_f",
        vectors=vectors.astype(np.float32),
        assignment=ClusterAssignment(result.labels, n),
        grid_dims=(map.height, map.width),
    )


# ---------------------------------------------------------------------------
# region proposals, anchors, global mean


def downsample_mask(mask: np.ndarray, grid_dims: tuple[int, int]) -> np.ndarray:
    """Max-pool a binary H x W mask onto an H' x W' grid.

    Output cell (r, c) is set iff any covered pixel is set; cell (r, c)
    covers input rows [floor(r*H/H'), floor((r+1)*H/H')) and analogous cols.
    """
    m = np.ascontiguousarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    h, w = m.shape
    gh, gw = grid_dims
    if h < gh or w < gw:
        raise ValueError(f"mask {h}x{w} smaller than grid {gh}x{gw}")
    row_edges = (np.arange(gh) * h) // gh
    col_edges = (np.arange(gw) * w) // gw
    pooled = np.logical_or.reduceat(m, row_edges, axis=0)
    return np.logical_or.reduceat(pooled, col_edges, axis=1)


def region_mask_aggregate(map: EmbeddingMap, masks: SegmentMask) -> RepresentativeSet:
    """Mean embedding under each mask, downsampled to the grid.

    Masks that vanish after downsampling are dropped. A location may feed
    several overlapping masks, so no assignment map is recorded. If nothing
    survives, falls back to one global-mean representative (flagged).
    """
    x = map.values.astype(np.float64)
    vectors = []
    for m in masks.masks:
        cells = downsample_mask(m, (map.height, map.width)).reshape(-1)
        if cells.any():
            vectors.append(x[cells].mean(axis=0))
    fallback = None
    if not vectors:
        vectors = [x.mean(axis=0)]
        fallback = "all masks empty after downsampling; global mean used"
    return RepresentativeSet(
        image_id=map.image_id,
        method="region_proposal",
        vectors=np.stack(vectors).astype(np.float32),
        assignment=None,
        grid_dims=(map.height, map.width),
        fallback=fallback,
    )


def anchors_aggregate(map: EmbeddingMap, divisions) -> RepresentativeSet:
    """Mean-pool the grid over fixed g x g spatial divisions, one per g.

    Location (row, col) belongs to cell (floor(row*g/H'), floor(col*g/W')).
    Total N = sum of g^2 over divisions; cells are emitted row-major per
    division, divisions in the given order.
    """
    x = map.values.astype(np.float64)
    h, w = map.height, map.width
    vectors = []
    for g in divisions:
        g = int(g)
        if g < 1 or g > min(h, w):
            raise ValueError(f"division {g} must be in 1..min(H', W')={min(h, w)}")
        cell_row = (np.arange(h) * g) // h
        cell_col = (np.arange(w) * g) // w
        cell = (cell_row[:, None] * g + cell_col[None, :]).reshape(-1)
        sums = np.zeros((g * g, x.shape[1]), dtype=np.float64)
        np.add.at(sums, cell, x)
        counts = np.bincount(cell, minlength=g * g).astype(np.float64)
        vectors.append(sums / counts[:, None])
    return RepresentativeSet(
        image_id=map.image_id,
        method="anchors",
        vectors=np.concatenate(vectors).astype(np.float32),
        assignment=None,
        grid_dims=(h, w),
    )


def mean_aggregate(map: EmbeddingMap) -> RepresentativeSet:
    """Single global-mean representative (the uniform-attention stand-in)."""
    vec = map.values.astype(np.float64).mean(axis=0)
    return RepresentativeSet(
        image_id=map.image_id,
        method="global",
        vectors=vec[None].astype(np.float32),
        assignment=None,
        grid_dims=(map.height, map.width),
    )


# ---------------------------------------------------------------------------
# BIC-driven adaptive k-means


def bic_score(points: np.ndarray, assignment: ClusterAssignment) -> float:
    """BIC of a clustering under a spherical Gaussian mixture fit.

    One component per cluster: mean = centroid, per-component spherical
    variance (MLE over members, floored at 1e-12), weight = member fraction.
    kappa = k*(d+2) - 1 free parameters. Lower is better.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be (n, d)")
    labels = assignment.labels
    if labels.shape[0] != x.shape[0]:
        raise ValueError("assignment length does not match point count")
    n, d = x.shape
    k = assignment.cluster_count
    log_l = 0.0
    for j in range(k):
        m = x[labels == j]
        nj = m.shape[0]
        mu = m.mean(axis=0)
        sq = float(np.sum((m - mu) ** 2))
        var = max(sq / (nj * d), VARIANCE_FLOOR)
        log_l += nj * math.log(nj / n)
        log_l += -0.5 * nj * d * math.log(2.0 * math.pi * var) - 0.5 * sq / var
    kappa = k * (d + 2) - 1
    return kappa * math.log(n) - 2.0 * log_l


def adaptive_kmeans(map: EmbeddingMap, config: AggregationConfig) -> RepresentativeSet:
    """k-means with the cluster count selected by BIC over config candidates.

    Candidates run in ascending order; the first k_i whose BIC is below
    BIC(k_{i+1}) wins, otherwise the largest candidate.
    """
    cands = config.adaptive_candidates
    if cands[-1] > map.locations:
        raise ValueError(f"largest candidate {cands[-1]} exceeds K={map.locations}")
    x = map.values.astype(np.float64)

    results: list[RepresentativeSet] = []
    bics: list[float] = []

    def run(k: int) -> None:
        res = kmeans_cluster(map, dataclasses.replace(config, cluster_count=k))
        results.append(res)
        bics.append(bic_score(x, res.assignment))

    run(cands[0])
    chosen = len(cands) - 1
    for i in range(len(cands) - 1):
        run(cands[i + 1])
        if bics[i] < bics[i + 1]:
            chosen = i
            break
    return dataclasses.replace(results[chosen], method="adaptive_kmeans")


def mix_global(reps: RepresentativeSet, global_vec: np.ndarray) -> RepresentativeSet:
    """Append the image's global embedding as one extra representative."""
    g = np.ascontiguousarray(global_vec, dtype=np.float32).reshape(-1)
    if not np.all(np.isfinite(g)):
        raise ValueError("global vector contains non-finite values")
    if reps.count and reps.channels != g.shape[0]:
        raise ValueError(f"channel mismatch: {reps.channels} vs {g.shape[0]}")
    vectors = np.concatenate([reps.vectors.reshape(-1, g.shape[0]), g[None]])
    return RepresentativeSet(
        image_id=reps.image_id,
        method="mixed",
        vectors=vectors,
        assignment=None,
        grid_dims=reps.grid_dims,
        fallback=reps.fallback,
    )


def attention_aggregate(
    grid: FeatureGrid, weights: ProjectionWeights, config: AggregationConfig
) -> RepresentativeSet:
    """Soft aggregation: cluster the attention inputs, pool with centroid queries.

    Clustering happens in input space (C_e); each cluster centroid then
    queries the grid through the attention weights, so representatives live
    in output space (C_o).
    """
    x = grid.values.astype(np.float64)
    labels, _, _, k, fallback = _cluster_points(x, grid.image_id, config, config.cluster_count)
    assignment = ClusterAssignment(labels, k)
    vectors = soft_attention_aggregate(grid, weights, assignment)
    return RepresentativeSet(
        image_id=grid.image_id,
        method="attention",
        vectors=vectors,
        assignment=assignment,
        grid_dims=(grid.height, grid.width),
        fallback=fallback,
    )
