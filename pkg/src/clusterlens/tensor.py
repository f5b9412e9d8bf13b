"""Attention-pooling and dense-projection math over explicit weight matrices.

Three pure operations on a spatial feature grid X with K = H'*W' locations:

- ``global_attention_pool``: one pooled vector, attention queried by the mean
  location x_bar and softmax-weighted over all K locations.
- ``dense_project``: one output vector per location, applying only the value
  and output affine maps (query/key paths removed by construction).
- ``soft_attention_aggregate``: one output vector per cluster, attention
  queried by each cluster centroid in input space.

Everything runs in float32 on plain numpy arrays; no NN runtime involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FeatureGrid",
    "ProjectionWeights",
    "EmbeddingMap",
    "global_attention_pool",
    "dense_project",
    "soft_attention_aggregate",
]


def _as_f32(a, name: str) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float32)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


@dataclass(frozen=True)
class FeatureGrid:
    """Pre-pooling feature tensor: K = height*width row-major vectors of C_e floats."""

    height: int
    width: int
    values: np.ndarray  # (K, C_e) float32
    image_id: str = ""

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dims must be >= 1")
        vals = _as_f32(self.values, "FeatureGrid.values")
        if vals.ndim != 2 or vals.shape[0] != self.height * self.width:
            raise ValueError(
                f"values must be ({self.height * self.width}, C_e), got {vals.shape}"
            )
        object.__setattr__(self, "values", vals)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def locations(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ProjectionWeights:
    """Per-head query/key/value affine maps plus the shared output map.

    Shapes (all float32, matrices stored as (out_dim, in_dim), applied as W @ x + b):
      query_w (M, C_q, C_e)  query_b (M, C_q)
      key_w   (M, C_q, C_e)  key_b   (M, C_q)
      value_w (M, C_v, C_e)  value_b (M, C_v)
      out_w   (C_o, M*C_v)   out_b   (C_o)
    """

    query_w: np.ndarray
    query_b: np.ndarray
    key_w: np.ndarray
    key_b: np.ndarray
    value_w: np.ndarray
    value_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def __post_init__(self):
        for name in ("query_w", "query_b", "key_w", "key_b", "value_w", "value_b", "out_w", "out_b"):
            object.__setattr__(self, name, _as_f32(getattr(self, name), name))
        m, c_q, c_e = self.query_w.shape
        if self.key_w.shape != (m, c_q, c_e):
            raise ValueError("key_w shape must match query_w")
        if self.query_b.shape != (m, c_q) or self.key_b.shape != (m, c_q):
            raise ValueError("query/key bias shapes must be (M, C_q)")
        if self.value_w.ndim != 3 or self.value_w.shape[0] != m or self.value_w.shape[2] != c_e:
            raise ValueError("value_w must be (M, C_v, C_e)")
        c_v = self.value_w.shape[1]
        if self.value_b.shape != (m, c_v):
            raise ValueError("value_b must be (M, C_v)")
        if self.out_w.ndim != 2 or self.out_w.shape[1] != m * c_v:
            raise ValueError(f"out_w must be (C_o, {m * c_v})")
        if self.out_b.shape != (self.out_w.shape[0],):
            raise ValueError("out_b must be (C_o,)")
        if min(m, c_q, c_v, self.out_w.shape[0]) < 1:
            raise ValueError("all dimensions must be >= 1")

    @property
    def heads(self) -> int:
        return self.query_w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.query_w.shape[2]

    @property
    def query_channels(self) -> int:
        return self.query_w.shape[1]

    @property
    def value_channels(self) -> int:
        return self.value_w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.out_w.shape[0]

    @property
    def norm_factor(self) -> float:
        return float(np.sqrt(np.float32(self.query_channels)))


@dataclass(frozen=True)
class EmbeddingMap:
    """Dense per-location output embeddings: K row-major vectors of C_o floats."""

    height: int
    width: int
    values: np.ndarray  # (K, C_o) float32
    image_id: str = ""

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dims must be >= 1")
        vals = _as_f32(self.values, "EmbeddingMap.values")
        if vals.ndim != 2 or vals.shape[0] != self.height * self.width:
            raise ValueError(
                f"values must be ({self.height * self.width}, C_o), got {vals.shape}"
            )
        object.__setattr__(self, "values", vals)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def locations(self) -> int:
        return self.values.shape[0]


def _check_dims(grid: FeatureGrid, weights: ProjectionWeights) -> None:
    if grid.channels != weights.in_channels:
        raise ValueError(
            f"grid channels {grid.channels} != weight input channels {weights.in_channels}"
        )


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    # Subtract per-row max before exponentiation so large logits cannot overflow.
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _value_stack(grid: FeatureGrid, weights: ProjectionWeights) -> np.ndarray:
    """v^m(x_i) for all heads, concatenated: (K, M*C_v)."""
    parts = [
        grid.values @ weights.value_w[m].T + weights.value_b[m]
        for m in range(weights.heads)
    ]
    return np.concatenate(parts, axis=1)


def _attend(queries: np.ndarray, grid: FeatureGrid, weights: ProjectionWeights) -> np.ndarray:
    """Multi-head attention over the grid for a batch of input-space queries.

    queries: (B, C_e). Returns out(concat_m softmax(q^m k^mT / sqrt(C_q)) v^m): (B, C_o).
    """
    scale = np.float32(1.0) / np.float32(weights.norm_factor)
    pooled = []
    for m in range(weights.heads):
        q = queries @ weights.query_w[m].T + weights.query_b[m]  # (B, C_q)
        k = grid.values @ weights.key_w[m].T + weights.key_b[m]  # (K, C_q)
        v = grid.values @ weights.value_w[m].T + weights.value_b[m]  # (K, C_v)
        attn = _softmax_rows((q @ k.T) * scale)  # (B, K), softmax over locations
        pooled.append(attn @ v)
    concat = np.concatenate(pooled, axis=1)  # (B, M*C_v)
    return concat @ weights.out_w.T + weights.out_b


def global_attention_pool(grid: FeatureGrid, weights: ProjectionWeights) -> np.ndarray:
    """Pool the grid into one C_o vector, attention queried by the mean location.

    The query is built from x_bar, the unweighted mean over all K locations;
    softmax runs over the K locations. Returns a (C_o,) float32 vector.
    """
    _check_dims(grid, weights)
    x_bar = grid.values.mean(axis=0, keepdims=True)  # (1, C_e)
    return _attend(x_bar, grid, weights)[0]


def dense_project(grid: FeatureGrid, weights: ProjectionWeights) -> EmbeddingMap:
    """Project every location independently through value + output maps.

    Query and key weights are ignored by construction; value and output
    biases are applied. Output grid dims equal input grid dims.
    """
    _check_dims(grid, weights)
    out = _value_stack(grid, weights) @ weights.out_w.T + weights.out_b
    return EmbeddingMap(grid.height, grid.width, out, image_id=grid.image_id)


def soft_attention_aggregate(grid: FeatureGrid, weights: ProjectionWeights, assignment) -> np.ndarray:
    """One pooled vector per cluster, queried by the cluster centroid.

    ``assignment`` clusters the K grid locations (in input space, C_e).
    Centroid c_j is the mean of member locations x_i; each c_j then queries
    the full grid exactly as global pooling does. Returns (N, C_o) float32
    in cluster-index order.
    """
    _check_dims(grid, weights)
    labels = np.asarray(assignment.labels)
    n = int(assignment.cluster_count)
    if labels.shape != (grid.locations,):
        raise ValueError(
            f"assignment length {labels.shape} does not match K={grid.locations}"
        )
    centroids = np.empty((n, grid.channels), dtype=np.float32)
    for j in range(n):
        members = grid.values[labels == j]
        if members.shape[0] == 0:
            raise ValueError(f"cluster {j} is empty")
        centroids[j] = members.mean(axis=0)
    return _attend(centroids, grid, weights)
