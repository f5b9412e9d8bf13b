"""Flat cosine-similarity index over representative vectors.

Stored vectors are L2-normalized copies, so a dot product is a cosine and an
image's score against a query is the max dot over its vectors. v1 search is
exact by contract; a coarse inverted-list layer exists as an opt-in whose
recall is measured, never assumed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aggregation import AggregationConfig, KMeansParams, RepresentativeSet, _cluster_points
from .store import PackRecord, read_pack
from .tensor import EmbeddingMap

__all__ = [
    "QueryVector",
    "FlatIndex",
    "RankedList",
    "ensemble_query",
    "normalize_query",
    "build_index",
    "index_records",
    "score_image",
    "search",
    "save_index",
    "load_index",
    "CoarseIndex",
    "build_coarse",
    "coarse_search",
    "measure_recall",
]


@dataclass(frozen=True)
class QueryVector:
    """Unit-norm query embedding in the shared output space."""

    values: np.ndarray  # (C_o,) float32, unit L2 norm
    label: str | None = None

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        norm = float(np.linalg.norm(vals))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"query vector norm {norm} is not 1")
        object.__setattr__(self, "values", vals)

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FlatIndex:
    """Immutable flat index: normalized vectors, per-vector owner ordinals."""

    vectors: np.ndarray  # (n, C_o) float32, rows unit norm
    owner: np.ndarray  # (n,) int32 into images
    images: tuple[str, ...]
    channels: int

    @property
    def vector_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def image_count(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class RankedList:
    """Ranked (image_id, score) pairs, scores non-increasing, ids unique."""

    entries: tuple[tuple[str, float], ...]
    label: str | None = None


def normalize_query(vector, label: str | None = None) -> QueryVector:
    """Normalize a raw vector into a QueryVector; rejects zero vectors."""
    v = np.ascontiguousarray(vector, dtype=np.float32).reshape(-1)
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise ValueError("cannot normalize a zero vector")
    return QueryVector(values=v / np.float32(norm), label=label)


def ensemble_query(prompt_vectors: Sequence, label: str | None = None) -> QueryVector:
    """Average L2-normalized prompt embeddings into one unit query vector."""
    if len(prompt_vectors) < 1:
        raise ValueError("need at least one prompt vector")
    arrs = [np.ascontiguousarray(v, dtype=np.float32).reshape(-1) for v in prompt_vectors]
    dim = arrs[0].shape[0]
    normed = []
    for v in arrs:
        if v.shape[0] != dim:
            raise ValueError(f"prompt vector dims differ: {v.shape[0]} vs {dim}")
        norm = float(np.linalg.norm(v))
        if norm < 1e-12:
            raise ValueError("zero prompt vector")
        normed.append(v / np.float32(norm))
    mean = np.mean(normed, axis=0)
    resultant = float(np.linalg.norm(mean))
    if resultant < 1e-12:
        raise ValueError("prompt vectors cancel to a zero resultant")
    return QueryVector(values=mean / np.float32(resultant), label=label)


def index_records(records: Iterable[PackRecord | RepresentativeSet | EmbeddingMap]) -> FlatIndex:
    """Build a FlatIndex from in-memory records; one record per image."""
    chunks: list[np.ndarray] = []
    owners: list[np.ndarray] = []
    images: list[str] = []
    seen: set[str] = set()
    channels = None
    for rec in records:
        image_id = rec.image_id
        vectors = rec.values if isinstance(rec, EmbeddingMap) else rec.vectors
        if image_id in seen:
            raise ValueError(f"duplicate image_id {image_id!r}: one record per image per index")
        seen.add(image_id)
        if channels is None:
            channels = vectors.shape[1]
        elif vectors.shape[1] != channels:
            raise ValueError(f"channel mismatch at {image_id!r}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError(f"zero-norm representative in image {image_id!r}")
        chunks.append((vectors / norms[:, None]).astype(np.float32))
        owners.append(np.full(vectors.shape[0], len(images), dtype=np.int32))
        images.append(image_id)
    if not chunks:
        return FlatIndex(
            vectors=np.zeros((0, channels or 0), dtype=np.float32),
            owner=np.zeros(0, dtype=np.int32),
            images=(),
            channels=channels or 0,
        )
    return FlatIndex(
        vectors=np.concatenate(chunks),
        owner=np.concatenate(owners),
        images=tuple(images),
        channels=int(channels),
    )


def build_index(pack_paths: Sequence) -> FlatIndex:
    """Read EPK1 packs and build the flat index; packs must share C_o."""

    def stream():
        for path in pack_paths:
            yield from read_pack(path)

    return index_records(stream())


def score_image(query: QueryVector, reps: RepresentativeSet) -> float:
    """Max cosine between the query and any representative of the image."""
    if reps.count < 1:
        raise ValueError("empty representative set")
    if reps.channels != query.channels:
        raise ValueError(f"channel mismatch: {reps.channels} vs {query.channels}")
    norms = np.linalg.norm(reps.vectors, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError(f"zero-norm representative in image {reps.image_id!r}")
    # einsum keeps each row's dot independent of the set it sits in, so adding
    # a representative can never lower the max (BLAS matmul breaks that at ulp
    # scale by rounding identical rows differently per position)
    dots = np.einsum("nc,c->n", reps.vectors, query.values)
    return float(np.max(dots / norms))


def _image_scores(index: FlatIndex, query: QueryVector) -> np.ndarray:
    scores = index.vectors @ query.values
    per_image = np.full(index.image_count, -np.inf, dtype=np.float32)
    np.maximum.at(per_image, index.owner, scores)
    return per_image


def search(index: FlatIndex, query: QueryVector, top_k: int) -> RankedList:
    """Exact search: top_k images by max-cosine, ties broken by ascending id."""
    if index.image_count == 0:
        raise ValueError("empty index")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if query.channels != index.channels:
        raise ValueError(f"query has {query.channels} channels, index has {index.channels}")
    per_image = _image_scores(index, query)
    order = np.lexsort((np.asarray(index.images), -per_image))
    top = order[: min(top_k, index.image_count)]
    entries = tuple((index.images[i], float(per_image[i])) for i in top)
    return RankedList(entries=entries, label=query.label)


# ---------------------------------------------------------------------------
# persistence


def save_index(index: FlatIndex, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "vectors.npy", index.vectors)
    np.save(d / "owner.npy", index.owner)
    with open(d / "images.json", "w", encoding="utf-8") as f:
        json.dump(list(index.images), f)
    with open(d / "meta.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "channels": index.channels,
                "images": index.image_count,
                "vectors": index.vector_count,
            },
            f,
            sort_keys=True,
        )


def load_index(directory) -> FlatIndex:
    d = Path(directory)
    vectors = np.load(d / "vectors.npy")
    owner = np.load(d / "owner.npy")
    with open(d / "images.json", "r", encoding="utf-8") as f:
        images = tuple(json.load(f))
    with open(d / "meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    index = FlatIndex(
        vectors=vectors.astype(np.float32),
        owner=owner.astype(np.int32),
        images=images,
        channels=int(meta["channels"]),
    )
    if index.vector_count != meta["vectors"] or index.image_count != meta["images"]:
        raise ValueError("index files disagree with meta.json")
    return index


# ---------------------------------------------------------------------------
# optional coarse inverted lists (recall measured, never assumed)


@dataclass(frozen=True)
class CoarseIndex:
    centroids: np.ndarray  # (L, C_o) float32
    lists: tuple[np.ndarray, ...]  # vector ids per list


def build_coarse(index: FlatIndex, n_lists: int, seed: int = 0) -> CoarseIndex:
    if not 1 <= n_lists <= index.vector_count:
        raise ValueError(f"n_lists must be in 1..{index.vector_count}")
    config = AggregationConfig(
        method="kmeans", cluster_count=n_lists, kmeans=KMeansParams(n_init=3), seed=seed
    )
    labels, centroids, _, k, _ = _cluster_points(
        index.vectors.astype(np.float64), "coarse-lists", config, n_lists
    )
    lists = tuple(np.flatnonzero(labels == j).astype(np.int32) for j in range(k))
    return CoarseIndex(centroids=centroids.astype(np.float32), lists=lists)


def coarse_search(
    index: FlatIndex, coarse: CoarseIndex, query: QueryVector, top_k: int, nprobe: int
) -> RankedList:
    """Probe the nprobe nearest lists only; a measured-recall approximation."""
    if not 1 <= nprobe <= len(coarse.lists):
        raise ValueError(f"nprobe must be in 1..{len(coarse.lists)}")
    sims = coarse.centroids @ query.values
    probe = np.argsort(-sims)[:nprobe]
    candidates = np.concatenate([coarse.lists[p] for p in probe])
    scores = index.vectors[candidates] @ query.values
    owners = index.owner[candidates]
    per_image: dict[int, float] = {}
    for o, s in zip(owners.tolist(), scores.tolist()):
        if s > per_image.get(o, -np.inf):
            per_image[o] = s
    ranked = sorted(per_image.items(), key=lambda kv: (-kv[1], index.images[kv[0]]))
    entries = tuple((index.images[o], float(s)) for o, s in ranked[:top_k])
    return RankedList(entries=entries, label=query.label)


def measure_recall(
    index: FlatIndex,
    coarse: CoarseIndex,
    queries: Sequence[QueryVector],
    top_k: int,
    nprobe: int,
) -> float:
    """Mean fraction of exact top_k images the coarse search also returns."""
    if not queries:
        raise ValueError("need at least one query")
    total = 0.0
    for q in queries:
        exact = {img for img, _ in search(index, q, top_k).entries}
        approx = {img for img, _ in coarse_search(index, coarse, q, top_k, nprobe).entries}
        total += len(exact & approx) / len(exact)
    return total / len(queries)
