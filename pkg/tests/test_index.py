"""Flat cosine index against a naive full-scan oracle."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterlens.aggregation import AggregationConfig, RepresentativeSet, kmeans_cluster, mean_aggregate, mix_global
from clusterlens.index import (
    FlatIndex,
    QueryVector,
    build_coarse,
    build_index,
    coarse_search,
    ensemble_query,
    index_records,
    load_index,
    measure_recall,
    normalize_query,
    save_index,
    score_image,
    search,
)
from clusterlens.store import write_pack
from clusterlens.tensor import EmbeddingMap


def unit(v):
    v = np.asarray(v, dtype=np.float32)
    return v / np.float32(np.linalg.norm(v))


def reps_of(image_id, vectors, method="kmeans"):
    return RepresentativeSet(
        image_id=image_id,
        method=method,
        vectors=np.asarray(vectors, dtype=np.float32),
        assignment=None,
        grid_dims=(1, 1),
    )


def random_sets(rng, images, vectors_per_image, channels):
    return [
        reps_of(f"img{j:04d}", rng.standard_normal((vectors_per_image, channels)))
        for j in range(images)
    ]


def naive_search(sets, query, top_k):
    scored = []
    for rec in sets:
        v = rec.vectors / np.linalg.norm(rec.vectors, axis=1)[:, None]
        scored.append((rec.image_id, float(np.max(v.astype(np.float32) @ query.values))))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:top_k]


class TestQueryVector:
    def test_rejects_non_unit(self):
        with pytest.raises(ValueError, match="norm"):
            QueryVector(np.array([1.0, 1.0], np.float32))

    def test_normalize_direction(self, rng):
        v = rng.standard_normal(8)
        q = normalize_query(v, label="lamp")
        assert abs(float(np.linalg.norm(q.values)) - 1.0) <= 1e-6
        assert q.label == "lamp"
        cos = float(q.values @ unit(v))
        assert abs(cos - 1.0) <= 1e-6

    def test_normalize_rejects_zero(self):
        with pytest.raises(ValueError, match="zero"):
            normalize_query(np.zeros(4))


class TestEnsembleQuery:
    def test_identical_prompts_keep_direction(self, rng):
        v = rng.standard_normal(6)
        q = ensemble_query([v] * 7)
        assert abs(float(q.values @ unit(v)) - 1.0) <= 1e-6

    def test_unit_norm_for_random_inputs(self, rng):
        for _ in range(20):
            prompts = [rng.standard_normal(5) for _ in range(rng.integers(1, 8))]
            q = ensemble_query(prompts)
            assert abs(float(np.linalg.norm(q.values)) - 1.0) <= 1e-6

    def test_weights_directions_not_magnitudes(self):
        # each prompt is normalized before averaging, so a huge prompt
        # must not dominate
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1000.0])
        q = ensemble_query([a, b])
        assert abs(float(q.values[0]) - float(q.values[1])) <= 1e-6

    def test_antipodal_prompts_cancel(self):
        v = np.array([1.0, 2.0])
        with pytest.raises(ValueError, match="zero"):
            ensemble_query([v, -v])

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dims"):
            ensemble_query([np.ones(3), np.ones(4)])

    def test_needs_one_prompt(self):
        with pytest.raises(ValueError, match="at least one"):
            ensemble_query([])


class TestBuildIndex:
    def test_minimal_index(self, rng):
        index = index_records([reps_of("only", rng.standard_normal((1, 4)))])
        assert index.vector_count == 1
        assert index.image_count == 1
        assert index.images == ("only",)
        assert abs(float(np.linalg.norm(index.vectors[0])) - 1.0) <= 1e-6

    def test_counting_oracle_10k_vectors(self, rng):
        sets = random_sets(rng, images=1000, vectors_per_image=10, channels=8)
        index = index_records(sets)
        assert index.vector_count == 10_000
        assert index.image_count == 1000
        counts = np.bincount(index.owner, minlength=1000)
        assert np.array_equal(counts, np.full(1000, 10))
        # owners appear as contiguous runs in insertion order
        assert np.all(np.diff(index.owner) >= 0)
        assert index.images == tuple(f"img{j:04d}" for j in range(1000))

    def test_duplicate_image_across_packs(self, tmp_path, rng):
        m1 = EmbeddingMap(1, 2, rng.standard_normal((2, 3)).astype(np.float32), image_id="dup")
        m2 = EmbeddingMap(1, 2, rng.standard_normal((2, 3)).astype(np.float32), image_id="dup")
        p1, p2 = tmp_path / "a.epk", tmp_path / "b.epk"
        write_pack([m1], p1)
        write_pack([m2], p2)
        with pytest.raises(ValueError, match="dup"):
            build_index([p1, p2])

    def test_build_from_packs_orders_by_appearance(self, tmp_path, rng):
        maps = [
            EmbeddingMap(1, 1, rng.standard_normal((1, 3)).astype(np.float32), image_id=i)
            for i in ("zz", "aa", "mm")
        ]
        p = tmp_path / "o.epk"
        write_pack(maps, p)
        assert build_index([p]).images == ("zz", "aa", "mm")

    def test_zero_norm_vector_names_image(self, rng):
        bad = reps_of("broken", np.zeros((2, 4)))
        with pytest.raises(ValueError, match="broken"):
            index_records([random_sets(rng, 1, 2, 4)[0], bad])

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel"):
            index_records(
                [reps_of("a", rng.standard_normal((1, 3))), reps_of("b", rng.standard_normal((1, 4)))]
            )


class TestScoreImage:
    def test_self_similarity(self, rng):
        v = rng.standard_normal(6)
        reps = reps_of("s", np.stack([v, rng.standard_normal(6)]))
        q = normalize_query(v)
        assert abs(score_image(q, reps) - 1.0) <= 1e-6

    def test_orthogonal_set_scores_zero(self):
        reps = reps_of("o", np.array([[0, 1, 0], [0, 0, 1]], np.float32))
        q = QueryVector(np.array([1, 0, 0], np.float32))
        assert score_image(q, reps) == 0.0

    def test_matches_naive_scan(self, rng):
        for _ in range(10):
            vectors = rng.standard_normal((7, 5))
            q = normalize_query(rng.standard_normal(5))
            got = score_image(q, reps_of("n", vectors))
            want = max(
                float(np.dot(unit(v), q.values)) for v in vectors.astype(np.float32)
            )
            assert abs(got - want) <= 1e-6

    def test_empty_set_rejected(self):
        empty = reps_of("e", np.zeros((0, 3)))
        with pytest.raises(ValueError, match="empty"):
            score_image(QueryVector(np.array([1, 0, 0], np.float32)), empty)


class TestSearch:
    def test_singleton_index(self, rng):
        index = index_records([reps_of("only", rng.standard_normal((3, 4)))])
        for top_k in (1, 5, 100):
            got = search(index, normalize_query(rng.standard_normal(4)), top_k)
            assert len(got.entries) == 1
            assert got.entries[0][0] == "only"

    def test_thousand_vectors_match_naive_scan(self):
        rng = np.random.default_rng(77)
        sets = random_sets(rng, images=100, vectors_per_image=10, channels=16)
        index = index_records(sets)
        for seed in range(10):
            q = normalize_query(np.random.default_rng(seed).standard_normal(16), label=f"q{seed}")
            got = search(index, q, top_k=10)
            want = naive_search(sets, q, 10)
            assert [e[0] for e in got.entries] == [w[0] for w in want]
            for (_, gs), (_, ws) in zip(got.entries, want):
                assert abs(gs - ws) <= 1e-5
            assert got.label == f"q{seed}"

    def test_scores_non_increasing(self, rng):
        index = index_records(random_sets(rng, 50, 3, 8))
        got = search(index, normalize_query(rng.standard_normal(8)), top_k=50)
        scores = [s for _, s in got.entries]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_equal_scores_order_by_image_id(self):
        # axis-aligned vectors keep the dot products exact, so the tie is real
        v = np.array([1.0, 0.0, 0.0, 0.0], np.float32)
        sets = [reps_of("zebra", v[None]), reps_of("apple", v[None]), reps_of("mango", v[None])]
        index = index_records(sets)
        got = search(index, normalize_query(v), top_k=3)
        assert [e[0] for e in got.entries] == ["apple", "mango", "zebra"]
        assert [s for _, s in got.entries] == [1.0, 1.0, 1.0]

    def test_top_k_clamps_to_image_count(self, rng):
        index = index_records(random_sets(rng, 5, 2, 4))
        assert len(search(index, normalize_query(rng.standard_normal(4)), 99).entries) == 5

    def test_empty_index_rejected(self):
        index = index_records([])
        with pytest.raises(ValueError, match="empty"):
            search(index, QueryVector(np.array([1.0], np.float32)), 1)

    def test_bad_top_k(self, rng):
        index = index_records(random_sets(rng, 2, 1, 3))
        with pytest.raises(ValueError, match="top_k"):
            search(index, normalize_query(rng.standard_normal(3)), 0)

    def test_channel_mismatch(self, rng):
        index = index_records(random_sets(rng, 2, 1, 3))
        with pytest.raises(ValueError, match="channels"):
            search(index, normalize_query(rng.standard_normal(5)), 1)


class TestRankingInvariants:
    def test_scale_invariance_power_of_two(self, rng):
        sets = random_sets(rng, 20, 4, 6)
        scaled = [
            reps_of(s.image_id, s.vectors * np.float32(4.0)) if j % 3 == 0 else s
            for j, s in enumerate(sets)
        ]
        q = normalize_query(rng.standard_normal(6))
        a = search(index_records(sets), q, 20)
        b = search(index_records(scaled), q, 20)
        assert a.entries == b.entries

    def test_scale_invariance_arbitrary_factor(self, rng):
        sets = random_sets(rng, 20, 4, 6)
        scaled = [reps_of(s.image_id, s.vectors * np.float32(3.7)) for s in sets]
        q = normalize_query(rng.standard_normal(6))
        a = search(index_records(sets), q, 20)
        b = search(index_records(scaled), q, 20)
        assert [e[0] for e in a.entries] == [e[0] for e in b.entries]
        for (_, sa), (_, sb) in zip(a.entries, b.entries):
            assert abs(sa - sb) <= 1e-6

    def test_singleton_clusters_equal_dense(self, rng):
        maps = [
            EmbeddingMap(2, 3, rng.standard_normal((6, 5)).astype(np.float32), image_id=f"m{j}")
            for j in range(10)
        ]
        clustered = [kmeans_cluster(m, AggregationConfig(cluster_count=6)) for m in maps]
        q = normalize_query(rng.standard_normal(5))
        a = search(index_records(maps), q, 10)
        b = search(index_records(clustered), q, 10)
        assert a.entries == b.entries

    def test_mixed_max_law(self, rng):
        maps = [
            EmbeddingMap(2, 2, rng.standard_normal((4, 6)).astype(np.float32), image_id=f"x{j}")
            for j in range(8)
        ]
        clustered = [kmeans_cluster(m, AggregationConfig(cluster_count=2)) for m in maps]
        globals_ = [mean_aggregate(m) for m in maps]
        mixed = [mix_global(c, g.vectors[0]) for c, g in zip(clustered, globals_)]
        q = normalize_query(rng.standard_normal(6))
        for c, g, x in zip(clustered, globals_, mixed):
            assert score_image(q, x) == max(score_image(q, c), score_image(q, g))

    def test_adding_representative_never_hurts(self, rng):
        q = normalize_query(rng.standard_normal(5))
        for _ in range(20):
            base = rng.standard_normal((3, 5))
            extra = np.concatenate([base, rng.standard_normal((1, 5))])
            assert score_image(q, reps_of("a", extra)) >= score_image(q, reps_of("a", base))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_full_scan_always_exact(self, seed):
        rng = np.random.default_rng(seed)
        sets = random_sets(rng, images=8, vectors_per_image=3, channels=4)
        q = normalize_query(rng.standard_normal(4))
        got = search(index_records(sets), q, 8)
        want = naive_search(sets, q, 8)
        assert [e[0] for e in got.entries] == [w[0] for w in want]


class TestPersistence:
    def test_round_trip(self, tmp_path, rng):
        index = index_records(random_sets(rng, 30, 4, 8))
        save_index(index, tmp_path / "idx")
        back = load_index(tmp_path / "idx")
        assert np.array_equal(back.vectors, index.vectors)
        assert np.array_equal(back.owner, index.owner)
        assert back.images == index.images
        q = normalize_query(rng.standard_normal(8))
        assert search(back, q, 10).entries == search(index, q, 10).entries

    def test_meta_disagreement_rejected(self, tmp_path, rng):
        index = index_records(random_sets(rng, 3, 2, 4))
        save_index(index, tmp_path / "idx")
        meta = json.loads((tmp_path / "idx" / "meta.json").read_text())
        meta["vectors"] = 999
        (tmp_path / "idx" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(ValueError, match="disagree"):
            load_index(tmp_path / "idx")


class TestCoarse:
    def test_full_probe_equals_exact(self, rng):
        index = index_records(random_sets(rng, 40, 5, 8))
        coarse = build_coarse(index, n_lists=8)
        q = normalize_query(rng.standard_normal(8))
        exact = search(index, q, 10)
        approx = coarse_search(index, coarse, q, top_k=10, nprobe=8)
        assert approx.entries == exact.entries

    def test_lists_partition_vectors(self, rng):
        index = index_records(random_sets(rng, 20, 5, 6))
        coarse = build_coarse(index, n_lists=5)
        all_ids = np.sort(np.concatenate(coarse.lists))
        assert np.array_equal(all_ids, np.arange(index.vector_count))

    def test_measured_recall_bounds(self, rng):
        index = index_records(random_sets(rng, 50, 4, 8))
        coarse = build_coarse(index, n_lists=10)
        queries = [normalize_query(rng.standard_normal(8)) for _ in range(5)]
        full = measure_recall(index, coarse, queries, top_k=10, nprobe=10)
        assert full == 1.0
        partial = measure_recall(index, coarse, queries, top_k=10, nprobe=2)
        assert 0.0 <= partial <= 1.0

    def test_nprobe_bounds(self, rng):
        index = index_records(random_sets(rng, 10, 2, 4))
        coarse = build_coarse(index, n_lists=4)
        q = normalize_query(rng.standard_normal(4))
        with pytest.raises(ValueError, match="nprobe"):
            coarse_search(index, coarse, q, top_k=5, nprobe=5)

    def test_n_lists_bounds(self, rng):
        index = index_records(random_sets(rng, 3, 1, 4))
        with pytest.raises(ValueError, match="n_lists"):
            build_coarse(index, n_lists=4)
