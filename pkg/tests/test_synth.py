"""Planted-concept generator: determinism, geometry, and retrieval limits."""

from collections import Counter, deque

import numpy as np
import pytest

from clusterlens.aggregation import mean_aggregate
from clusterlens.evaluation import EvalSpec, evaluate
from clusterlens.index import index_records
from clusterlens.synth import SynthSpec, _grow_blob, _prototypes, generate


def small_spec(**overrides):
    base = dict(
        image_count=50,
        grid_dims=(7, 7),
        channels=32,
        concept_count=5,
        object_patch_range=(1, 10),
        seed=0,
    )
    base.update(overrides)
    return SynthSpec(**base)


class TestSpecValidation:
    def test_patch_range_must_fit_grid(self):
        with pytest.raises(ValueError, match="object_patch_range"):
            small_spec(object_patch_range=(1, 50))

    def test_patch_range_ordering(self):
        with pytest.raises(ValueError, match="object_patch_range"):
            small_spec(object_patch_range=(5, 2))

    def test_angle_bounds(self):
        with pytest.raises(ValueError, match="angle"):
            small_spec(concept_separation=180.0)

    def test_channel_floor(self):
        with pytest.raises(ValueError, match="channels"):
            small_spec(channels=1)


class TestPrototypes:
    def test_unit_norm_and_separation(self):
        spec = small_spec()
        protos = _prototypes(np.random.default_rng(0), spec)
        norms = np.linalg.norm(protos, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-12)
        bound = float(np.cos(np.radians(spec.concept_separation)))
        gram = protos @ protos.T
        off = gram[~np.eye(len(protos), dtype=bool)]
        assert off.max() <= bound + 1e-12

    def test_infeasible_separation(self):
        spec = small_spec(channels=4, concept_count=30, concept_separation=100.0)
        with pytest.raises(ValueError, match="cannot place"):
            _prototypes(np.random.default_rng(0), spec)


def assert_connected(cells, width):
    cells = set(cells)
    seen = {next(iter(cells))}
    queue = deque(seen)
    while queue:
        idx = queue.popleft()
        r, c = divmod(idx, width)
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            n = nr * width + nc
            if nr >= 0 and nc >= 0 and nc < width and n in cells and n not in seen:
                seen.add(n)
                queue.append(n)
    assert seen == cells, "blob is not 4-connected"


class TestBlobGrowth:
    def test_blobs_connected_and_sized(self, rng):
        for trial in range(30):
            h, w = 8, 9
            occupied = rng.random(h * w) < 0.3
            target = int(rng.integers(1, 20))
            blob = _grow_blob(rng, h, w, occupied, target)
            if not blob:
                assert occupied.all()
                continue
            assert len(blob) == len(set(blob))
            assert len(blob) <= target
            assert not occupied[blob].any()
            assert_connected(blob, w)

    def test_respects_full_grid(self, rng):
        assert _grow_blob(rng, 3, 3, np.ones(9, dtype=bool), 5) == []


class TestGenerate:
    def test_deterministic(self):
        spec = small_spec()
        a = generate(spec)
        b = generate(spec)
        assert a.log == b.log
        assert a.manifest == b.manifest
        for ma, mb in zip(a.maps, b.maps):
            assert np.array_equal(ma.values, mb.values)
        for c in a.queries:
            assert np.array_equal(a.queries[c].values, b.queries[c].values)

    def test_seed_changes_output(self):
        a = generate(small_spec(seed=0))
        b = generate(small_spec(seed=1))
        assert not np.array_equal(a.maps[0].values, b.maps[0].values)

    def test_counting_oracle_against_log(self):
        result = generate(small_spec(image_count=120))
        log_counts = Counter(obj.category_id for obj in result.log)
        ann_counts = result.manifest.annotation_counts()
        for cat in result.manifest.categories:
            assert ann_counts[cat.id] == log_counts.get(cat.id, 0)
        per_image = Counter(obj.image_id for obj in result.log)
        assert max(per_image.values()) <= 3
        assert any(m.image_id not in per_image for m in result.maps)  # some empty images

    def test_areas_scale_with_patch_count(self):
        spec = small_spec(patch_px=16)
        result = generate(spec)
        by_key = {}
        for obj in result.log:
            by_key.setdefault((obj.image_id, obj.category_id), []).append(obj.patch_count)
        for ann in result.manifest.annotations:
            counts = by_key[(ann.image_id, ann.category_id)]
            assert ann.area in {c * 16 * 16 for c in counts}
            assert ann.area > 0

    def test_patch_counts_within_range(self):
        result = generate(small_spec(object_patch_range=(2, 6)))
        for obj in result.log:
            assert 1 <= obj.patch_count <= 6

    def test_image_dimensions_follow_grid(self):
        result = generate(small_spec(patch_px=32))
        for info in result.manifest.images:
            assert (info.width, info.height) == (7 * 32, 7 * 32)

    def test_all_vectors_unit_norm(self):
        result = generate(small_spec())
        for m in result.maps[:10]:
            norms = np.linalg.norm(m.values.astype(np.float64), axis=1)
            assert np.allclose(norms, 1.0, atol=1e-6)

    def test_queries_are_prototype_directions(self):
        result = generate(small_spec())
        assert set(result.queries) == {0, 1, 2, 3, 4}
        for cat_id, q in result.queries.items():
            assert q.label == f"concept-{cat_id:02d}"
            assert abs(float(np.linalg.norm(q.values)) - 1.0) <= 1e-6


class TestRetrievalLimits:
    def test_noiseless_dense_retrieval_is_perfect(self):
        result = generate(small_spec(noise_scale=0.0))
        index = index_records(result.maps)
        report = evaluate(
            index, result.queries, EvalSpec(dataset=result.manifest, size_band=None)
        )
        assert report.map == 1.0
        assert report.map_at_cutoff == 1.0

    def test_full_frame_objects_make_global_mean_perfect(self):
        spec = small_spec(
            image_count=60,
            grid_dims=(6, 6),
            concept_count=4,
            object_patch_range=(36, 36),
            noise_scale=0.0,
        )
        result = generate(spec)
        pooled = [mean_aggregate(m) for m in result.maps]
        report = evaluate(
            index_records(pooled), result.queries, EvalSpec(dataset=result.manifest, size_band=None)
        )
        assert report.map == 1.0
