"""Shared builders for seeded random grids, weights, and error helpers."""

import numpy as np
import pytest

from clusterlens.tensor import FeatureGrid, ProjectionWeights


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error of a against reference b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(b)), 1e-30)
    return float(np.linalg.norm(a - b)) / denom


def random_grid(rng, height=2, width=2, channels=3, image_id="") -> FeatureGrid:
    values = rng.standard_normal((height * width, channels)).astype(np.float32)
    return FeatureGrid(height, width, values, image_id=image_id)


def random_weights(rng, heads=2, c_e=3, c_q=2, c_v=2, c_o=3) -> ProjectionWeights:
    return ProjectionWeights(
        query_w=rng.standard_normal((heads, c_q, c_e)).astype(np.float32),
        query_b=rng.standard_normal((heads, c_q)).astype(np.float32),
        key_w=rng.standard_normal((heads, c_q, c_e)).astype(np.float32),
        key_b=rng.standard_normal((heads, c_q)).astype(np.float32),
        value_w=rng.standard_normal((heads, c_v, c_e)).astype(np.float32),
        value_b=rng.standard_normal((heads, c_v)).astype(np.float32),
        out_w=rng.standard_normal((c_o, heads * c_v)).astype(np.float32),
        out_b=rng.standard_normal(c_o).astype(np.float32),
    )


def zero_key_weights(rng, **kwargs) -> ProjectionWeights:
    w = random_weights(rng, **kwargs)
    return ProjectionWeights(
        query_w=w.query_w,
        query_b=w.query_b,
        key_w=np.zeros_like(w.key_w),
        key_b=w.key_b,
        value_w=w.value_w,
        value_b=w.value_b,
        out_w=w.out_w,
        out_b=w.out_b,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
