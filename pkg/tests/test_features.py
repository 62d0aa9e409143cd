import json
import math

import numpy as np
import pytest

from graphtune.dataio import VectorSet, make_synthetic
from graphtune.features import (
    DatasetFeatures,
    compute_dr_stats,
    compute_ds_stats,
    estimate_lid,
    extract_features,
    load_features,
    save_features,
)

from conftest import vs


def test_lid_line_segment():
    rng = np.random.default_rng(0)
    x = np.zeros((1000, 3))
    x[:, 0] = rng.uniform(0, 1, 1000)
    assert 0.7 <= estimate_lid(vs(x), k_lid=10) <= 1.3


def test_lid_5d_ball():
    rng = np.random.default_rng(1)
    g = rng.standard_normal((2000, 5))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    g *= rng.uniform(0, 1, (2000, 1)) ** (1 / 5)
    assert 4 <= estimate_lid(vs(g)) <= 6


def test_lid_degenerate():
    with pytest.raises(ValueError, match="degenerate distances"):
        estimate_lid(vs(np.ones((3, 2))))


def test_ds_hand_example():
    mn, mean, mx, std = compute_ds_stats(vs([[0], [1], [3], [6]]), k=1)
    assert (mn, mean, mx) == (1, 1.75, 3)
    assert std == pytest.approx(math.sqrt(0.6875), abs=1e-12)


def test_ds_identical_vectors():
    assert compute_ds_stats(vs(np.zeros((5, 2))), k=1) == (0, 0, 0, 0)


def test_ds_requires_more_than_k():
    with pytest.raises(ValueError):
        compute_ds_stats(vs([[0], [1]]), k=2)


def test_dr_hand_example():
    s = compute_dr_stats(vs([[0], [10], [100]]), vs([[1]]), k=1)
    assert s[0] == s[1] == s[2] == pytest.approx(1 / 54, rel=1e-12)
    assert s[3] == 0


def test_dr_far_query():
    rng = np.random.default_rng(2)
    base = vs(rng.uniform(0, 1, (200, 4)))
    q = vs(np.full((1, 4), 1e6))
    dr = compute_dr_stats(base, q, k=10)[1]
    assert 0.9 < dr <= 1.0


def test_scale_homogeneity():
    base, queries = make_synthetic("gaussian", 600, 8, seed=4, n_queries=20)
    scaled = VectorSet(base.data * 2)
    sq = VectorSet(queries.data * 2)
    a = compute_ds_stats(base)
    b = compute_ds_stats(scaled)
    assert np.allclose(np.array(b), 2 * np.array(a), rtol=1e-5)
    assert np.allclose(compute_dr_stats(base, queries), compute_dr_stats(scaled, sq), rtol=1e-5)


def test_sample_convergence():
    base, _ = make_synthetic("uniform", 5000, 8, seed=6)
    a = compute_ds_stats(base, sample=500, seed=1)[1]
    b = compute_ds_stats(base, sample=1000, seed=1)[1]
    assert abs(a - b) / b < 0.05


def test_extract_features_shape_and_order(small_data):
    base, queries, _ = small_data
    f = extract_features(base, queries)
    assert (f.c_b, f.c_d, f.d) == (1000, 50, 16)
    assert f.lid > 0
    assert f.ds_min <= f.ds_mean <= f.ds_max and f.ds_std >= 0
    assert 0 < f.dr_min <= f.dr_mean <= f.dr_max and f.dr_std >= 0
    assert np.isfinite(f.to_vector()).all()


def test_extract_features_dim_mismatch(small_data):
    base, _, _ = small_data
    with pytest.raises(ValueError):
        extract_features(base, vs(np.zeros((2, 3))))


def test_features_json_round_trip(tmp_path, small_data):
    base, queries, _ = small_data
    f = extract_features(base, queries)
    save_features(tmp_path / "features.json", {"x": f})
    raw = json.loads((tmp_path / "features.json").read_text())
    assert list(raw["x"]) == list(DatasetFeatures.FIELDS)
    assert load_features(tmp_path / "features.json")["x"] == f
    assert DatasetFeatures.from_vector(f.to_vector()) == f
