import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from vsnerf.consistency import ConsistencyProfile
from vsnerf.geometry import Ray
from vsnerf.sampling import (
    BinWeights,
    bin_weights_from_scores,
    bins_from_profile,
    pdf_sample,
    pdf_sample_batch,
    stratified_sample,
    uniform_sample,
)

EDGES4 = np.array([0.0, 1.0, 2.0, 3.0, 4.0])


def test_endpoint_average_weights():
    np.testing.assert_allclose(bin_weights_from_scores([0, 1, 0], floor=0.0), [0.5, 0.5])
    np.testing.assert_allclose(bin_weights_from_scores([1, 1], floor=0.01), [1.01])
    w = bin_weights_from_scores(np.zeros(6), floor=0.01)
    assert np.all(w == w[0]) and w[0] == 0.01


def test_bins_from_profile():
    prof = ConsistencyProfile(np.array([0.0, 0.5, 2.0]), np.array([0.0, 1.0, 0.0]), np.ones(3, int))
    bins = bins_from_profile(prof, floor=0.0)
    np.testing.assert_allclose(bins.weights, [0.5, 0.5])
    np.testing.assert_array_equal(bins.edges, prof.depths)


def test_bin_weight_validation():
    with pytest.raises(ValueError):
        BinWeights([0.0, 1.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        BinWeights([0.0, 1.0], [-1.0])


def test_point_mass():
    s = pdf_sample(BinWeights(EDGES4, [0, 1, 0, 0]), 500, np.random.default_rng(0))
    assert np.all((s.depths >= 1.0) & (s.depths <= 2.0))


def test_all_zero_weights_rejected():
    with pytest.raises(ValueError):
        pdf_sample(BinWeights(EDGES4, [0, 0, 0, 0]), 10, np.random.default_rng(0))


def test_floor_only_is_uniform_over_bins():
    w = bin_weights_from_scores(np.zeros(5), floor=0.01)
    s = pdf_sample(BinWeights(EDGES4, w), 4000, np.random.default_rng(1))
    counts = np.histogram(s.depths, EDGES4)[0]
    assert counts.tolist() == [1000, 1000, 1000, 1000]


def test_chi_square_uniform_bins():
    passes = 0
    for seed in range(100):
        s = pdf_sample(BinWeights(EDGES4, [1, 1, 1, 1]), 4000, np.random.default_rng(seed))
        counts = np.histogram(s.depths, EDGES4)[0]
        passes += chisquare(counts, [1000] * 4).pvalue > 0.01
    assert passes >= 95


def test_three_to_one_split():
    s = pdf_sample(BinWeights([0.0, 1.0, 2.0], [3, 1]), 4000, np.random.default_rng(2))
    assert np.mean(s.depths < 1.0) == pytest.approx(0.75, abs=0.03)


def test_unstratified_variant_also_matches():
    s = pdf_sample_batch(EDGES4[None], np.array([[1.0, 2, 3, 4]]), 20000, np.random.default_rng(3),
                         stratified=False)[0]
    freq = np.histogram(s, EDGES4)[0] / 20000
    p = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / 20000) + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(1, 200))
def test_samples_sorted_inside_edges_and_deterministic(seed, M, S):
    rng = np.random.default_rng(seed)
    edges = np.cumsum(rng.uniform(0.01, 1.0, M))
    weights = rng.random(M - 1) * (rng.random(M - 1) < 0.7) + 1e-3
    a = pdf_sample(BinWeights(edges, weights), S, np.random.default_rng(seed)).depths
    b = pdf_sample(BinWeights(edges, weights), S, np.random.default_rng(seed)).depths
    assert np.array_equal(a, b)
    assert np.all(np.diff(a) >= 0)
    assert a[0] >= edges[0] and a[-1] <= edges[-1]


def test_occupancy_converges():
    p = np.array([0.1, 0.4, 0.2, 0.3])
    S = 20000
    ok = 0
    for seed in range(100):
        s = pdf_sample(BinWeights(EDGES4, p), S, np.random.default_rng(seed)).depths
        freq = np.histogram(s, EDGES4)[0] / S
        ok += np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / S))
    assert ok >= 99


def test_uniform_and_stratified_baselines():
    ray = Ray(np.zeros(3), [1.0, 0, 0], 0.0, 1.0)
    np.testing.assert_allclose(uniform_sample(ray, 3).depths, [0, 0.5, 1])
    s = stratified_sample(ray, 4, np.random.default_rng(0)).depths
    assert np.array_equal(np.floor(s * 4), [0, 1, 2, 3])
    again = stratified_sample(ray, 4, np.random.default_rng(0)).depths
    assert np.array_equal(s, again)
    with pytest.raises(ValueError):
        uniform_sample(ray, 1)
    with pytest.raises(ValueError):
        stratified_sample(ray, 1, np.random.default_rng(0))
