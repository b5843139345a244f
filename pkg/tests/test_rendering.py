import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from gradcheck import max_relative_error, numerical_grads
from vsnerf.rendering import render_ray, render_ray_with_grads, render_rays, sample_deltas

LN2 = math.log(2.0)


def test_transparent_volume():
    res = render_ray(np.linspace(0, 1, 5), (np.zeros(5), np.full((5, 3), 0.7)))
    assert np.all(res.color == 0) and np.all(res.weights == 0) and np.all(res.transmittance == 1)


def test_single_sample_half_opacity():
    res = render_ray([1.0], ([LN2], [[1.0, 0.0, 0.0]]), deltas=[1.0])
    assert res.weights[0] == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(res.color, [0.5, 0, 0], atol=1e-12)


def test_two_samples_hand_evaluated():
    res = render_ray([1.0, 2.0], ([LN2, LN2], [[1.0, 0, 0], [0, 1.0, 0]]))
    np.testing.assert_allclose(res.weights, [0.5, 0.25], atol=1e-12)
    np.testing.assert_allclose(res.color, [0.5, 0.25, 0], atol=1e-12)
    assert res.depth == pytest.approx(1.0, abs=1e-12)


def test_last_gap_repeats():
    np.testing.assert_array_equal(sample_deltas(np.array([0.0, 1.0, 3.0])), [1.0, 2.0, 2.0])


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        render_ray([0.0, 1.0], ([1.0, -0.1], np.zeros((2, 3))))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.floats(0, 1))
def test_zero_density_insertion(seed, S, where):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 5, S))
    sigma = rng.exponential(1.0, S)
    rgb = rng.random((S, 3))
    deltas = rng.uniform(0.01, 0.5, S)
    base = render_ray(t, (sigma, rgb), deltas)
    k = int(where * S)
    t2 = np.insert(t, k, t[k - 1] if k else t[0])
    res = render_ray(t2, (np.insert(sigma, k, 0.0), np.insert(rgb, k, rng.random(3), axis=0)),
                     np.insert(deltas, k, rng.uniform(0.01, 0.5)))
    np.testing.assert_allclose(res.color, base.color, atol=1e-12)
    assert res.depth == pytest.approx(base.depth, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.floats(1e-3, 1e3))
def test_weight_invariants(seed, S, scale):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.01, 1, S))
    sigma = scale * rng.exponential(1.0, S)
    res = render_ray(t, (sigma, rng.random((S, 3))), rng.uniform(0.01, 1, S))
    assert res.transmittance[0] == 1.0
    assert np.all(np.diff(res.transmittance) <= 0)
    assert np.all(res.weights >= 0)
    assert res.accumulation <= 1 + 1e-12
    # telescoping: T_{i+1} = T_i exp(-sigma_i delta_i) until the underflow clamp
    expect = res.transmittance[:-1] * np.exp(-sigma[:-1] * res.deltas[:-1])
    ok = expect > 1e-25
    np.testing.assert_allclose(res.transmittance[1:][ok], expect[ok], rtol=1e-12)


def test_accumulation_approaches_one():
    t = np.linspace(0, 1, 10)
    accs = [render_ray(t, (np.full(10, s), np.zeros((10, 3)))).accumulation for s in (1, 10, 100)]
    assert accs[0] < accs[1] < accs[2] and accs[2] == pytest.approx(1.0, abs=1e-12)


def _sigma(t):
    return 1.0 + 0.5 * np.sin(3 * t)


def _optical_depth(t):
    return t - (np.cos(3 * t) - 1.0) / 6.0


def _colour(t):
    return 0.5 + 0.4 * np.cos(2 * t)


def quadrature_errors(sizes, t_far=2.0):
    exact = quad(lambda s: math.exp(-_optical_depth(s)) * _sigma(s) * _colour(s), 0.0, t_far,
                 epsabs=1e-14, epsrel=1e-14)[0]
    errs = []
    for S in sizes:
        h = t_far / S
        t = (np.arange(S) + 0.5) * h
        rgb = np.repeat(_colour(t)[:, None], 3, axis=1)
        res = render_ray(t, (_sigma(t), rgb), np.full(S, h))
        errs.append(abs(res.color[0] - exact))
    return np.array(errs)


def test_quadrature_converges_with_order_at_least_one():
    sizes = np.array([16, 32, 64, 128, 256])
    errs = quadrature_errors(sizes)
    order = -np.polyfit(np.log(sizes), np.log(errs), 1)[0]
    assert order >= 1.0
    assert np.all(np.diff(errs) < 0)


def test_colour_adjoint_is_weight():
    rng = np.random.default_rng(0)
    t = np.sort(rng.uniform(0, 3, 6))
    sigma = rng.exponential(1, 6)
    res, (d_sigma, d_rgb) = render_ray_with_grads(t, (sigma, rng.random((6, 3))), [1.0, 0, 0], 0.0)
    np.testing.assert_array_equal(d_rgb[:, 0], res.weights)
    assert not np.any(d_rgb[:, 1:])


def test_zero_adjoints():
    rng = np.random.default_rng(1)
    _, (d_sigma, d_rgb) = render_ray_with_grads(np.arange(4.0), (rng.random(4), rng.random((4, 3))),
                                                np.zeros(3), 0.0)
    assert not np.any(d_sigma) and not np.any(d_rgb)


@pytest.mark.parametrize("seed", range(5))
def test_render_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, 12))
    t = np.sort(rng.uniform(0, 4, S))
    params = {"sigma": rng.exponential(1.0, S), "rgb": rng.random((S, 3))}
    gc, gd = rng.normal(size=3), rng.normal()

    def loss():
        r = render_ray(t, (params["sigma"], params["rgb"]))
        return float(r.color @ gc + gd * r.depth)

    _, (d_sigma, d_rgb) = render_ray_with_grads(t, (params["sigma"], params["rgb"]), gc, gd)
    err = max_relative_error({"sigma": d_sigma, "rgb": d_rgb}, numerical_grads(loss, params))
    assert err < 1e-4


def test_batched_matches_single():
    rng = np.random.default_rng(3)
    t = np.sort(rng.uniform(0, 2, (4, 7)), axis=1)
    sigma = rng.random((4, 7))
    rgb = rng.random((4, 7, 3))
    batch = render_rays(t, sigma, rgb)
    for r in range(4):
        single = render_ray(t[r], (sigma[r], rgb[r]))
        np.testing.assert_allclose(batch.color[r], single.color, atol=1e-15)
