import numpy as np
import pytest

from gradcheck import max_relative_error, numerical_grads
from vsnerf.field import (
    FieldConfig,
    PositionalEncoding,
    init_field,
    load_field,
    query,
    query_batch,
    query_batch_with_grads,
    save_field,
    softplus,
)

SMALL = FieldConfig(width=16, depth=2, pos_frequencies=2, dir_frequencies=1, head_width=8)


def _random_field(config, seed):
    f = init_field(config, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    for k in f.params:
        f.params[k] = f.params[k] + rng.normal(0, 0.3, f.params[k].shape)
    return f


def _points(rng, n):
    xs = rng.normal(0, 1.2, (n, 3))  # mixes points inside and outside the unit ball
    ds = rng.normal(size=(n, 3))
    return xs, ds / np.linalg.norm(ds, axis=1, keepdims=True)


def test_encoding_dimension():
    assert PositionalEncoding(6, True).out_dim(3) == 39
    assert PositionalEncoding(0, True).out_dim(3) == 3
    assert PositionalEncoding(2, False).out_dim(3) == 12
    with pytest.raises(ValueError):
        PositionalEncoding(-1)


def test_encoding_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    enc = PositionalEncoding(3, True)
    x = rng.normal(size=(5, 3))
    up = rng.normal(size=(5, enc.out_dim(3)))
    analytic = enc.backward(x, up)
    numeric = numerical_grads(lambda: float(np.sum(enc(x) * up)), {"x": x})
    assert max_relative_error({"x": analytic}, numeric) < 1e-4


def test_zero_final_layers_give_constant_output():
    f = init_field(SMALL, 0, dtype=np.float64)
    for k in ("w_out", "b_out", "w_rgb", "b_rgb"):
        f.params[k][...] = 0
    xs, ds = _points(np.random.default_rng(0), 50)
    sigma, rgb = query_batch(f, xs, ds)
    np.testing.assert_allclose(sigma, np.log(2.0), atol=1e-15)
    np.testing.assert_allclose(rgb, 0.5, atol=1e-15)
    assert softplus(np.array(0.0)) == pytest.approx(np.log(2.0))


def test_query_is_deterministic_and_validates():
    f = init_field(SMALL, 3)
    a = query(f, [0.1, 0.2, 0.3], [0, 0, 1.0])
    b = query(f, [0.1, 0.2, 0.3], [0, 0, 1.0])
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        query(f, [0, 0, 0], [0, 0, 2.0])
    with pytest.raises(ValueError):
        query(f, [np.nan, 0, 0], [0, 0, 1.0])


def test_density_and_colour_ranges_over_many_queries():
    f = _random_field(FieldConfig(), 4).astype(np.float32)
    xs, ds = _points(np.random.default_rng(1), 100_000)
    xs *= 20  # far points exercise the contraction
    sigma, rgb = query_batch(f, xs, ds)
    assert np.all(sigma >= 0)
    assert np.all((rgb >= 0) & (rgb <= 1))


def test_same_seed_same_parameters():
    a, b = init_field(SMALL, 7), init_field(SMALL, 7)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = init_field(SMALL, 8)
    assert not np.array_equal(a.params["w0"], c.params["w0"])


def test_default_size():
    cfg = FieldConfig()
    assert (cfg.width, cfg.depth, cfg.pos_frequencies, cfg.dir_frequencies) == (64, 4, 6, 2)


@pytest.mark.parametrize("bad", [dict(width=0), dict(depth=0), dict(head_width=0),
                                 dict(pos_frequencies=-1)])
def test_invalid_sizes(bad):
    with pytest.raises(ValueError):
        init_field(FieldConfig(**bad))


def test_zero_adjoint_gives_zero_gradient_and_linearity():
    f = _random_field(SMALL, 1)
    rng = np.random.default_rng(2)
    xs, ds = _points(rng, 20)
    zero = query_batch_with_grads(f, xs, ds, np.zeros(20), np.zeros((20, 3)))
    assert all(not np.any(g) for g in zero.values())
    a_s, a_c = rng.normal(size=20), rng.normal(size=(20, 3))
    g1 = query_batch_with_grads(f, xs, ds, a_s, a_c)
    g2 = query_batch_with_grads(f, xs, ds, 2 * a_s, 2 * a_c)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_adjoint_shape_mismatch():
    f = init_field(SMALL, 0)
    xs, ds = _points(np.random.default_rng(0), 4)
    with pytest.raises(ValueError):
        query_batch_with_grads(f, xs, ds, np.zeros(3), np.zeros((4, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_field_gradient_matches_finite_differences(seed):
    cfg = FieldConfig(width=12, depth=3, pos_frequencies=2, dir_frequencies=1, head_width=6)
    f = _random_field(cfg, seed)
    assert 500 <= f.num_parameters() <= 2000
    rng = np.random.default_rng(seed)
    xs, ds = _points(rng, 6)
    a_s, a_c = rng.normal(size=6), rng.normal(size=(6, 3))

    def loss():
        s, c = query_batch(f, xs, ds)
        return float(np.sum(a_s * s) + np.sum(a_c * c))

    analytic = query_batch_with_grads(f, xs, ds, a_s, a_c)
    assert max_relative_error(analytic, numerical_grads(loss, f.params)) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    f = _random_field(SMALL, 5).astype(np.float32)
    save_field(tmp_path / "f.vsfd", f)
    g = load_field(tmp_path / "f.vsfd")
    assert g.config == f.config
    for k in f.params:
        assert np.array_equal(f.params[k], g.params[k])
    blob = (tmp_path / "f.vsfd").read_bytes()
    assert blob[:4] == b"VSFD"
    (tmp_path / "short.vsfd").write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="short.vsfd"):
        load_field(tmp_path / "short.vsfd")
