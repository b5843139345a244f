import numpy as np
import pytest
from scipy.optimize import brentq

from vsnerf.dataset import (
    ENCLOSURE_ID,
    DatasetFormatError,
    SceneSpec,
    Sphere,
    Box,
    read_dataset,
    read_fmap,
    read_pfm,
    split_views,
    synth_features,
    synth_scene,
    write_dataset,
    write_fmap,
    write_pfm,
)
from vsnerf.features import FeatureMap
from vsnerf.geometry import pixel_directions


def test_center_pixel_depth_single_sphere():
    spec = SceneSpec(spheres=[Sphere((0, 0, 0), 0.5, (1, 1, 1))], n_views=3, width=33, height=33,
                     ring_radius=3.0)
    _, gt = synth_scene(spec, 0)
    for depth in gt.depth:
        assert depth[16, 16] == pytest.approx(3.0 - 0.5, abs=1e-12)


def test_empty_scene_hits_enclosure_everywhere():
    spec = SceneSpec(n_views=2, width=9, height=7, focal=8.0)
    views, gt = synth_scene(spec, 1)
    for view, pts, ids, depth in zip(views, gt.points, gt.hit_id, gt.depth):
        assert np.all(ids == ENCLOSURE_ID)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=-1), spec.enclosure_radius, atol=1e-9)
        z = view.pose.world_to_camera(pts)[..., 2]
        np.testing.assert_allclose(depth, z, atol=1e-12)


def test_primitive_depth_matches_root_finding_oracle(sphere_scene):
    spec, views, gt = sphere_scene
    sphere = spec.spheres[0]
    checked = 0
    for view, depth, ids in zip(views[:3], gt.depth[:3], gt.hit_id[:3]):
        K = view.intrinsics
        for v, u in np.argwhere(ids == 0)[::17]:
            d = pixel_directions(K, view.pose, float(u), float(v))
            o = view.pose.translation
            closest = -o @ d
            t_hit = brentq(lambda t: np.linalg.norm(o + t * d - sphere.center) - sphere.radius,
                           0.0, closest, xtol=1e-14)
            z = view.pose.world_to_camera(o + t_hit * d)[2]
            assert depth[v, u] == pytest.approx(z, abs=1e-9)
            checked += 1
    assert checked > 20


def test_box_is_hit():
    spec = SceneSpec(boxes=[Box((0, 0, 0), (0.4, 0.4, 0.4), (0.2, 0.9, 0.2))], n_views=2,
                     width=17, height=17, focal=20.0)
    _, gt = synth_scene(spec, 0)
    assert gt.hit_id[0][8, 8] == 0
    assert np.all(gt.depth[0][gt.hit_id[0] == 0] > 0)


def test_synthesis_is_deterministic():
    spec = SceneSpec(spheres=[Sphere((0.1, 0, 0), 0.4, (0.5, 0.5, 0.5))], n_views=2, width=8,
                     height=8, focal=9.0, color_noise=0.05, feature_noise=0.1)
    a, ga = synth_scene(spec, 7)
    b, gb = synth_scene(spec, 7)
    for va, vb in zip(a, b):
        assert np.array_equal(va.image, vb.image)
        for name in va.feature_maps:
            assert np.array_equal(va.feature_maps[name].data, vb.feature_maps[name].data)
    for x, y in zip(ga.depth, gb.depth):
        assert np.array_equal(x, y)
    c, _ = synth_scene(spec, 8)
    assert not np.array_equal(a[0].image, c[0].image)


@pytest.mark.parametrize("bad", [
    dict(spheres=[Sphere((0, 0, 0), 0.0, (1, 1, 1))]),
    dict(n_views=1),
    dict(spheres=[Sphere((0, 0, 0), 7.0, (1, 1, 1))]),
])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        synth_scene(SceneSpec(**bad), 0)


def test_features_noise_free_views_agree():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    a = synth_features(pts[None], 16, seed=3, noise=0.0)
    b = synth_features(pts[None], 16, seed=3, noise=0.0)
    assert np.array_equal(a.data, b.data)


def test_features_degenerate_phi():
    pts = np.random.default_rng(1).normal(size=(4, 5, 3))
    fm = synth_features(pts, 1, seed=0, noise=0.0, phi=lambda x: x[..., :1])
    np.testing.assert_allclose(fm.data[..., 0], pts[..., 0], rtol=1e-6)


def test_corresponding_feature_cosine_at_low_noise():
    # measured over 1000 pairs: minimum cosine ~0.9995 at noise 0.01, dim 32
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (1, 1000, 3))
    a = synth_features(pts, 32, seed=5, noise=0.01, rng=np.random.default_rng(1)).data[0]
    b = synth_features(pts, 32, seed=5, noise=0.01, rng=np.random.default_rng(2)).data[0]
    cos = np.sum(a * b, 1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
    assert cos.min() >= 0.99


def test_feature_distance_shrinks_with_noise():
    pts = np.random.default_rng(0).uniform(-1, 1, (1, 500, 3))
    dists = []
    for noise in (0.3, 0.1, 0.01, 0.0):
        a = synth_features(pts, 8, 2, noise, np.random.default_rng(10)).data
        b = synth_features(pts, 8, 2, noise, np.random.default_rng(11)).data
        dists.append(float(np.mean(np.linalg.norm(a - b, axis=-1))))
    assert dists == sorted(dists, reverse=True)
    assert dists[-1] == 0.0


def test_dataset_round_trip(tmp_path, small_scene):
    _, views, gt = small_scene
    write_dataset(tmp_path / "ds", views, gt)
    views2, gt2, meta = read_dataset(tmp_path / "ds")
    assert len(views2) == len(views)
    for a, b in zip(views, views2):
        assert np.array_equal(a.image, b.image)
        assert a.intrinsics == b.intrinsics
        np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
        np.testing.assert_array_equal(a.pose.translation, b.pose.translation)
        assert set(a.feature_maps) == set(b.feature_maps)
        for name, fm in a.feature_maps.items():
            fm2 = b.feature_maps[name]
            assert np.array_equal(fm.data, fm2.data)
            assert (fm.kind, fm.metric, fm.downscale) == (fm2.kind, fm2.metric, fm2.downscale)
    # ground truth is stored in single precision
    for x, y in zip(gt.depth, gt2.depth):
        assert np.array_equal(x.astype(np.float32), y)
    for x, y in zip(gt.points, gt2.points):
        assert np.array_equal(x.astype(np.float32), y)
    for x, y in zip(gt.hit_id, gt2.hit_id):
        assert np.array_equal(x, y)


def test_fmap_bit_layout(tmp_path):
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    write_fmap(tmp_path / "a.fmap", FeatureMap(data, downscale=2))
    blob = (tmp_path / "a.fmap").read_bytes()
    assert blob[:4] == b"FMAP"
    assert np.frombuffer(blob[4:24], "<u4").tolist() == [1, 2, 3, 4, 2]
    assert np.array_equal(np.frombuffer(blob[24:], "<f4"), data.ravel())


def test_truncated_fmap_names_file(tmp_path):
    path = tmp_path / "cut.fmap"
    write_fmap(path, FeatureMap(np.ones((4, 4, 2))))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError, match="cut.fmap"):
        read_fmap(path)


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.fmap"
    write_fmap(path, FeatureMap(np.ones((2, 2, 1))))
    path.write_bytes(b"XMAP" + path.read_bytes()[4:])
    with pytest.raises(DatasetFormatError, match="magic"):
        read_fmap(path)


def test_dimension_mismatch_is_reported(tmp_path, small_scene):
    _, views, _ = small_scene
    write_dataset(tmp_path / "ds", views[:2])
    write_fmap(tmp_path / "ds" / "view_000.distilled.fmap", FeatureMap(np.ones((3, 3, 8))))
    with pytest.raises(DatasetFormatError, match="distilled"):
        read_dataset(tmp_path / "ds")


def test_pfm_round_trip_and_orientation(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
    write_pfm(tmp_path / "x.pfm", img)
    assert np.array_equal(read_pfm(tmp_path / "x.pfm"), img)
    raw = (tmp_path / "x.pfm").read_bytes()
    assert raw.startswith(b"PF\n7 5\n-1.0\n")
    # first stored row is the bottom image row
    first = np.frombuffer(raw[len(b"PF\n7 5\n-1.0\n"):], "<f4")[:21].reshape(7, 3)
    assert np.array_equal(first, img[-1])
    gray = img[..., 0]
    write_pfm(tmp_path / "g.pfm", gray)
    assert np.array_equal(read_pfm(tmp_path / "g.pfm"), gray)


def test_split_views_even():
    train, held = split_views(12, 2)
    assert held == [3, 9]
    assert len(train) == 10 and not set(train) & set(held)
