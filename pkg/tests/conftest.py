import pytest

from vsnerf.dataset import SceneSpec, Sphere, random_scene, synth_scene
from vsnerf.geometry import CameraIntrinsics, Pose


class _View:
    def __init__(self, intrinsics, pose):
        self.intrinsics = intrinsics
        self.pose = pose


@pytest.fixture
def identity_view():
    return _View(CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101), Pose.identity())


@pytest.fixture(scope="session")
def sphere_scene():
    spec = SceneSpec(spheres=[Sphere((0.0, 0.0, 0.0), 0.5, (0.8, 0.3, 0.2))], n_views=12)
    views, gt = synth_scene(spec, 0)
    return spec, views, gt


@pytest.fixture(scope="session")
def small_scene():
    spec = random_scene(3, n_views=4, width=16, height=16, focal=18.0, feature_dim=8)
    views, gt = synth_scene(spec, 3)
    return spec, views, gt
