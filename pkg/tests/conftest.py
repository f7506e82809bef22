import numpy as np
import pytest

from surfelpose.camera import RgbdFrame
from surfelpose.pose_math import RigidTransform, TangentVector6, pose_plus
from surfelpose.scene_sim import default_scene, render_frame
from surfelpose.surfel_map import SurfelMap, fuse_frame, splat_render


class MapFixture:
    """Default scene fused from three ground-truth frames; frames can be
    rendered back out of the map at any pose."""

    def __init__(self):
        self.scene = default_scene()
        self.map = SurfelMap(self.scene.classes)
        for k in (0, 3, 6):
            f, gt = render_frame(self.scene, k)
            fuse_frame(self.map, f, gt.camera_pose)
        self.pose = render_frame(self.scene, 3)[1].camera_pose
        self.view = splat_render(self.map, self.pose, self.scene.intr)

    def render(self, pose: RigidTransform):
        return splat_render(self.map, pose, self.scene.intr)

    def frame_at(self, pose: RigidTransform, depth_sigma: float = 0.0, rng=None) -> RgbdFrame:
        v = self.render(pose)
        d = np.where(v.surfel_index_map >= 0, v.depth, 0.0)
        if depth_sigma > 0:
            d = np.where(d > 0, d + rng.normal(0.0, depth_sigma, d.shape), 0.0)
        return RgbdFrame(d, v.color, self.scene.intr, 0)


def random_perturbation(rng, max_t=0.05, max_r_deg=5.0) -> TangentVector6:
    dt = rng.normal(size=3)
    dt *= rng.uniform(0, max_t) / np.linalg.norm(dt)
    dr = rng.normal(size=3)
    dr *= np.radians(rng.uniform(0, max_r_deg)) / np.linalg.norm(dr)
    return TangentVector6(dt, dr)


def perturbed(pose: RigidTransform, delta: TangentVector6) -> RigidTransform:
    return pose_plus(pose, delta)


@pytest.fixture(scope="session")
def small_map() -> MapFixture:
    return MapFixture()
