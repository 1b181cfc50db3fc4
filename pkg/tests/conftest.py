import numpy as np
import pytest

from planevio.config import ExperimentConfig, SceneSection
from planevio.services.geometry import (
    CameraIntrinsics, GeneralPlane, Pose, depth_from_plane, plane_world_to_camera, se3_exp, so3_exp,
)
from planevio.services.synth import CAMERA_MOUNT, SceneSpec, analytic_view
from planevio.state import Keyframe

# pixels on the lower half of the image, all looking at the floor
FLOOR_PIXELS = np.array([[80.0, 90.0], [60.0, 100.0], [100.0, 85.0], [40.0, 95.0], [120.0, 105.0], [75.0, 110.0]])


@pytest.fixture
def cam():
    return CameraIntrinsics(fx=130.0, fy=130.0, cx=79.5, cy=59.5, width=160, height=120)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, trans=1.0, rot=0.5) -> Pose:
    xi = np.concatenate([rng.uniform(-trans, trans, 3), rng.uniform(-rot, rot, 3)])
    return se3_exp(xi)


def floor_scene() -> SceneSpec:
    return SceneSpec.from_config(SceneSection(name="floor"))


def view_keyframe(kf_id, scene, cam, pose: Pose, exposure=1.0, a=0.0, b=0.0) -> Keyframe:
    """Keyframe looking through the standard mount with a noiseless analytic image."""
    image = analytic_view(scene, cam, pose @ CAMERA_MOUNT, exposure, a, b)
    return Keyframe(id=kf_id, timestamp=0.25 * kf_id, pose=pose, image=image, camera=cam,
                    exposure=exposure, a=a, b=b, T_bc=CAMERA_MOUNT)


def floor_inv_depth(kf: Keyframe, pixel) -> float:
    """Inverse depth of the floor z = -1 through `pixel` of kf."""
    pi_c = plane_world_to_camera(GeneralPlane(np.array([0.0, 0.0, 1.0]), 1.0), kf.T_wc.inverse())
    return 1.0 / depth_from_plane(pixel, pi_c, kf.camera)


@pytest.fixture
def floor_pair(cam):
    scene = floor_scene()
    host = view_keyframe(0, scene, cam, Pose.identity())
    target = view_keyframe(1, scene, cam, Pose(so3_exp(np.array([0.0, 0.0, 0.02])), [0.03, 0.15, 0.01]),
                           exposure=1.2, a=0.05, b=3.0)
    return scene, host, target


@pytest.fixture
def small_cfg():
    """Short corridor run that keeps the end-to-end tests quick."""
    return ExperimentConfig().with_overrides(
        camera={"width": 80, "height": 60, "fx": 65.0, "fy": 65.0, "cx": 39.5, "cy": 29.5},
        trajectory={"duration": 1.5, "keyframe_rate": 4.0, "imu_rate": 100.0},
        estimator={"window_size": 4, "points_per_keyframe": 120, "lm_iterations": 3},
    )


@pytest.fixture
def tiny_cfg():
    """Three small keyframes, enough for bundle and CLI plumbing."""
    return ExperimentConfig().with_overrides(
        camera={"width": 40, "height": 30, "fx": 32.5, "fy": 32.5, "cx": 19.5, "cy": 14.5},
        trajectory={"duration": 0.5, "imu_rate": 100.0},
    )
