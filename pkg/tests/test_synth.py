import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from planevio.config import ExperimentConfig, SceneSection
from planevio.errors import NoVisibleGeometry
from planevio.services.geometry import HorizontalPlane, Pose, so3_exp
from planevio.services.synth import (
    CAMERA_MOUNT,
    SceneSpec,
    Texture,
    TrajectorySpec,
    affine_at,
    analytic_view,
    intersect_scene,
    perturb_init,
    render,
    select_points,
    synthesize,
)
from planevio.state import PlaneState, PointFeature, SlidingWindow
from tests.conftest import view_keyframe


@pytest.fixture
def corridor():
    return SceneSpec.from_config(SceneSection())


def _looking_down(height: float) -> Pose:
    """Camera at (0, 0, height - 1) looking straight down at the floor z = -1."""
    return Pose(so3_exp(np.array([math.pi, 0.0, 0.0])), np.array([0.0, 0.0, height - 1.0]))


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

def test_texture_amplitudes_and_range(rng):
    tex = Texture.random(rng)
    assert tex.amplitudes.sum() == pytest.approx(110.0)
    assert np.all((tex.omega >= 6.0) & (tex.omega <= 24.0))
    u = rng.uniform(-10, 10, 1000)
    v = rng.uniform(-10, 10, 1000)
    value, _, _ = tex.evaluate(u, v)
    assert value.min() >= 18.0 and value.max() <= 238.0


def test_texture_derivatives(rng):
    tex = Texture.random(rng)
    u, v, h = 0.3, -1.2, 1e-6
    _, du, dv = tex.evaluate(u, v)
    assert du == pytest.approx((tex.evaluate(u + h, v)[0] - tex.evaluate(u - h, v)[0]) / (2 * h), rel=1e-6)
    assert dv == pytest.approx((tex.evaluate(u, v + h)[0] - tex.evaluate(u, v - h)[0]) / (2 * h), rel=1e-6)


def test_named_scenes():
    corridor = SceneSpec.from_config(SceneSection(name="corridor"))
    assert [p.plane.kind for p in corridor.planes] == ["horizontal", "vertical", "vertical"]
    assert corridor.plane(0).plane == HorizontalPlane(1.0)
    assert [p.plane.kind for p in SceneSpec.from_config(SceneSection(name="floor")).planes] == ["horizontal"]
    corner = SceneSpec.from_config(SceneSection(name="corner"))
    assert corner.plane(2).plane.phi == pytest.approx(math.pi / 2)
    with pytest.raises(KeyError):
        corner.plane(9)


def test_textures_follow_seed():
    a = SceneSpec.from_config(SceneSection(texture_seed=3))
    b = SceneSpec.from_config(SceneSection(texture_seed=3))
    c = SceneSpec.from_config(SceneSection(texture_seed=4))
    assert np.array_equal(a.plane(1).texture.omega, b.plane(1).texture.omega)
    assert not np.array_equal(a.plane(1).texture.omega, c.plane(1).texture.omega)


def test_intersect_scene_reports_misses(corridor):
    rays = np.array([[0.0, 1.0, -0.5], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    s, ids = intersect_scene(corridor, np.zeros(3), rays)
    assert ids.tolist() == [0, -1, 1]
    assert s[0] == pytest.approx(2.0)
    assert math.isinf(s[1])
    assert s[2] == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def test_depth_is_constant_in_front_of_a_plane(corridor, cam):
    frame = render(corridor, cam, _looking_down(2.0))
    assert_allclose(frame.depth, 2.0)
    assert (frame.plane_id == 0).all()


def test_exposure_and_affine_scale_intensities(corridor, cam):
    T = _looking_down(2.0)
    base = render(corridor, cam, T)
    doubled = render(corridor, cam, T, exposure=2.0)
    assert_allclose(doubled.image, 2.0 * base.image)
    shifted = render(corridor, cam, T, a=0.1, b=5.0)
    assert_allclose(shifted.image, math.exp(0.1) * base.image + 5.0)


def test_pixels_without_geometry_get_the_offset(corridor, cam):
    frame = render(corridor, cam, Pose(np.eye(3), [0, 0, 0]) @ CAMERA_MOUNT, b=7.0)
    sky = frame.plane_id < 0
    assert sky.any()
    assert_allclose(frame.image[sky], 7.0)
    assert np.isinf(frame.depth[sky]).all()


def test_nothing_visible_raises(corridor, cam):
    # looking up out of the corridor
    with pytest.raises(NoVisibleGeometry):
        render(corridor, cam, Pose(np.eye(3), [0.0, 0.0, 10.0]))


def test_analytic_view_agrees_with_raster(corridor, cam):
    T = Pose.identity() @ CAMERA_MOUNT
    frame = render(corridor, cam, T, a=0.02, b=1.0)
    field = analytic_view(corridor, cam, T, a=0.02, b=1.0)
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    pix = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
    values, _, valid = field.sample(pix)
    assert valid.all()
    assert_allclose(values, frame.image.ravel(), atol=1e-9)


def test_analytic_gradient_matches_finite_differences(corridor, cam):
    field = analytic_view(corridor, cam, Pose.identity() @ CAMERA_MOUNT)
    pix = np.array([[80.3, 95.1], [140.2, 45.7], [20.5, 40.2]])
    _, grad, _ = field.sample(pix)
    h = 1e-5
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = h
        plus, _, _ = field.sample(pix + step)
        minus, _, _ = field.sample(pix - step)
        assert_allclose(grad[:, axis], (plus - minus) / (2 * h), rtol=1e-5, atol=1e-6)


def test_noise_is_seeded(corridor, cam):
    T = Pose.identity() @ CAMERA_MOUNT
    a = render(corridor, cam, T, noise_sigma=5.0, rng=np.random.default_rng(2))
    b = render(corridor, cam, T, noise_sigma=5.0, rng=np.random.default_rng(2))
    assert np.array_equal(a.image, b.image)


# ---------------------------------------------------------------------------
# Trajectory and sequences
# ---------------------------------------------------------------------------

def test_keyframe_count():
    assert len(TrajectorySpec(duration=3.0, keyframe_rate=4.0).keyframe_times()) == 13
    assert len(TrajectorySpec(duration=0.3, keyframe_rate=10.0).keyframe_times()) == 4
    assert len(TrajectorySpec(duration=1.0, imu_rate=200.0).imu_times()) == 201


def test_velocity_is_derivative_of_position():
    traj = TrajectorySpec()
    t, h = 1.3, 1e-6
    numeric = (traj.body_pose(t + h).t - traj.body_pose(t - h).t) / (2 * h)
    assert_allclose(traj.velocity(t), numeric, atol=1e-6)


def test_affine_ground_truth():
    assert affine_at(0) == (0.0, 0.0)
    a, b = affine_at(2)
    assert a == pytest.approx(0.03 * math.sin(1.8))
    assert b == pytest.approx(1.5 * math.sin(1.2))


def test_synthesize_small_sequence():
    cfg = ExperimentConfig().with_overrides(
        camera={"width": 40, "height": 30, "fx": 32.5, "fy": 32.5, "cx": 19.5, "cy": 14.5},
        trajectory={"duration": 0.5, "imu_rate": 100.0},
    )
    seq = synthesize(cfg)
    assert len(seq.frames) == 3
    assert len(seq.imu) == 51
    assert seq.frames[0].image.shape == (30, 40)
    assert seq.frames[1].a == pytest.approx(affine_at(1)[0])
    again = synthesize(cfg)
    assert np.array_equal(seq.frames[2].image, again.frames[2].image)
    assert np.array_equal(seq.imu[10].accel, again.imu[10].accel)


# ---------------------------------------------------------------------------
# Point selection
# ---------------------------------------------------------------------------

def test_select_points_on_single_planes(corridor, cam):
    frame = render(corridor, cam, Pose.identity() @ CAMERA_MOUNT)
    sel = select_points(frame, 100)
    assert 0 < len(sel.pixels) <= 100
    assert len(set(map(tuple, sel.pixels))) == len(sel.pixels)
    x, y = sel.pixels[:, 0].astype(int), sel.pixels[:, 1].astype(int)
    assert (x >= 4).all() and (x < cam.width - 4).all()
    assert_allclose(sel.inv_depths, 1.0 / frame.depth[y, x])
    for (px, py), pid in zip(zip(x, y), sel.plane_ids):
        assert (frame.plane_id[py - 2:py + 3, px - 2:px + 3] == pid).all()


def test_select_points_is_deterministic(corridor, cam):
    frame = render(corridor, cam, Pose.identity() @ CAMERA_MOUNT)
    a = select_points(frame, 50)
    b = select_points(frame, 50)
    assert np.array_equal(a.pixels, b.pixels)


# ---------------------------------------------------------------------------
# Initialization perturbation
# ---------------------------------------------------------------------------

@pytest.fixture
def small_window(cam):
    scene = SceneSpec.from_config(SceneSection(name="floor"))
    w = SlidingWindow(max_size=3)
    for k in range(2):
        w.add_keyframe(view_keyframe(k, scene, cam, Pose(np.eye(3), [0.0, 0.2 * k, 0.0])))
    w.add_point(PointFeature(0, 0, [80.0, 90.0], 0.25))
    w.add_point(PointFeature(1, 0, [60.0, 100.0], plane_id=0))
    w.planes[0] = PlaneState(HorizontalPlane(1.0), {1})
    return w


def test_perturb_init_is_seeded(small_window):
    a = perturb_init(small_window, 0.01, 0.01, 0.05, seed=4)
    b = perturb_init(small_window, 0.01, 0.01, 0.05, seed=4)
    c = perturb_init(small_window, 0.01, 0.01, 0.05, seed=5)
    assert_allclose(a.keyframes[1].pose.matrix(), b.keyframes[1].pose.matrix())
    assert a.points[0].inv_depth == b.points[0].inv_depth
    assert not np.allclose(a.keyframes[1].pose.t, c.keyframes[1].pose.t)
    # the input window is untouched
    assert_allclose(small_window.keyframes[1].pose.t, [0.0, 0.2, 0.0])
    assert small_window.points[0].inv_depth == 0.25


def test_perturb_init_zero_sigma_is_identity(small_window):
    out = perturb_init(small_window, 0.0, 0.0, 0.0, seed=1)
    for a, b in zip(out.keyframes, small_window.keyframes):
        assert_allclose(a.pose.matrix(), b.pose.matrix())
    assert out.points[0].inv_depth == 0.25
    assert out.planes[0].params == HorizontalPlane(1.0)


def test_perturb_init_rejects_negative_sigma(small_window):
    with pytest.raises(ValueError):
        perturb_init(small_window, -0.1, 0.0, 0.0, seed=1)
