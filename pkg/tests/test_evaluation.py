import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from planevio.errors import EmptyInput, NonMonotonicTimestamps, TooFewMatches, ZeroVariance
from planevio.services.evaluation import (
    Trajectory,
    align_se3,
    align_sim3,
    associate,
    rmse_ate,
    trajectory_metrics,
    umeyama,
)
from planevio.services.geometry import Pose, so3_exp
from tests.conftest import random_pose


@pytest.fixture
def gt(rng):
    stamps = np.arange(40) * 0.05
    return Trajectory(stamps, [random_pose(rng, trans=3.0, rot=0.8) for _ in stamps])


def _scaled(traj: Trajectory, s: float) -> Trajectory:
    return Trajectory(traj.timestamps.copy(), [Pose(p.R, s * p.t) for p in traj.poses])


# ---------------------------------------------------------------------------
# Trajectory and association
# ---------------------------------------------------------------------------

def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 1.0]), [Pose.identity()])
    with pytest.raises(NonMonotonicTimestamps):
        Trajectory(np.array([0.0, 0.0]), [Pose.identity(), Pose.identity()])


def test_associate_nearest_within_window():
    poses = [Pose.identity()] * 4
    est = Trajectory([0.0, 0.1, 0.2, 0.5], poses)
    gt = Trajectory([0.004, 0.095, 0.215, 0.3], poses)
    # 0.2 -> 0.215 is 15 ms away; 0.5 has nothing
    assert associate(est, gt) == [(0, 0), (1, 1)]
    assert associate(est, gt, max_dt=0.02) == [(0, 0), (1, 1), (2, 2)]


def test_associate_uses_each_pose_once():
    poses = [Pose.identity()] * 2
    est = Trajectory([0.100, 0.104], poses)
    gt = Trajectory([0.103, 0.5], poses)
    assert associate(est, gt) == [(1, 0)]


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def test_identity_alignment(gt):
    for result in (align_se3(gt, gt), align_sim3(gt, gt)):
        assert result.rmse == pytest.approx(0.0, abs=1e-10)
        assert_allclose(result.transform.R, np.eye(3), atol=1e-10)
        assert_allclose(result.transform.t, 0.0, atol=1e-10)
        assert result.matches == len(gt)
    assert align_sim3(gt, gt).scale_error == pytest.approx(0.0, abs=1e-10)


def test_se3_recovers_known_transform(gt, rng):
    T = random_pose(rng, trans=5.0, rot=2.0)
    est = gt.transformed(T)
    result = align_se3(est, gt)
    assert result.rmse < 1e-10
    assert_allclose(result.transform.R, T.R.T, atol=1e-10)
    assert_allclose(result.transform.t, -T.R.T @ T.t, atol=1e-9)
    assert result.rot_rmse == pytest.approx(0.0, abs=1e-6)


def test_sim3_scale_error_is_relative_size(gt):
    result = align_sim3(_scaled(gt, 1.011), gt)
    assert result.scale == pytest.approx(1.011, rel=1e-10)
    assert result.scale_error == pytest.approx(0.011, abs=1e-10)
    assert result.rmse < 1e-10


def test_sim3_recovers_random_similarity(gt, rng):
    T = random_pose(rng, trans=5.0, rot=2.0)
    est = gt.transformed(T, scale=0.37)
    result = align_sim3(est, gt)
    assert result.rmse < 1e-10
    assert result.scale == pytest.approx(0.37, rel=1e-10)
    assert_allclose(result.transform.R, T.R.T, atol=1e-10)


def test_se3_rmse_never_below_sim3(gt, rng):
    est = Trajectory(gt.timestamps, [Pose(p.R, 1.2 * p.t + rng.normal(0, 0.05, 3)) for p in gt.poses])
    assert align_se3(est, gt).rmse >= align_sim3(est, gt).rmse - 1e-12


def test_alignment_invariant_to_common_rigid_transform(gt, rng):
    est = Trajectory(gt.timestamps, [Pose(p.R, p.t + rng.normal(0, 0.1, 3)) for p in gt.poses])
    T = random_pose(rng, trans=10.0, rot=3.0)
    for align in (align_se3, align_sim3):
        assert align(est.transformed(T), gt.transformed(T)).rmse == pytest.approx(align(est, gt).rmse, abs=1e-10)


def test_applying_transform_reproduces_rmse(gt, rng):
    est = Trajectory(gt.timestamps, [Pose(p.R, 0.8 * p.t + rng.normal(0, 0.1, 3)) for p in gt.poses])
    result = align_sim3(est, gt)
    aligned = est.transformed(result.transform, scale=result.align_scale)
    errors = aligned.positions() - gt.positions()
    assert rmse_ate(errors) == pytest.approx(result.rmse, abs=1e-12)


def test_collinear_trajectory_still_minimal(rng):
    stamps = np.arange(10) * 0.1
    gt = Trajectory(stamps, [Pose(np.eye(3), [s, 0.0, 0.0]) for s in stamps])
    est = Trajectory(stamps, [Pose(np.eye(3), [0.0, s, 0.0]) for s in stamps])
    best = align_se3(est, gt).rmse
    # rotation about the line is unobservable, so a sweep over it cannot improve on the closed form
    for angle in np.linspace(0.0, 2 * math.pi, 37):
        R = so3_exp(np.array([angle, 0.0, 0.0])) @ so3_exp(np.array([0.0, 0.0, -math.pi / 2]))
        P = est.positions() @ R.T
        P += gt.positions().mean(axis=0) - P.mean(axis=0)
        assert best <= rmse_ate(P - gt.positions()) + 1e-10
    assert best == pytest.approx(0.0, abs=1e-10)


def test_too_few_matches(gt):
    shifted = Trajectory(gt.timestamps + 0.02, gt.poses)
    with pytest.raises(TooFewMatches):
        align_se3(shifted, gt)
    with pytest.raises(TooFewMatches):
        align_sim3(Trajectory(gt.timestamps[:2], gt.poses[:2]), gt)


def test_zero_variance_trajectory(gt):
    point = Trajectory(gt.timestamps, [Pose.identity()] * len(gt))
    with pytest.raises(ZeroVariance):
        align_sim3(point, gt)
    with pytest.raises(ZeroVariance):
        umeyama(np.zeros((4, 3)), np.ones((4, 3)), with_scale=True)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_rmse_ate_arithmetic(rng):
    assert rmse_ate(np.zeros((5, 3))) == 0.0
    assert rmse_ate(np.array([[0.3, 0, 0], [0, 0.4, 0]])) == pytest.approx(math.sqrt(0.125))
    errors = rng.normal(size=(50, 3))
    direct = math.sqrt(sum(x * x + y * y + z * z for x, y, z in errors) / len(errors))
    assert rmse_ate(errors) == pytest.approx(direct)
    with pytest.raises(EmptyInput):
        rmse_ate(np.zeros((0, 3)))


def test_trajectory_metrics_keys(gt):
    metrics = trajectory_metrics(_scaled(gt, 1.011), gt)
    assert set(metrics) == {"rmse", "rmse_gt_scaled", "scale_error", "rot_rmse"}
    assert metrics["scale_error"] == pytest.approx(0.011, abs=1e-9)
    assert metrics["rmse_gt_scaled"] == pytest.approx(0.0, abs=1e-9)
    assert metrics["rmse"] > 0.0
