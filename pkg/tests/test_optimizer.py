import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import subspace_angles

from planevio.config import SceneSection
from planevio.errors import InactivePlane
from planevio.services.geometry import HorizontalPlane, Pose, pose_difference, so3_exp
from planevio.services.imu import ImuBias, ImuNoise, inertial_residual, preintegrate
from planevio.services.linearization import fej_evaluate, inertial_factor
from planevio.services.optimizer import (
    NormalEquations,
    build_normal_equations,
    gauge_prior,
    marginalize_keyframe,
    optimize,
    retire_plane,
    schur_marginalize,
    solve_and_update,
    state_dimension,
)
from planevio.services.residuals import RobustWeights, total_energy
from planevio.services.synth import (
    SceneSpec, TrajectorySpec, perturb_pose, render, samples_between, select_points, simulate_imu,
)
from planevio.state import Layout, MarginalizationPrior, PlaneState, PointFeature, SlidingWindow, variable_value
from tests.conftest import FLOOR_PIXELS, floor_scene, view_keyframe


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def _point_structured_system(rng, n=6, m=4, rows_per_point=5, damping=0.0):
    """Least-squares system where each residual row touches the state and at most one point."""
    rows = []
    for k in range(m):
        J = np.zeros((rows_per_point, n + m))
        J[:, :n] = rng.normal(size=(rows_per_point, n))
        J[:, n + k] = rng.normal(size=rows_per_point)
        rows.append(J)
    rows.append(np.hstack([rng.normal(size=(n, n)), np.zeros((n, m))]))
    J = np.vstack(rows)
    r = rng.normal(size=len(J))
    H_full, b_full = J.T @ J, J.T @ r
    neq = NormalEquations(
        layout=Layout([("kf", 0)], [n]),
        H=H_full[:n, :n], b=b_full[:n], point_ids=list(range(m)),
        Hpp=np.diag(H_full[n:, n:]).copy(), bp=b_full[n:], C=H_full[n:, :n], damping=damping,
    )
    return neq, H_full, b_full


@pytest.mark.parametrize("damping", [0.0, 1e-2])
def test_schur_solution_matches_dense_solve(rng, damping):
    neq, _, _ = _point_structured_system(rng, damping=damping)
    dx, dp = neq.solve()
    H, b = neq.full()
    expected = np.linalg.solve(H, -b)
    assert_allclose(np.concatenate([dx, dp]), expected, rtol=1e-8, atol=1e-10)


def test_schur_marginalize_matches_covariance(rng):
    A = rng.normal(size=(12, 8))
    H = A.T @ A
    b = rng.normal(size=8)
    marg = [1, 4, 5]
    H_star, b_star, keep, drop = schur_marginalize(H, b, marg)
    assert keep.tolist() == [0, 2, 3, 6, 7]
    cov = np.linalg.inv(H)
    assert_allclose(np.linalg.inv(H_star), cov[np.ix_(keep, keep)], rtol=1e-8)
    # minimizing the reduced system gives the kept part of the full minimizer
    assert_allclose(np.linalg.solve(H_star, -b_star), np.linalg.solve(H, -b)[keep], rtol=1e-8)
    Hmm = H[np.ix_(marg, marg)]
    assert drop == pytest.approx(b[marg] @ np.linalg.solve(Hmm, b[marg]))


def test_schur_marginalize_nothing(rng):
    A = rng.normal(size=(5, 3))
    H_star, b_star, keep, drop = schur_marginalize(A.T @ A, np.ones(3), [])
    assert_allclose(H_star, A.T @ A)
    assert drop == 0.0


def test_gaussian_chain_marginalization():
    # x0 -- x1 -- x2 with unit-information pairwise factors and a prior on x0
    H = np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
    H_star, _, _, _ = schur_marginalize(H, np.zeros(3), [0])
    assert_allclose(H_star, [[1.5, -1.0], [-1.0, 1.0]])


def _linear_factors(rng, n_vars, dim, links):
    """Random linear Gaussian factors r = A x - z over blocks of `dim` variables."""
    factors = []
    for blocks in links:
        A = np.zeros((2 * dim, n_vars * dim))
        for k in blocks:
            A[:, k * dim:(k + 1) * dim] = rng.normal(size=(2 * dim, dim))
        factors.append((A, rng.normal(size=2 * dim)))
    return factors


def _normal_equations(factors, n):
    H, b = np.zeros((n, n)), np.zeros(n)
    for A, z in factors:
        # residual at x = 0 is -z
        H += A.T @ A
        b -= A.T @ z
    return H, b


def test_marginalize_then_optimize_matches_full_solve(rng):
    dim = 2
    old = _linear_factors(rng, 4, dim, [(0,), (0, 1), (1, 2), (0, 2)])
    new = _linear_factors(rng, 4, dim, [(2, 3), (3,), (1, 3)])
    n = 4 * dim

    H_full, b_full = _normal_equations(old + new, n)
    full = np.linalg.solve(H_full, -b_full)

    # eliminate x0 using only the factors that existed before x3 arrived
    H_old, b_old = _normal_equations(old, n)
    H_star, b_star, keep, _ = schur_marginalize(H_old, b_old, range(dim))
    H_new, b_new = _normal_equations(new, n)
    reduced = np.linalg.solve(H_star + H_new[np.ix_(keep, keep)], -(b_star + b_new[keep]))
    assert_allclose(reduced, full[keep], rtol=1e-8, atol=1e-10)


class _NeverBetter:
    def __init__(self):
        self.applied = 0
        self.state = 0

    def energy(self):
        return math.inf

    def apply(self, dx, dp, neq):
        self.applied += 1
        self.state += 1

    def snapshot(self):
        return self.state

    def restore(self, snap):
        self.state = snap


def test_rejected_steps_raise_damping_and_restore(rng):
    neq, _, _ = _point_structured_system(rng, damping=1e-4)
    neq.energy = 1.0
    problem = _NeverBetter()
    step = solve_and_update(problem, neq, max_retries=5)
    assert not step.accepted
    assert step.attempts == 6
    assert problem.applied == 6
    assert problem.state == 0
    assert step.damping == pytest.approx(1e-4 * 10**6)


def test_fej_evaluate_freezes_jacobian():
    def factor(x):
        return np.array([math.sin(x[0])]), np.array([[math.cos(x[0])]])

    r, J = fej_evaluate(factor, np.array([0.3]), np.array([0.1]))
    assert_allclose(J, [[math.cos(0.1)]])
    assert_allclose(r, [math.sin(0.1) + math.cos(0.1) * 0.2])


def _pairwise_distances(x):
    """Distances between three planar points and their Jacobian; rigid motions are the null space."""
    p = x.reshape(3, 2)
    rows, J = [], []
    for i, j in ((0, 1), (1, 2), (0, 2)):
        d = p[j] - p[i]
        length = np.linalg.norm(d)
        row = np.zeros(6)
        row[2 * i:2 * i + 2] = -d / length
        row[2 * j:2 * j + 2] = d / length
        rows.append(length)
        J.append(row)
    return np.array(rows), np.array(J)


def _null_space(J):
    w, V = np.linalg.eigh(J.T @ J)
    return V[:, w < 1e-10 * w.max()]


def test_fej_keeps_null_space_fixed():
    fej = np.array([0.0, 0.0, 1.0, 0.0, 0.3, 0.8])
    steps = [np.array([0.05, -0.02, 0.0, 0.04, -0.03, 0.01]), np.array([-0.02, 0.03, 0.06, 0.0, 0.02, -0.05])]
    reference = _null_space(_pairwise_distances(fej)[1])
    assert reference.shape[1] == 3

    x = fej.copy()
    for step in steps:
        x = x + step
        _, J = fej_evaluate(_pairwise_distances, x, fej)
        assert subspace_angles(_null_space(J), reference).max() < 1e-8
    # relinearizing at the moved state rotates the null space
    moved = _null_space(_pairwise_distances(x)[1])
    assert subspace_angles(moved, reference).max() > 1e-3


# ---------------------------------------------------------------------------
# Windows built from a rendered corridor
# ---------------------------------------------------------------------------

@pytest.fixture
def corridor_window(cam):
    """Three keyframes 0.25 s apart with exact IMU factors and ground-truth points."""
    scene = SceneSpec.from_config(SceneSection(name="corridor"))
    traj = TrajectorySpec(duration=1.0)
    imu = simulate_imu(traj)
    window = SlidingWindow(max_size=3)
    next_id = 0
    for k, t in enumerate((0.25, 0.5, 0.75)):
        kf = view_keyframe(k, scene, cam, traj.body_pose(t))
        kf.timestamp = t
        kf.velocity = traj.velocity(t)
        pre = None
        if k:
            pre = preintegrate(samples_between(imu, t - 0.25, t), ImuBias(), ImuNoise())
        window.add_keyframe(kf, pre)
        sel = select_points(render(scene, cam, kf.T_wc), 25)
        for pixel, rho in zip(sel.pixels, sel.inv_depths):
            window.add_point(PointFeature(next_id, k, pixel, float(rho)))
            next_id += 1
    gauge_prior(window, 0, 1e-3, 1e-2)
    return window


def test_ground_truth_is_a_minimum(corridor_window):
    neq = build_normal_equations(corridor_window, 0.0)
    assert neq.energy == pytest.approx(total_energy(corridor_window), rel=1e-9)
    assert np.linalg.norm(neq.b) < 1e-3 * max(1.0, np.linalg.norm(neq.H))


def test_optimize_recovers_perturbed_state(corridor_window):
    truth = {kf.id: kf.pose for kf in corridor_window.keyframes}
    rng = np.random.default_rng(9)
    for kf in corridor_window.keyframes[1:]:
        kf.pose = perturb_pose(kf.pose, rng, 0.01, math.radians(0.3))
    for p in corridor_window.points.values():
        p.inv_depth *= 1.0 + 0.02 * rng.normal()

    def error():
        return sum(np.linalg.norm(pose_difference(kf.pose, truth[kf.id])) for kf in corridor_window.keyframes)

    before = error()
    summary = optimize(corridor_window, RobustWeights(), iterations=6)
    assert summary.final_energy < summary.initial_energy
    assert summary.trace[0]["accepted"]
    assert [row["iter"] for row in summary.trace] == list(range(len(summary.trace)))
    energies = [summary.initial_energy] + [row["energy"] for row in summary.trace if row["accepted"]]
    assert all(later <= earlier * (1 + 1e-12) for earlier, later in zip(energies, energies[1:]))
    assert error() < 0.5 * before


def test_inertial_factor_uses_first_estimate(corridor_window):
    w = corridor_window
    kf0, kf1 = w.keyframes[0], w.keyframes[1]
    lin_state = kf0.body_state
    kf0.pose = kf0.pose.retract(np.array([0.01, 0.0, 0.0, 0.0, 0.0, 0.01]))
    pre = w.imu[(0, 1)]
    fej = inertial_factor(w, kf0, kf1, pre)
    at_lin = inertial_residual(lin_state, kf1.body_state, pre, w.gravity)
    for name in ("pose_i", "body_i", "pose_j", "body_j"):
        assert_allclose(fej.jacobians[name], at_lin.jacobians[name], atol=1e-12, err_msg=name)
    current = inertial_residual(kf0.body_state, kf1.body_state, pre, w.gravity)
    assert not np.allclose(fej.jacobians["pose_i"], current.jacobians["pose_i"])


def test_gauge_prior_holds_first_keyframe(corridor_window):
    w = corridor_window
    assert w.marg_prior.keys == [("kf", 0), ("body", 0)]
    e0 = total_energy(w)
    w.keyframes[0].pose = w.keyframes[0].pose.retract(np.array([1e-3, 0, 0, 0, 0, 0]))
    assert total_energy(w) > e0


def test_marginalize_oldest_keyframe(corridor_window):
    w = corridor_window
    hosted = {p.id for p in w.points_hosted(0)}
    prior = marginalize_keyframe(w, 0)
    assert w.keyframe_ids() == [1, 2]
    assert not any(k[1] == 0 and k[0] in ("kf", "body") for k in prior.keys)
    assert ("kf", 1) in prior.keys and ("body", 1) in prior.keys
    assert hosted.isdisjoint(w.points)
    assert (0, 1) not in w.imu
    eig = np.linalg.eigvalsh(prior.H)
    assert eig.min() > -1e-9 * eig.max()
    w.check_invariants()
    # the prior still constrains what it linearized
    assert build_normal_equations(w, 1e-4).energy == pytest.approx(total_energy(w), rel=1e-9)


def _drift(kf):
    kf.pose = kf.pose.retract(np.array([2e-3, 0.0, 0.0, 0.0, 0.0, 2e-3]))
    kf.a += 0.01


def test_marginalization_uses_first_estimates(corridor_window):
    reference = corridor_window.copy()
    w = corridor_window
    # keyframe 0 sits in the gauge prior; moving it must not change the linearization
    _drift(w.keyframes[0])
    moved = marginalize_keyframe(w, 0)
    expected = marginalize_keyframe(reference, 0)
    assert moved.keys == expected.keys
    tol = 1e-9 * np.abs(expected.H).max()
    assert_allclose(moved.H, expected.H, rtol=1e-7, atol=tol)
    assert_allclose(moved.b, expected.b, rtol=1e-7, atol=tol)
    assert moved.constant == pytest.approx(expected.constant, rel=1e-7, abs=tol)


def test_marginalization_prior_carries_removed_energy(corridor_window):
    w = corridor_window
    w.points.clear()
    _drift(w.keyframes[0])
    neq = build_normal_equations(w, 0.0)
    marg = np.concatenate([np.arange(neq.layout.slice(k).start, neq.layout.slice(k).stop)
                           for k in (("kf", 0), ("body", 0))])
    _, _, _, drop = schur_marginalize(neq.H, neq.b, marg)
    before = total_energy(w)
    marginalize_keyframe(w, 0)
    # the prior equals the removed factors minimized over keyframe 0
    assert total_energy(w) == pytest.approx(before - drop, rel=1e-6, abs=1e-6 * before)


def test_marginalizing_coplanar_points_refreshes_plane_prior(corridor_window):
    w = corridor_window
    w.planes[7] = PlaneState(HorizontalPlane(1.0), set())
    bound = w.points_hosted(0)[:5]
    for p in bound:
        p.bind_to_plane(7)
        w.planes[7].members.add(p.id)
    marginalize_keyframe(w, 0, plane_prior_sigma=(1e-2, 2e-2))
    prior = w.plane_priors[7]
    assert prior.w_n == 5
    assert_allclose(prior.covariance, [[4e-4]])


def test_state_dimension_shrinks_when_points_bind(corridor_window):
    w = corridor_window
    before = state_dimension(w)
    assert before["total"] == 17 * 3 + len(w.points)
    w.planes[0] = PlaneState(HorizontalPlane(1.0))
    ids = sorted(w.points)[:6]
    for pid in ids:
        w.points[pid].bind_to_plane(0)
        w.planes[0].members.add(pid)
    after = state_dimension(w)
    assert after["total"] == before["total"] - 6 + 1
    assert after["coplanar_points"] == 6
    assert after["plane_dof"] == 1


def test_retire_plane_leaves_a_prior(corridor_window):
    w = corridor_window
    w.planes[3] = PlaneState(HorizontalPlane(1.0))
    for pid in sorted(w.points)[:4]:
        w.points[pid].bind_to_plane(3)
        w.planes[3].members.add(pid)
    factor = retire_plane(w, 3)
    assert 3 not in w.planes
    assert w.plane_priors[3] is factor
    assert factor.w_n == 4
    assert np.linalg.eigvalsh(factor.covariance).min() > 0
    assert not w.coplanar_points()
    with pytest.raises(InactivePlane):
        retire_plane(w, 3)


def _held_floor_window(cam, rise: float) -> SlidingWindow:
    """Two keyframes over the floor, both believed `rise` above where they rendered, held there by a stiff prior.

    The floor estimate that explains the images exactly is d = 1 - rise.
    """
    scene = floor_scene()
    window = SlidingWindow(max_size=2)
    for kf_id, pose in enumerate((Pose.identity(), Pose(so3_exp(np.array([0.0, 0.0, 0.02])), [0.03, 0.15, 0.01]))):
        kf = view_keyframe(kf_id, scene, cam, pose)
        kf.pose = Pose(pose.R, pose.t + np.array([0.0, 0.0, rise]))
        window.add_keyframe(kf)
    window.planes[0] = PlaneState(HorizontalPlane(1.0 - rise))
    for i, pixel in enumerate(FLOOR_PIXELS):
        window.add_point(PointFeature(i, 0, pixel, plane_id=0))
        window.planes[0].members.add(i)
    keys = [k for k in window.layout().keys if k[0] != "plane"]
    dim = sum(window.layout().dims[k] for k in keys)
    window.marg_prior = MarginalizationPrior(
        keys=keys, H=1e8 * np.eye(dim), b=np.zeros(dim),
        linearization={k: variable_value(window, k) for k in keys},
    )
    return window


def test_retired_plane_prior_steadies_reestimated_distance(cam):
    prior = retire_plane(_held_floor_window(cam, 0.0), 0)
    assert prior.prior.d == pytest.approx(1.0)

    rises = (-0.03, -0.01, 0.01, 0.03)
    estimates = {}
    for with_prior in (False, True):
        ds = []
        for rise in rises:
            w = _held_floor_window(cam, rise)
            if with_prior:
                w.plane_priors[0] = prior
            optimize(w, RobustWeights(), iterations=5)
            ds.append(w.planes[0].params.d)
        estimates[with_prior] = np.array(ds)

    assert_allclose(estimates[False], 1.0 - np.array(rises), atol=1e-6)
    assert np.std(estimates[True], ddof=1) < np.std(estimates[False], ddof=1)
    # every estimate is pulled toward the retired value
    assert np.all(np.abs(estimates[True] - 1.0) < np.abs(estimates[False] - 1.0))
