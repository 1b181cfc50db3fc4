"""Trajectory association, SE3/Sim3 alignment and absolute error metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from planevio.errors import EmptyInput, NonMonotonicTimestamps, TooFewMatches, ZeroVariance
from planevio.services.geometry import Pose, so3_log

logger = logging.getLogger(__name__)

MAX_DT = 0.01
MIN_MATCHES = 3
VARIANCE_EPS = 1e-12


@dataclass(eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError(f"{len(self.timestamps)} timestamps for {len(self.poses)} poses")
        if np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestamps("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def rotations(self) -> np.ndarray:
        return np.array([p.R for p in self.poses]).reshape(-1, 3, 3)

    def transformed(self, T: Pose, scale: float = 1.0) -> Trajectory:
        """x -> s R x + t on positions, R on orientations."""
        poses = [Pose(T.R @ p.R, scale * (T.R @ p.t) + T.t) for p in self.poses]
        return Trajectory(self.timestamps.copy(), poses)


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    transform: Pose  # applied to the estimate: x -> align_scale R x + t
    align_scale: float
    rmse: float
    errors: np.ndarray  # (N, 3) aligned position errors
    rot_rmse: float
    matches: int

    @property
    def scale(self) -> float:
        """Size of the estimate relative to ground truth."""
        return 1.0 / self.align_scale

    @property
    def scale_error(self) -> float:
        return abs(1.0 - self.scale)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = MAX_DT) -> list[tuple[int, int]]:
    """Nearest-timestamp pairs (i_est, j_gt) within max_dt; each pose used once, closest pairs first."""
    candidates = []
    for i, t in enumerate(est.timestamps):
        j = int(np.searchsorted(gt.timestamps, t))
        for k in (j - 1, j):
            if 0 <= k < len(gt) and abs(gt.timestamps[k] - t) <= max_dt:
                candidates.append((abs(gt.timestamps[k] - t), i, k))
    candidates.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, k in candidates:
        if i not in used_e and k not in used_g:
            used_e.add(i)
            used_g.add(k)
            pairs.append((i, k))
    return sorted(pairs)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares (R, t, s) with dst ~ s R src + t."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = 1.0
    if with_scale:
        var_s = float(np.mean(np.sum(xs * xs, axis=1)))
        if var_s < VARIANCE_EPS:
            raise ZeroVariance("estimated trajectory has no spatial extent")
        s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return R, t, s


def rmse_ate(errors: np.ndarray) -> float:
    errors = np.asarray(errors, dtype=float).reshape(-1, 3)
    if len(errors) == 0:
        raise EmptyInput("no position errors to average")
    return float(np.sqrt(np.mean(np.sum(errors * errors, axis=1))))


def rotation_rmse(R_est: np.ndarray, R_gt: np.ndarray, R_align: np.ndarray) -> float:
    """RMSE of geodesic angles between aligned estimated and ground-truth orientations (rad)."""
    angles = [np.linalg.norm(so3_log(Rg.T @ R_align @ Re)) for Re, Rg in zip(R_est, R_gt)]
    if not angles:
        raise EmptyInput("no orientations to compare")
    return float(np.sqrt(np.mean(np.square(angles))))


def _align(est: Trajectory, gt: Trajectory, with_scale: bool, max_dt: float) -> AlignmentResult:
    pairs = associate(est, gt, max_dt)
    if len(pairs) < MIN_MATCHES:
        raise TooFewMatches(f"{len(pairs)} timestamp matches within {max_dt * 1e3:.0f} ms, need {MIN_MATCHES}")
    ie = [i for i, _ in pairs]
    ig = [j for _, j in pairs]
    P_e, P_g = est.positions()[ie], gt.positions()[ig]
    R, t, s = umeyama(P_e, P_g, with_scale)
    errors = (s * P_e @ R.T + t) - P_g
    return AlignmentResult(
        transform=Pose(R, t), align_scale=s, rmse=rmse_ate(errors), errors=errors,
        rot_rmse=rotation_rmse(est.rotations()[ie], gt.rotations()[ig], R), matches=len(pairs),
    )


def align_se3(est: Trajectory, gt: Trajectory, max_dt: float = MAX_DT) -> AlignmentResult:
    return _align(est, gt, False, max_dt)


def align_sim3(est: Trajectory, gt: Trajectory, max_dt: float = MAX_DT) -> AlignmentResult:
    return _align(est, gt, True, max_dt)


def trajectory_metrics(est: Trajectory, gt: Trajectory, max_dt: float = MAX_DT) -> dict:
    """{rmse, rmse_gt_scaled, scale_error, rot_rmse}; rotation error is taken after Sim3 alignment."""
    se3 = align_se3(est, gt, max_dt)
    sim3 = align_sim3(est, gt, max_dt)
    logger.debug("aligned %d poses: se3 %.6f m, sim3 %.6f m, scale %.6f", se3.matches, se3.rmse, sim3.rmse, sim3.scale)
    return {
        "rmse": se3.rmse,
        "rmse_gt_scaled": sim3.rmse,
        "scale_error": sim3.scale_error,
        "rot_rmse": sim3.rot_rmse,
    }
