"""IMU preintegration between keyframes and the inertial residual.

Preintegrated deltas exclude gravity and live in the body frame of keyframe i:
    R_j = R_i dR
    v_j = v_i + g dt + R_i dv
    p_j = p_i + v_i dt + 0.5 g dt^2 + R_i dp

Residual ordering is (dtheta, dv, dp, dbg, dba); body-state Jacobian columns are
(velocity, gyro bias, accel bias); pose Jacobian columns follow the left
retraction (rho, phi).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from planevio.errors import EmptyStream, NonMonotonicTimestamps, SingularCovariance
from planevio.services.geometry import (
    Pose,
    right_jacobian,
    right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
)

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
COV_CONDITIONING = 1e-12
BIAS_WARN = 0.1


@dataclass(frozen=True, eq=False)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True, eq=False)
class ImuBias:
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "bg", np.asarray(self.bg, dtype=float).reshape(3))
        object.__setattr__(self, "ba", np.asarray(self.ba, dtype=float).reshape(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.bg, self.ba])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> ImuBias:
        return cls(v[:3], v[3:])


@dataclass(frozen=True, eq=False)
class ImuNoise:
    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_bg: float = 1.9e-5
    sigma_ba: float = 3.0e-3
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        if min(self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba) <= 0:
            raise ValueError("IMU noise densities must be positive")
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float).reshape(3))


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    dt_total: float
    covariance: np.ndarray  # 9x9, (theta, v, p)
    J_R_bg: np.ndarray
    J_v_bg: np.ndarray
    J_v_ba: np.ndarray
    J_p_bg: np.ndarray
    J_p_ba: np.ndarray
    linearization_bias: ImuBias
    noise: ImuNoise

    @property
    def bias_jacobians(self) -> dict[str, np.ndarray]:
        return {"R_bg": self.J_R_bg, "v_bg": self.J_v_bg, "v_ba": self.J_v_ba,
                "p_bg": self.J_p_bg, "p_ba": self.J_p_ba}

    def corrected(self, bias: ImuBias) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First-order bias-corrected (dR, dv, dp)."""
        dbg = bias.bg - self.linearization_bias.bg
        dba = bias.ba - self.linearization_bias.ba
        dR = self.delta_R @ so3_exp(self.J_R_bg @ dbg)
        dv = self.delta_v + self.J_v_bg @ dbg + self.J_v_ba @ dba
        dp = self.delta_p + self.J_p_bg @ dbg + self.J_p_ba @ dba
        return dR, dv, dp


@dataclass(frozen=True, eq=False)
class BodyState:
    pose: Pose  # T_wi
    velocity: np.ndarray
    bias: ImuBias = field(default_factory=ImuBias)

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))


def preintegrate(samples: list[ImuSample], bias: ImuBias, noise: ImuNoise) -> PreintegratedImu:
    """Midpoint preintegration of bias-corrected samples with a fixed bias."""
    if len(samples) < 2:
        raise EmptyStream("preintegration needs at least one sample interval")

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    cov = np.zeros((9, 9))
    J_R_bg = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_p_ba = np.zeros((3, 3))
    dt_total = 0.0
    I3 = np.eye(3)

    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.timestamp - s0.timestamp
        if dt <= 0:
            raise NonMonotonicTimestamps(
                f"timestamps not strictly increasing at t={s1.timestamp:.9f}"
            )
        omega = 0.5 * (s0.gyro + s1.gyro) - bias.bg
        a0 = s0.accel - bias.ba
        a1 = s1.accel - bias.ba
        E = so3_exp(omega * dt)
        Jr = right_jacobian(omega * dt)
        dR_next = dR @ E

        a_mid = 0.5 * (dR @ a0 + dR_next @ a1)

        # bias Jacobians, exact derivatives of this discrete scheme
        J_R_bg_next = E.T @ J_R_bg - Jr * dt
        da_bg = -0.5 * (dR @ skew(a0) @ J_R_bg + dR_next @ skew(a1) @ J_R_bg_next)
        da_ba = -0.5 * (dR + dR_next)
        J_p_bg = J_p_bg + J_v_bg * dt + 0.5 * dt * dt * da_bg
        J_p_ba = J_p_ba + J_v_ba * dt + 0.5 * dt * dt * da_ba
        J_v_bg = J_v_bg + da_bg * dt
        J_v_ba = J_v_ba + da_ba * dt
        J_R_bg = J_R_bg_next

        # covariance of (theta, v, p)
        Ma = -0.5 * (dR @ skew(a0) + dR_next @ skew(a1) @ E.T)
        Mg = -0.5 * dR_next @ skew(a1) @ Jr * dt
        Mn = 0.5 * (dR + dR_next)
        A = np.eye(9)
        A[0:3, 0:3] = E.T
        A[3:6, 0:3] = Ma * dt
        A[6:9, 0:3] = Ma * 0.5 * dt * dt
        A[6:9, 3:6] = I3 * dt
        B = np.zeros((9, 6))
        B[0:3, 0:3] = Jr * dt
        B[3:6, 0:3] = Mg * dt
        B[6:9, 0:3] = Mg * 0.5 * dt * dt
        B[3:6, 3:6] = Mn * dt
        B[6:9, 3:6] = Mn * 0.5 * dt * dt
        Q = np.diag([noise.sigma_g**2 / dt] * 3 + [noise.sigma_a**2 / dt] * 3)
        cov = A @ cov @ A.T + B @ Q @ B.T

        dp = dp + dv * dt + 0.5 * a_mid * dt * dt
        dv = dv + a_mid * dt
        dR = dR_next
        dt_total += dt

    return PreintegratedImu(
        delta_R=dR, delta_v=dv, delta_p=dp, dt_total=dt_total,
        covariance=0.5 * (cov + cov.T),
        J_R_bg=J_R_bg, J_v_bg=J_v_bg, J_v_ba=J_v_ba, J_p_bg=J_p_bg, J_p_ba=J_p_ba,
        linearization_bias=bias, noise=noise,
    )


def bias_correct(pre: PreintegratedImu, new_bias: ImuBias) -> PreintegratedImu:
    delta = np.linalg.norm(new_bias.vector() - pre.linearization_bias.vector())
    if delta > BIAS_WARN:
        logger.warning("bias update %.3f is large for a first-order correction", delta)
    dR, dv, dp = pre.corrected(new_bias)
    return replace(pre, delta_R=dR, delta_v=dv, delta_p=dp, linearization_bias=new_bias)


def compose_preintegrated(a: PreintegratedImu, b: PreintegratedImu) -> PreintegratedImu:
    """Concatenate two consecutive blocks integrated with the same bias."""
    if not np.allclose(a.linearization_bias.vector(), b.linearization_bias.vector()):
        raise ValueError("blocks were integrated with different biases")
    Ra, dt_b = a.delta_R, b.dt_total
    dR = Ra @ b.delta_R
    dv = a.delta_v + Ra @ b.delta_v
    dp = a.delta_p + a.delta_v * dt_b + Ra @ b.delta_p

    J_R_bg = b.delta_R.T @ a.J_R_bg + b.J_R_bg
    J_v_bg = a.J_v_bg - Ra @ skew(b.delta_v) @ a.J_R_bg + Ra @ b.J_v_bg
    J_v_ba = a.J_v_ba + Ra @ b.J_v_ba
    J_p_bg = a.J_p_bg + a.J_v_bg * dt_b - Ra @ skew(b.delta_p) @ a.J_R_bg + Ra @ b.J_p_bg
    J_p_ba = a.J_p_ba + a.J_v_ba * dt_b + Ra @ b.J_p_ba

    Fa = np.eye(9)
    Fa[0:3, 0:3] = b.delta_R.T
    Fa[3:6, 0:3] = -Ra @ skew(b.delta_v)
    Fa[6:9, 0:3] = -Ra @ skew(b.delta_p)
    Fa[6:9, 3:6] = np.eye(3) * dt_b
    Fb = np.zeros((9, 9))
    Fb[0:3, 0:3] = np.eye(3)
    Fb[3:6, 3:6] = Ra
    Fb[6:9, 6:9] = Ra
    cov = Fa @ a.covariance @ Fa.T + Fb @ b.covariance @ Fb.T

    return PreintegratedImu(
        delta_R=dR, delta_v=dv, delta_p=dp, dt_total=a.dt_total + dt_b,
        covariance=0.5 * (cov + cov.T),
        J_R_bg=J_R_bg, J_v_bg=J_v_bg, J_v_ba=J_v_ba, J_p_bg=J_p_bg, J_p_ba=J_p_ba,
        linearization_bias=a.linearization_bias, noise=a.noise,
    )


def predict_state(state_i: BodyState, pre: PreintegratedImu, gravity: np.ndarray = GRAVITY) -> BodyState:
    """Propagate a body state through a preintegrated block (bias held fixed)."""
    dR, dv, dp = pre.corrected(state_i.bias)
    Ri, pi, vi, dt = state_i.pose.R, state_i.pose.t, state_i.velocity, pre.dt_total
    pose = Pose(Ri @ dR, pi + vi * dt + 0.5 * gravity * dt * dt + Ri @ dp).normalized()
    return BodyState(pose, vi + gravity * dt + Ri @ dv, state_i.bias)


@dataclass(frozen=True, eq=False)
class InertialResidual:
    residual: np.ndarray  # 15
    information: np.ndarray  # 15x15
    jacobians: dict[str, np.ndarray]  # pose_i, body_i, pose_j, body_j

    def cost(self) -> float:
        return float(self.residual @ self.information @ self.residual)


def information_matrix(pre: PreintegratedImu) -> np.ndarray:
    cov = pre.covariance + COV_CONDITIONING * np.eye(9)
    try:
        info9 = np.linalg.inv(cov)
    except np.linalg.LinAlgError as e:
        raise SingularCovariance("preintegration covariance is not invertible") from e
    if not np.all(np.isfinite(info9)):
        raise SingularCovariance("preintegration covariance is not invertible")
    info = np.zeros((15, 15))
    info[:9, :9] = 0.5 * (info9 + info9.T)
    dt = max(pre.dt_total, 1e-9)
    info[9:12, 9:12] = np.eye(3) / (pre.noise.sigma_bg**2 * dt)
    info[12:15, 12:15] = np.eye(3) / (pre.noise.sigma_ba**2 * dt)
    return info


def inertial_residual(
    state_i: BodyState, state_j: BodyState, pre: PreintegratedImu, gravity: np.ndarray = GRAVITY,
) -> InertialResidual:
    Ri, pi, vi = state_i.pose.R, state_i.pose.t, state_i.velocity
    Rj, pj, vj = state_j.pose.R, state_j.pose.t, state_j.velocity
    dt = pre.dt_total
    dbg = state_i.bias.bg - pre.linearization_bias.bg
    dR, dv, dp = pre.corrected(state_i.bias)

    r_R = so3_log(dR.T @ Ri.T @ Rj)
    w = vj - vi - gravity * dt
    u = pj - pi - vi * dt - 0.5 * gravity * dt * dt
    r_v = Ri.T @ w - dv
    r_p = Ri.T @ u - dp
    r_bg = state_j.bias.bg - state_i.bias.bg
    r_ba = state_j.bias.ba - state_i.bias.ba
    residual = np.concatenate([r_R, r_v, r_p, r_bg, r_ba])

    Jr_inv = right_jacobian_inv(r_R)
    I3 = np.eye(3)

    J_pose_i = np.zeros((15, 6))
    J_pose_i[0:3, 3:6] = -Jr_inv @ Rj.T
    J_pose_i[3:6, 3:6] = Ri.T @ skew(w)
    J_pose_i[6:9, 0:3] = -Ri.T
    J_pose_i[6:9, 3:6] = Ri.T @ (skew(u) + skew(pi))

    J_pose_j = np.zeros((15, 6))
    J_pose_j[0:3, 3:6] = Jr_inv @ Rj.T
    J_pose_j[6:9, 0:3] = Ri.T
    J_pose_j[6:9, 3:6] = -Ri.T @ skew(pj)

    J_body_i = np.zeros((15, 9))
    J_body_i[0:3, 3:6] = -Jr_inv @ so3_exp(r_R).T @ right_jacobian(pre.J_R_bg @ dbg) @ pre.J_R_bg
    J_body_i[3:6, 0:3] = -Ri.T
    J_body_i[3:6, 3:6] = -pre.J_v_bg
    J_body_i[3:6, 6:9] = -pre.J_v_ba
    J_body_i[6:9, 0:3] = -Ri.T * dt
    J_body_i[6:9, 3:6] = -pre.J_p_bg
    J_body_i[6:9, 6:9] = -pre.J_p_ba
    J_body_i[9:12, 3:6] = -I3
    J_body_i[12:15, 6:9] = -I3

    J_body_j = np.zeros((15, 9))
    J_body_j[3:6, 0:3] = Ri.T
    J_body_j[9:12, 3:6] = I3
    J_body_j[12:15, 6:9] = I3

    return InertialResidual(
        residual=residual,
        information=information_matrix(pre),
        jacobians={"pose_i": J_pose_i, "body_i": J_body_i, "pose_j": J_pose_j, "body_j": J_body_j},
    )
