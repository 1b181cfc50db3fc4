"""First-estimate linearization of prior-connected factors."""

from __future__ import annotations

from typing import Callable

import numpy as np

from planevio.services.imu import BodyState, ImuBias, InertialResidual, PreintegratedImu, information_matrix, inertial_residual
from planevio.state import Keyframe, MarginalizationPrior, SlidingWindow, tangent_delta, variable_value


def fej_evaluate(
    factor: Callable[[object], tuple[np.ndarray, np.ndarray]],
    current,
    fej,
    minus: Callable[[object, object], np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate a factor with its Jacobian frozen at the first estimate.

    Returns r(fej) + J(fej) (current - fej) and J(fej). `minus` maps two states to
    their tangent difference; plain vector subtraction by default.
    """
    r0, J = factor(fej)
    diff = (np.asarray(current, dtype=float) - np.asarray(fej, dtype=float)) if minus is None else minus(current, fej)
    return np.asarray(r0) + J @ diff, J


def prior_delta(window: SlidingWindow, prior: MarginalizationPrior) -> np.ndarray:
    """Current state minus the prior's linearization point, stacked over the prior's keys."""
    if not prior.keys:
        return np.zeros(0)
    return np.concatenate([
        tangent_delta(k, variable_value(window, k), prior.linearization[k]) for k in prior.keys
    ])


def _body(kf: Keyframe, pose_lin, body_lin) -> BodyState:
    pose = kf.pose if pose_lin is None else pose_lin[0]
    if body_lin is None:
        return BodyState(pose, kf.velocity, kf.bias)
    return BodyState(pose, body_lin[0:3], ImuBias(body_lin[3:6], body_lin[6:9]))


def inertial_factor(window: SlidingWindow, kf_i: Keyframe, kf_j: Keyframe, pre: PreintegratedImu) -> InertialResidual:
    """Inertial residual between consecutive keyframes, FEJ-linearized where the prior reaches."""
    prior = window.marg_prior
    lin = {k: prior.linearization.get(k) for k in
           (("kf", kf_i.id), ("body", kf_i.id), ("kf", kf_j.id), ("body", kf_j.id))}
    if all(v is None for v in lin.values()):
        return inertial_residual(kf_i.body_state, kf_j.body_state, pre, window.gravity)

    keys = list(lin)
    fej_states = (_body(kf_i, lin[keys[0]], lin[keys[1]]), _body(kf_j, lin[keys[2]], lin[keys[3]]))
    current = (kf_i.body_state, kf_j.body_state)

    def factor(states):
        res = inertial_residual(states[0], states[1], pre, window.gravity)
        J = np.hstack([res.jacobians["pose_i"], res.jacobians["body_i"], res.jacobians["pose_j"], res.jacobians["body_j"]])
        return res.residual, J

    def minus(a, b):
        parts = []
        for sa, sb in zip(a, b):
            parts.append(tangent_delta(("kf", 0), (sa.pose, 0.0, 0.0), (sb.pose, 0.0, 0.0))[:6])
            parts.append(np.concatenate([sa.velocity - sb.velocity, sa.bias.vector() - sb.bias.vector()]))
        return np.concatenate(parts)

    r, J = fej_evaluate(factor, current, fej_states, minus)
    return InertialResidual(
        residual=r,
        information=information_matrix(pre),
        jacobians={"pose_i": J[:, 0:6], "body_i": J[:, 6:15], "pose_j": J[:, 15:21], "body_j": J[:, 21:30]},
    )


def inertial_factors(window: SlidingWindow) -> list[tuple[int, int, InertialResidual]]:
    out = []
    for (i, j), pre in sorted(window.imu.items()):
        out.append((i, j, inertial_factor(window, window.keyframe(i), window.keyframe(j), pre)))
    return out
