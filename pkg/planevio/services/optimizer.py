"""Sliding-window Levenberg-Marquardt with Schur elimination of inverse depths.

Conventions: every factor contributes whitened residuals r with Jacobian J; the
normal equations hold H = J^T J and b = J^T r, the step solves H dx = -b, and the
energy is sum(r^2). The marginalization prior is 2 b*^T dx + dx^T H* dx + c.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from planevio.errors import DivergedOptimization, FactorizationFailure, InactivePlane
from planevio.services.linearization import fej_evaluate, inertial_factor, inertial_factors, prior_delta
from planevio.services.residuals import (
    PairEvaluation, PhotometricBlock, RobustWeights, evaluate_photometric, plane_prior_residual, total_energy,
)
from planevio.state import (
    PSD_TOL, Keyframe, Layout, MarginalizationPrior, PlanePriorFactor, SlidingWindow, VarKey, tangent_delta,
    variable_value,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NormalEquations", "StepResult", "WindowProblem", "build_normal_equations", "solve_and_update",
    "optimize", "schur_marginalize", "marginalize_keyframe", "retire_plane", "fej_evaluate",
    "state_dimension", "gauge_prior",
]


# --------------------------------------------------------------------------
# Normal equations
# --------------------------------------------------------------------------

@dataclass(eq=False)
class NormalEquations:
    """Reduced-state blocks plus the per-point pieces eliminated by the Schur complement."""

    layout: Layout
    H: np.ndarray
    b: np.ndarray
    point_ids: list[int] = field(default_factory=list)
    Hpp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    C: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (n_points, n) point/state coupling
    damping: float = 0.0
    energy: float = 0.0

    def __post_init__(self):
        if self.C.size == 0:
            self.C = np.zeros((len(self.point_ids), len(self.b)))

    def with_damping(self, damping: float) -> NormalEquations:
        return NormalEquations(self.layout, self.H, self.b, self.point_ids, self.Hpp, self.bp, self.C, damping, self.energy)

    def _inv_points(self) -> np.ndarray:
        d = self.Hpp + self.damping
        return np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)

    def reduced(self) -> tuple[np.ndarray, np.ndarray]:
        inv = self._inv_points()
        H = self.H + self.damping * np.eye(len(self.b)) - self.C.T @ (self.C * inv[:, None])
        b = self.b - self.C.T @ (self.bp * inv)
        return 0.5 * (H + H.T), b

    def full(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense system over [state, inverse depths], damped."""
        n, m = len(self.b), len(self.point_ids)
        H = np.zeros((n + m, n + m))
        H[:n, :n] = self.H + self.damping * np.eye(n)
        H[n:, :n] = self.C
        H[:n, n:] = self.C.T
        H[n:, n:] = np.diag(self.Hpp + self.damping)
        return H, np.concatenate([self.b, self.bp])

    def solve(self) -> tuple[np.ndarray, np.ndarray]:
        H, b = self.reduced()
        if len(b) == 0:
            dx = np.zeros(0)
        else:
            try:
                dx = cho_solve(cho_factor(H), -b)
            except LinAlgError as e:
                raise FactorizationFailure(f"reduced system not positive definite at damping {self.damping:g}") from e
            if not np.all(np.isfinite(dx)):
                raise FactorizationFailure("non-finite step")
        dp = -(self.bp + self.C @ dx) * self._inv_points()
        return dx, dp


def _add_pair(H, b, sl_a, Ja, sl_b, Jb, r):
    """Accumulate stacked residual rows touching blocks a and b (a may equal b)."""
    H[sl_a, sl_a] += Ja.T @ Ja
    b[sl_a] += Ja.T @ r
    if sl_b is None:
        return
    H[sl_b, sl_b] += Jb.T @ Jb
    H[sl_a, sl_b] += Ja.T @ Jb
    H[sl_b, sl_a] += Jb.T @ Ja
    b[sl_b] += Jb.T @ r


def _accumulate_photometric(layout: Layout, evals: list[PairEvaluation], H, b, point_index, Hpp, bp, C) -> float:
    energy = 0.0
    for ev in evals:
        blk = ev.block
        energy += float(blk.cost.sum())
        N = len(ev.point_ids)
        Jh = blk.J_h.reshape(N * 8, 8)
        Jt = blk.J_t.reshape(N * 8, 8)
        r = blk.residual.reshape(N * 8)
        hs, ts = layout.slice(("kf", ev.host_id)), layout.slice(("kf", ev.target_id))
        _add_pair(H, b, hs, Jh, ts, Jt, r)
        if ev.plane_id is not None:
            ps = layout.slice(("plane", ev.plane_id))
            Jp = blk.J_x.reshape(N * 8, -1)
            H[ps, ps] += Jp.T @ Jp
            H[ps, hs] += Jp.T @ Jh
            H[hs, ps] += Jh.T @ Jp
            H[ps, ts] += Jp.T @ Jt
            H[ts, ps] += Jt.T @ Jp
            b[ps] += Jp.T @ r
        else:
            idx = np.array([point_index[p] for p in ev.point_ids], dtype=int)
            jx = blk.J_x[..., 0]
            Hpp[idx] += (jx * jx).sum(axis=1)
            bp[idx] += (jx * blk.residual).sum(axis=1)
            C[idx, hs] += np.einsum("nk,nkj->nj", jx, blk.J_h)
            C[idx, ts] += np.einsum("nk,nkj->nj", jx, blk.J_t)
    return energy


def _accumulate_inertial(layout: Layout, i: int, j: int, res, H, b) -> float:
    blocks = [
        (layout.slice(("kf", i)).start, res.jacobians["pose_i"]),
        (layout.offsets[("body", i)], res.jacobians["body_i"]),
        (layout.slice(("kf", j)).start, res.jacobians["pose_j"]),
        (layout.offsets[("body", j)], res.jacobians["body_j"]),
    ]
    J = np.zeros((15, layout.size))
    for start, Jb in blocks:
        J[:, start:start + Jb.shape[1]] += Jb
    cols = np.flatnonzero(np.any(J != 0, axis=0))
    Jc = J[:, cols]
    W = res.information
    H[np.ix_(cols, cols)] += Jc.T @ W @ Jc
    b[cols] += Jc.T @ W @ res.residual
    return res.cost()


def _prior_indices(layout: Layout, prior: MarginalizationPrior) -> np.ndarray:
    return np.concatenate([np.arange(layout.slice(k).start, layout.slice(k).stop) for k in prior.keys]).astype(int)


def _accumulate_prior(layout: Layout, window: SlidingWindow, H, b) -> float:
    prior = window.marg_prior
    if not prior.keys:
        return 0.0
    dx = prior_delta(window, prior)
    idx = _prior_indices(layout, prior)
    H[np.ix_(idx, idx)] += prior.H
    b[idx] += prior.b + prior.H @ dx
    return prior.energy(dx)


def build_normal_equations(window: SlidingWindow, lambda_lm: float = 0.0,
                           weights: RobustWeights = RobustWeights(), threads: int = 1) -> NormalEquations:
    layout = window.layout()
    n = layout.size
    H, b = np.zeros((n, n)), np.zeros(n)
    free = window.non_coplanar_points()
    point_ids = [p.id for p in free]
    point_index = {pid: k for k, pid in enumerate(point_ids)}
    Hpp, bp, C = np.zeros(len(free)), np.zeros(len(free)), np.zeros((len(free), n))

    energy = _accumulate_photometric(layout, evaluate_photometric(window, weights, True, threads), H, b, point_index, Hpp, bp, C)
    for i, j, res in inertial_factors(window):
        energy += _accumulate_inertial(layout, i, j, res, H, b)
    for pid, prior in window.plane_priors.items():
        if pid in window.planes:
            r, J = plane_prior_residual(window.planes[pid].params, prior)
            ps = layout.slice(("plane", pid))
            H[ps, ps] += J.T @ J
            b[ps] += J.T @ r
            energy += float(r @ r)
    energy += _accumulate_prior(layout, window, H, b)
    return NormalEquations(layout, 0.5 * (H + H.T), b, point_ids, Hpp, bp, C, lambda_lm, energy)


# --------------------------------------------------------------------------
# LM step
# --------------------------------------------------------------------------

class LeastSquaresProblem(Protocol):
    def energy(self) -> float: ...
    def apply(self, dx: np.ndarray, dp: np.ndarray, neq: NormalEquations) -> None: ...
    def snapshot(self): ...
    def restore(self, snap) -> None: ...


class WindowProblem:
    """Adapter exposing a sliding window to the LM loop."""

    def __init__(self, window: SlidingWindow, weights: RobustWeights = RobustWeights(), threads: int = 1):
        self.window, self.weights, self.threads = window, weights, threads

    def energy(self) -> float:
        if any(p.inv_depth <= 0 for p in self.window.non_coplanar_points()):
            return math.inf
        return total_energy(self.window, self.weights, self.threads)

    def linearize(self, damping: float) -> NormalEquations:
        return build_normal_equations(self.window, damping, self.weights, self.threads)

    def apply(self, dx, dp, neq: NormalEquations):
        for key in neq.layout.keys:
            self.window.apply_increment(key, dx[neq.layout.slice(key)])
        for pid, d in zip(neq.point_ids, dp):
            self.window.points[pid].inv_depth += float(d)

    def snapshot(self):
        return self.window.snapshot()

    def restore(self, snap):
        self.window.restore(snap)


@dataclass(frozen=True)
class StepResult:
    accepted: bool
    step_norm: float
    energy: float
    damping: float
    attempts: int


def solve_and_update(problem: LeastSquaresProblem, neq: NormalEquations, max_retries: int = 5) -> StepResult:
    """One LM step: accept iff the energy decreases, else raise damping x10 and retry."""
    damping = neq.damping
    factorized = False
    for attempt in range(max_retries + 1):
        trial = neq.with_damping(damping)
        try:
            dx, dp = trial.solve()
        except FactorizationFailure as e:
            logger.debug("factorization failed (%s), damping %g -> %g", e, damping, damping * 10)
            damping = max(damping * 10, 1e-8)
            continue
        factorized = True
        step_norm = float(math.sqrt(dx @ dx + dp @ dp))
        snap = problem.snapshot()
        problem.apply(dx, dp, neq)
        energy = problem.energy()
        if energy < neq.energy:
            return StepResult(True, step_norm, energy, damping / 2, attempt + 1)
        problem.restore(snap)
        damping = max(damping * 10, 1e-8)
    if not factorized:
        raise FactorizationFailure(f"no factorizable system after {max_retries} damping increases")
    return StepResult(False, 0.0, neq.energy, damping, max_retries + 1)


@dataclass
class OptimizationSummary:
    initial_energy: float
    final_energy: float
    damping: float
    trace: list[dict] = field(default_factory=list)


def optimize(window: SlidingWindow, weights: RobustWeights = RobustWeights(), iterations: int = 6,
             damping: float = 1e-4, max_retries: int = 5, threads: int = 1, trace_start: int = 0) -> OptimizationSummary:
    """Run LM iterations; trace rows are {iter, energy, damping, step_norm, accepted}."""
    problem = WindowProblem(window, weights, threads)
    trace = []
    initial = None
    energy = math.nan
    for it in range(iterations):
        neq = problem.linearize(damping)
        if initial is None:
            initial = neq.energy
            if not math.isfinite(initial):
                raise DivergedOptimization("initial energy is not finite")
        step = solve_and_update(problem, neq, max_retries)
        energy, damping = step.energy, step.damping
        trace.append({"iter": trace_start + it, "energy": energy, "damping": damping,
                      "step_norm": step.step_norm, "accepted": step.accepted})
        logger.debug("LM iter %d: energy %.6g step %.3g damping %.3g %s", it, energy, step.step_norm, damping,
                     "accepted" if step.accepted else "rejected")
        if energy > 10.0 * initial:
            raise DivergedOptimization(f"energy {energy:.6g} exceeds ten times the initial {initial:.6g}")
        if not step.accepted or step.step_norm < 1e-10:
            break
    return OptimizationSummary(initial if initial is not None else 0.0, energy, damping, trace)


def trace_lines(rows: list[dict]) -> str:
    return "".join(json.dumps(r) + "\n" for r in rows)


# --------------------------------------------------------------------------
# Marginalization
# --------------------------------------------------------------------------

def _pinv_psd(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    inv = np.where(w > PSD_TOL * max(1.0, w.max(initial=0.0)), 1.0 / np.where(w > 0, w, 1.0), 0.0)
    return (V * inv) @ V.T


def schur_marginalize(H: np.ndarray, b: np.ndarray, marg_idx) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Eliminate marg_idx: H* = H_kk - H_km H_mm^-1 H_mk, b* = b_k - H_km H_mm^-1 b_m.

    Returns (H*, b*, keep_idx, energy_drop) where energy_drop = b_m^T H_mm^-1 b_m.
    """
    n = len(b)
    marg_idx = np.asarray(sorted(set(int(i) for i in marg_idx)), dtype=int)
    keep_idx = np.setdiff1d(np.arange(n), marg_idx)
    if len(marg_idx) == 0:
        return H.copy(), b.copy(), keep_idx, 0.0
    Hmm = H[np.ix_(marg_idx, marg_idx)]
    Hkm = H[np.ix_(keep_idx, marg_idx)]
    inv = _pinv_psd(Hmm)
    H_star = H[np.ix_(keep_idx, keep_idx)] - Hkm @ inv @ Hkm.T
    b_star = b[keep_idx] - Hkm @ inv @ b[marg_idx]
    drop = float(b[marg_idx] @ inv @ b[marg_idx])
    return 0.5 * (H_star + H_star.T), b_star, keep_idx, drop


def _observer_count(evals: list[PairEvaluation], point_id: int) -> int:
    count = 0
    for ev in evals:
        if ev.plane_id is None and point_id in ev.point_ids:
            if ev.block.kept[ev.point_ids.index(point_id)]:
                count += 1
    return count


def refresh_plane_prior(window: SlidingWindow, plane_id: int, sigma_phi: float, sigma_d: float) -> PlanePriorFactor:
    st = window.planes[plane_id]
    cov = np.diag([sigma_phi**2, sigma_d**2]) if st.dof == 2 else np.array([[sigma_d**2]])
    factor = PlanePriorFactor(plane_id, st.params, max(1, len(st.members)), cov)
    window.plane_priors[plane_id] = factor
    return factor


def marginalize_keyframe(window: SlidingWindow, kf_id: int, weights: RobustWeights = RobustWeights(),
                         plane_prior_sigma: tuple[float, float] | None = (1e-2, 1e-2),
                         threads: int = 1) -> MarginalizationPrior:
    """Remove a keyframe, folding its information into the marginalization prior.

    Free points it hosts are marginalized when at least two remaining keyframes
    observe them, dropped otherwise. Coplanar points it hosts are dropped and their
    plane prior is refreshed at the current estimate (skipped when
    plane_prior_sigma is None).
    """
    kf = window.keyframe(kf_id)
    hosted = window.points_hosted(kf_id)
    free = [p for p in hosted if not p.coplanar]
    coplanar = [p for p in hosted if p.coplanar]

    layout = window.layout()
    n = layout.size
    prior = window.marg_prior

    # linearization point: first estimate where the prior already reaches, current value elsewhere
    lin = {k: prior.linearization.get(k, variable_value(window, k)) for k in layout.keys}
    dx_lin = np.concatenate([tangent_delta(k, variable_value(window, k), lin[k]) for k in layout.keys]) if n else np.zeros(0)

    H, b = np.zeros((n, n)), np.zeros(n)
    energy = 0.0

    # photometric blocks are taken at the linearization point directly
    marg_points = []
    if free:
        sub = _free_point_window(window, free, lin)
        evals = [ev for ev in evaluate_photometric(sub, weights, True, threads) if ev.host_id == kf_id]
        marg_points = [p for p in free if _observer_count(evals, p.id) >= 2]
        keep = {p.id for p in marg_points}
        evals = [_restrict(ev, keep) for ev in evals]
        evals = [ev for ev in evals if ev.point_ids]
        point_index = {p.id: k for k, p in enumerate(marg_points)}
        m = len(marg_points)
        Hpp, bp, C = np.zeros(m), np.zeros(m), np.zeros((m, n))
        energy += _accumulate_photometric(layout, evals, H, b, point_index, Hpp, bp, C)
        inv = np.where(Hpp > 0, 1.0 / np.where(Hpp > 0, Hpp, 1.0), 0.0)
        H -= C.T @ (C * inv[:, None])
        b -= C.T @ (bp * inv)
        energy -= float(bp @ (bp * inv))

    # inertial factors are FEJ-expanded about the current state; move them to the linearization point
    H_in, b_in = np.zeros((n, n)), np.zeros(n)
    energy_in = 0.0
    for (i, j), pre in sorted(window.imu.items()):
        if kf_id in (i, j):
            res = inertial_factor(window, window.keyframe(i), window.keyframe(j), pre)
            energy_in += _accumulate_inertial(layout, i, j, res, H_in, b_in)
    H += H_in
    b += b_in - H_in @ dx_lin
    energy += energy_in - 2.0 * float(b_in @ dx_lin) + float(dx_lin @ H_in @ dx_lin)

    if prior.keys:
        idx = _prior_indices(layout, prior)
        H[np.ix_(idx, idx)] += prior.H
        b[idx] += prior.b
        energy += prior.constant

    marg_idx = np.concatenate([np.arange(layout.slice(k).start, layout.slice(k).stop)
                               for k in (("kf", kf_id), ("body", kf_id))])
    H_star, b_star, keep_idx, drop = schur_marginalize(H, b, marg_idx)

    kept_keys, kept_rows = [], []
    row_of = {int(g): r for r, g in enumerate(keep_idx)}
    for key in layout.keys:
        if key[1] == kf_id and key[0] in ("kf", "body"):
            continue
        sl = layout.slice(key)
        rows = [row_of[g] for g in range(sl.start, sl.stop)]
        if np.any(H_star[rows] != 0) or np.any(b_star[rows] != 0) or prior.connected(key):
            kept_keys.append(key)
            kept_rows.extend(rows)
    kept_rows = np.array(kept_rows, dtype=int)

    new_prior = MarginalizationPrior(
        keys=kept_keys,
        H=H_star[np.ix_(kept_rows, kept_rows)] if len(kept_rows) else np.zeros((0, 0)),
        b=b_star[kept_rows] if len(kept_rows) else np.zeros(0),
        constant=energy - drop,
        linearization={k: lin[k] for k in kept_keys},
    )

    for p in hosted:
        del window.points[p.id]
    if plane_prior_sigma is not None:
        for pid in sorted({p.plane_id for p in coplanar}):
            if pid in window.planes:
                refresh_plane_prior(window, pid, *plane_prior_sigma)
    window.remove_keyframe(kf_id)
    window.marg_prior = new_prior
    logger.info("marginalized keyframe %d: %d points marginalized, %d dropped, prior over %d variables",
                kf.id, len(marg_points), len(hosted) - len(marg_points), len(kept_keys))
    return new_prior


def _free_point_window(window: SlidingWindow, free, lin: dict) -> SlidingWindow:
    """Shallow view of the window holding only the given free points, keyframes moved to `lin`."""
    sub = SlidingWindow(window.max_size, window.gravity)
    sub.keyframes = [_at_linearization(kf, lin[("kf", kf.id)]) for kf in window.keyframes]
    sub.planes = window.planes
    sub.points = {p.id: p for p in free}
    return sub


def _at_linearization(kf: Keyframe, value) -> Keyframe:
    pose, a, b = value
    return replace(kf, pose=pose, a=a, b=b)


def _restrict(ev: PairEvaluation, keep: set[int]) -> PairEvaluation:
    mask = np.array([pid in keep for pid in ev.point_ids], dtype=bool)
    blk = ev.block
    sub = PhotometricBlock(blk.residual[mask], blk.raw[mask], blk.valid[mask], blk.kept[mask], blk.cost[mask],
                           blk.J_h[mask], blk.J_t[mask], blk.J_x[mask])
    return PairEvaluation(ev.host_id, ev.target_id, [p for p, k in zip(ev.point_ids, mask) if k], sub, ev.plane_id)


def gauge_prior(window: SlidingWindow, kf_id: int, sigma_pose: float, sigma_affine: float,
                sigma_body: tuple[float, float, float] = (1.0, 1e-2, 1e-1)) -> MarginalizationPrior:
    """Initial prior fixing the first keyframe's pose and affine brightness, with a weak body prior."""
    info = np.concatenate([
        np.full(6, 1.0 / sigma_pose**2), np.full(2, 1.0 / sigma_affine**2),
        np.repeat([1.0 / s**2 for s in sigma_body], 3),
    ])
    keys: list[VarKey] = [("kf", kf_id), ("body", kf_id)]
    prior = MarginalizationPrior(
        keys=keys, H=np.diag(info), b=np.zeros(len(info)), constant=0.0,
        linearization={k: variable_value(window, k) for k in keys},
    )
    window.marg_prior = prior
    return prior


# --------------------------------------------------------------------------
# Planes
# --------------------------------------------------------------------------

def retire_plane(window: SlidingWindow, plane_id: int, weights: RobustWeights = RobustWeights(),
                 default_sigma: tuple[float, float] = (1e-2, 1e-2), threads: int = 1) -> PlanePriorFactor:
    """Turn an active plane into a plane-distance prior and drop its coplanar points."""
    if plane_id not in window.planes:
        raise InactivePlane(f"plane {plane_id} is not active")
    st = window.planes[plane_id]
    neq = build_normal_equations(window, 0.0, weights, threads)
    H, _ = neq.reduced()
    sl = neq.layout.slice(("plane", plane_id))
    cov = None
    try:
        E = np.zeros((len(H), st.dof))
        E[sl] = np.eye(st.dof)
        block = cho_solve(cho_factor(H), E)[sl]
        block = 0.5 * (block + block.T)
        if np.all(np.isfinite(block)) and np.linalg.eigvalsh(block).min() > 0:
            cov = block
    except LinAlgError:
        pass
    if cov is None:
        sigma_phi, sigma_d = default_sigma
        cov = np.diag([sigma_phi**2, sigma_d**2]) if st.dof == 2 else np.array([[sigma_d**2]])
        logger.debug("plane %d marginal covariance unavailable, using default", plane_id)

    factor = PlanePriorFactor(plane_id, st.params, max(1, len(st.members)), cov)
    window.plane_priors[plane_id] = factor
    removed = [p.id for p in window.coplanar_points(plane_id)]
    for pid in removed:
        del window.points[pid]
    del window.planes[plane_id]
    logger.info("retired plane %d (%s) with %d lifetime members, %d points removed",
                plane_id, st.params, factor.w_n, len(removed))
    return factor


def state_dimension(window: SlidingWindow) -> dict:
    """Optimized variable count, coplanar points excluded."""
    kf = 8 * len(window.keyframes)
    body = 9 * len(window.keyframes)
    points = len(window.non_coplanar_points())
    plane_dof = sum(st.dof for st in window.planes.values())
    return {
        "keyframes": len(window.keyframes),
        "points": points,
        "coplanar_points": len(window.coplanar_points()),
        "planes": len(window.planes),
        "plane_dof": plane_dof,
        "total": kf + body + points + plane_dof,
    }
