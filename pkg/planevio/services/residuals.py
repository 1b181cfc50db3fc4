"""Photometric residuals for free and coplanar points, robust weighting, plane priors, total energy.

Residual of one pattern pixel, host h to target t:

    r = (I_t[p'] - b_t) - k (I_h[p] - b_h),   k = t_t e^{a_t} / (t_h e^{a_h})

whitened by sqrt(w_p * huber_weight) / sigma_ph. Pose Jacobians are taken with
respect to a left perturbation of the body pose, which equals a left perturbation
of the camera pose since the mount is fixed.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from planevio.errors import BehindCamera, KindMismatch, OutOfBounds
from planevio.services.geometry import (
    MIN_DEPTH, PARALLEL_EPS, MinimalPlane, backproject, depth_from_plane, plane_world_to_camera, project_many,
    skew_many, wrap_angle,
)
from planevio.services.linearization import inertial_factors, prior_delta
from planevio.state import Keyframe, PlanePriorFactor, PointFeature, SlidingWindow

logger = logging.getLogger(__name__)

# residual pattern, offsets in pixels
PATTERN = np.array([[0, -2], [-1, -1], [1, -1], [-2, 0], [0, 0], [2, 0], [-1, 1], [0, 2]], dtype=float)
MIN_VALID = 5


@dataclass(frozen=True)
class RobustWeights:
    huber_gamma: float = 9.0
    grad_const: float = 50.0
    photometric_sigma: float = 11.0

    def __post_init__(self):
        for name in ("huber_gamma", "grad_const", "photometric_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def lam(self) -> float:
        return 1.0 / self.photometric_sigma**2

    @classmethod
    def from_config(cls, est) -> RobustWeights:
        return cls(est.huber_gamma, est.grad_const, est.photometric_sigma)


def huber(r, gamma: float):
    """(cost, IRLS weight); quadratic inside gamma, linear outside."""
    a = np.abs(r)
    inside = a <= gamma
    cost = np.where(inside, a * a, gamma * (2.0 * a - gamma))
    weight = np.where(inside, 1.0, gamma / np.maximum(a, 1e-300))
    if np.ndim(r) == 0:
        return float(cost), float(weight)
    return cost, weight


def gradient_weight(grad, c: float):
    g2 = np.sum(np.square(grad), axis=-1)
    return c * c / (c * c + g2)


# --------------------------------------------------------------------------
# Vectorized evaluation
# --------------------------------------------------------------------------

@dataclass(eq=False)
class PhotometricBlock:
    """Residuals of N points x 8 pattern pixels between one host and one target."""

    residual: np.ndarray  # (N, 8) whitened
    raw: np.ndarray  # (N, 8)
    valid: np.ndarray  # (N, 8)
    kept: np.ndarray  # (N,)
    cost: np.ndarray  # (N,) lambda-weighted robust cost over valid sub-residuals
    J_h: np.ndarray | None = None  # (N, 8, 8)
    J_t: np.ndarray | None = None  # (N, 8, 8)
    J_x: np.ndarray | None = None  # (N, 8, k): inverse depth (k=1) or plane params (k=dof)


def _pose_block(X_w: np.ndarray) -> np.ndarray:
    """[I, -[X]x] for each point, shape (..., 3, 6)."""
    shape = X_w.shape[:-1]
    A = np.zeros(shape + (3, 6))
    A[..., :, :3] = np.eye(3)
    A[..., :, 3:] = -skew_many(X_w.reshape(-1, 3)).reshape(shape + (3, 3))
    return A


def _photometric(host: Keyframe, target: Keyframe, Q: np.ndarray, X_w: np.ndarray, geo_ok: np.ndarray,
                 weights: RobustWeights, with_jacobians: bool):
    """Shared part of both residual kinds. Returns the block and dr/dX_w-side pieces."""
    N = Q.shape[0]
    T_wt = target.T_wc
    X_t = (X_w - T_wt.t) @ T_wt.R
    z_ok = X_t[..., 2] > MIN_DEPTH
    X_safe = np.where(z_ok[..., None], X_t, np.array([0.0, 0.0, 1.0]))
    uv, J_proj = project_many(target.camera, X_safe.reshape(-1, 3), with_jacobian=True)

    I_t, g_t, ok_t = target.image.sample(uv)
    I_h, g_h, ok_h = host.image.sample(Q.reshape(-1, 2))
    I_t, I_h = I_t.reshape(N, 8), I_h.reshape(N, 8)
    g_t, g_h = g_t.reshape(N, 8, 2), g_h.reshape(N, 8, 2)

    valid = geo_ok & z_ok & ok_t.reshape(N, 8) & ok_h.reshape(N, 8)
    kept = valid.sum(axis=1) >= MIN_VALID
    valid &= kept[:, None]

    k = (target.exposure * math.exp(target.a)) / (host.exposure * math.exp(host.a))
    raw = np.where(valid, (I_t - target.b) - k * (I_h - host.b), 0.0)
    w_p = gradient_weight(g_h, weights.grad_const)
    e = np.sqrt(w_p) * raw
    cost, hw = huber(e, weights.huber_gamma)
    scale = np.where(valid, np.sqrt(weights.lam * hw * w_p), 0.0)
    total = weights.lam * np.where(valid, cost, 0.0).sum(axis=1)

    block = PhotometricBlock(residual=scale * raw, raw=raw, valid=valid, kept=kept, cost=total)
    if not with_jacobians:
        return block, None

    dr_dXt = np.einsum("nki,nkij->nkj", g_t, J_proj.reshape(N, 8, 2, 3))  # (N, 8, 3)
    dr_dXw = dr_dXt @ T_wt.R.T  # world-frame direction, (N, 8, 3)
    A = _pose_block(X_w)
    J_t = np.zeros((N, 8, 8))
    J_t[..., :6] = -np.einsum("nki,nkij->nkj", dr_dXw, A)
    J_t[..., 6] = -k * (I_h - host.b)
    J_t[..., 7] = -1.0
    J_h = np.zeros((N, 8, 8))
    J_h[..., 6] = k * (I_h - host.b)
    J_h[..., 7] = k
    block.J_t = J_t * scale[..., None]
    block.J_h = J_h  # pose columns and scaling finished by the caller
    return block, (dr_dXw, A, scale)


def _zero_invalid(block: PhotometricBlock) -> PhotometricBlock:
    """Zero the Jacobian rows of invalid sub-residuals (they may hold inf or nan)."""
    m = block.valid[..., None]
    block.J_h = np.where(m, block.J_h, 0.0)
    block.J_t = np.where(m, block.J_t, 0.0)
    block.J_x = np.where(m, block.J_x, 0.0)
    return block


def pattern_pixels(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=float).reshape(-1, 1, 2) + PATTERN[None, :, :]


def evaluate_points(host: Keyframe, target: Keyframe, pixels: np.ndarray, inv_depths: np.ndarray,
                    weights: RobustWeights, with_jacobians: bool = True) -> PhotometricBlock:
    """Free points: all pattern pixels share the point's inverse depth in the host."""
    Q = pattern_pixels(pixels)
    N = Q.shape[0]
    rho = np.asarray(inv_depths, dtype=float).reshape(N, 1)
    T_wh = host.T_wc
    rays = host.camera.rays(Q.reshape(-1, 2)).reshape(N, 8, 3)
    r_w = rays @ T_wh.R.T
    X_w = T_wh.t + r_w / rho[..., None]
    geo_ok = np.broadcast_to(rho > 0, (N, 8))

    block, parts = _photometric(host, target, Q, X_w, geo_ok, weights, with_jacobians)
    if parts is None:
        return block
    dr_dXw, A, scale = parts
    block.J_h[..., :6] = np.einsum("nki,nkij->nkj", dr_dXw, A)
    block.J_h *= scale[..., None]
    block.J_x = (np.einsum("nki,nki->nk", dr_dXw, -r_w / rho[..., None] ** 2) * scale)[..., None]
    return _zero_invalid(block)


def evaluate_coplanar(host: Keyframe, target: Keyframe, pixels: np.ndarray, plane: MinimalPlane,
                      weights: RobustWeights, with_jacobians: bool = True) -> PhotometricBlock:
    """Coplanar points: every pattern pixel takes its depth from the plane, no per-point state."""
    Q = pattern_pixels(pixels)
    N = Q.shape[0]
    g = plane.to_general()
    T_wh = host.T_wc
    rays = host.camera.rays(Q.reshape(-1, 2)).reshape(N, 8, 3)
    r_w = rays @ T_wh.R.T
    denom = r_w @ g.n
    parallel = np.abs(denom) <= PARALLEL_EPS
    safe = np.where(parallel, 1.0, denom)
    s = -(g.n @ T_wh.t + g.d) / safe
    geo_ok = ~parallel & (s > MIN_DEPTH)
    X_w = T_wh.t + s[..., None] * r_w

    block, parts = _photometric(host, target, Q, X_w, geo_ok, weights, with_jacobians)
    if parts is None:
        return block
    dr_dXw, A, scale = parts
    # X_w moves along the ray to stay on the plane: P = I - r n^T / (n . r)
    P = np.eye(3) - np.einsum("nki,j->nkij", r_w, g.n) / safe[..., None, None]
    block.J_h[..., :6] = np.einsum("nki,nkij,nkjl->nkl", dr_dXw, P, A)
    block.J_h *= scale[..., None]

    dX_dd = -r_w / safe[..., None]
    dn = plane.normal_derivatives()  # (3, dof)
    J_x = np.zeros((N, 8, plane.dof))
    for c in range(plane.dof):
        if c == plane.dof - 1:
            dX = dX_dd
        else:
            dX = -r_w * ((X_w @ dn[:, c]) / safe)[..., None]
        J_x[..., c] = np.einsum("nki,nki->nk", dr_dXw, dX)
    block.J_x = J_x * scale[..., None]
    return _zero_invalid(block)


# --------------------------------------------------------------------------
# Single-point operations
# --------------------------------------------------------------------------

@dataclass(eq=False)
class PhotometricResidual:
    residual: np.ndarray  # (8,)
    valid: np.ndarray  # (8,)
    cost: float
    J_h: np.ndarray  # (8, 8)
    J_t: np.ndarray  # (8, 8)
    J_x: np.ndarray  # (8, 1) or (8, dof)


def _single(block: PhotometricBlock) -> PhotometricResidual:
    if not block.kept[0]:
        raise OutOfBounds(f"only {int(block.valid[0].sum())} of 8 pattern pixels are observable")
    return PhotometricResidual(block.residual[0], block.valid[0], float(block.cost[0]),
                               block.J_h[0], block.J_t[0], block.J_x[0])


def photometric_point_residual(host: Keyframe, target: Keyframe, pt: PointFeature, d_p: float,
                               weights: RobustWeights = RobustWeights()) -> PhotometricResidual:
    X_h = backproject(host.camera, pt.pixel, d_p)
    T_th = target.T_wc.inverse() @ host.T_wc
    if T_th.apply(X_h)[2] <= MIN_DEPTH:
        raise BehindCamera(f"point {pt.id} is behind target keyframe {target.id}")
    return _single(evaluate_points(host, target, pt.pixel[None], np.array([d_p]), weights))


def photometric_coplanar_residual(host: Keyframe, target: Keyframe, pt: PointFeature, plane: MinimalPlane,
                                  weights: RobustWeights = RobustWeights()) -> PhotometricResidual:
    pi_h = plane_world_to_camera(plane.to_general(), host.T_wc.inverse())
    z = depth_from_plane(pt.pixel, pi_h, host.camera)
    X_h = host.camera.rays(pt.pixel)[0] * z
    T_th = target.T_wc.inverse() @ host.T_wc
    if T_th.apply(X_h)[2] <= MIN_DEPTH:
        raise BehindCamera(f"coplanar point {pt.id} is behind target keyframe {target.id}")
    return _single(evaluate_coplanar(host, target, pt.pixel[None], plane, weights))


def plane_prior_residual(plane: MinimalPlane, prior: PlanePriorFactor) -> tuple[np.ndarray, np.ndarray]:
    """sqrt(w_n) Sigma^-1/2 (prior - current) and its Jacobian with respect to the plane params."""
    if plane.kind != prior.kind:
        raise KindMismatch(f"{plane.kind} plane against a {prior.kind} prior")
    diff = prior.prior.params() - plane.params()
    if plane.kind == "vertical":
        diff[0] = wrap_angle(diff[0])
    W = prior.whitening()
    return W @ diff, -W


# --------------------------------------------------------------------------
# Window energy
# --------------------------------------------------------------------------

@dataclass(eq=False)
class PairEvaluation:
    host_id: int
    target_id: int
    point_ids: list[int]
    block: PhotometricBlock
    plane_id: int | None = None  # set for coplanar groups


def _pair_jobs(window: SlidingWindow):
    jobs = []
    for host in window.keyframes:
        hosted = window.points_hosted(host.id)
        free = [p for p in hosted if not p.coplanar]
        by_plane: dict[int, list[PointFeature]] = {}
        for p in hosted:
            if p.coplanar:
                by_plane.setdefault(p.plane_id, []).append(p)
        for target in window.keyframes:
            if target.id == host.id:
                continue
            if free:
                jobs.append((host, target, None, free))
            for pid in sorted(by_plane):
                jobs.append((host, target, pid, by_plane[pid]))
    return jobs


def evaluate_photometric(window: SlidingWindow, weights: RobustWeights, with_jacobians: bool = True,
                         threads: int = 1) -> list[PairEvaluation]:
    """All (host, target) photometric groups, in a fixed order regardless of thread count."""
    def run(job):
        host, target, pid, pts = job
        pixels = np.array([p.pixel for p in pts])
        if pid is None:
            block = evaluate_points(host, target, pixels, np.array([p.inv_depth for p in pts]), weights, with_jacobians)
        else:
            block = evaluate_coplanar(host, target, pixels, window.planes[pid].params, weights, with_jacobians)
        return PairEvaluation(host.id, target.id, [p.id for p in pts], block, pid)

    jobs = _pair_jobs(window)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


def energy_terms(window: SlidingWindow, weights: RobustWeights, threads: int = 1) -> dict[str, float]:
    terms = {"point": 0.0, "plane": 0.0, "inertial": 0.0, "plane_prior": 0.0, "marginalization": 0.0}
    for ev in evaluate_photometric(window, weights, with_jacobians=False, threads=threads):
        terms["point" if ev.plane_id is None else "plane"] += float(ev.block.cost.sum())
    for _, _, res in inertial_factors(window):
        terms["inertial"] += res.cost()
    for pid, prior in window.plane_priors.items():
        if pid in window.planes:
            r, _ = plane_prior_residual(window.planes[pid].params, prior)
            terms["plane_prior"] += float(r @ r)
    if window.marg_prior.keys:
        terms["marginalization"] = window.marg_prior.energy(prior_delta(window, window.marg_prior))
    return terms


def total_energy(window: SlidingWindow, weights: RobustWeights = RobustWeights(), threads: int = 1) -> float:
    """lambda E_point + lambda E_plane + E_inertial + E_prior (lambda folded into photometric costs)."""
    return float(sum(energy_terms(window, weights, threads).values()))
