"""Sliding-window estimator state: keyframes, points, planes and priors."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from planevio.errors import InactivePlane
from planevio.services.geometry import (
    CameraIntrinsics, MinimalPlane, Pose, VerticalPlane, pose_difference, wrap_angle,
)
from planevio.services.imu import GRAVITY, BodyState, ImuBias, PreintegratedImu

logger = logging.getLogger(__name__)

KF_DIM = 8  # pose 6, affine a, b
BODY_DIM = 9  # velocity, gyro bias, accel bias
PSD_TOL = 1e-10

VarKey = tuple[str, int]


# --------------------------------------------------------------------------
# Images
# --------------------------------------------------------------------------

class IntensityField(Protocol):
    width: int
    height: int

    def sample(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(values (N,), gradients (N, 2), valid (N,)) at subpixel positions."""
        ...


class RasterImage:
    """Bilinear sampling of a float raster, with the exact gradient of the bilinear surface."""

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data, dtype=float)
        self.height, self.width = self.data.shape

    def sample(self, pixels):
        P = np.asarray(pixels, dtype=float).reshape(-1, 2)
        x, y = P[:, 0], P[:, 1]
        valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0) & (x <= self.width - 1) & (y <= self.height - 1)
        xc = np.clip(np.nan_to_num(x), 0, self.width - 1)
        yc = np.clip(np.nan_to_num(y), 0, self.height - 1)
        x0 = np.minimum(np.floor(xc).astype(int), self.width - 2)
        y0 = np.minimum(np.floor(yc).astype(int), self.height - 2)
        fx, fy = xc - x0, yc - y0
        I00 = self.data[y0, x0]
        I10 = self.data[y0, x0 + 1]
        I01 = self.data[y0 + 1, x0]
        I11 = self.data[y0 + 1, x0 + 1]
        values = (1 - fx) * (1 - fy) * I00 + fx * (1 - fy) * I10 + (1 - fx) * fy * I01 + fx * fy * I11
        gx = (1 - fy) * (I10 - I00) + fy * (I11 - I01)
        gy = (1 - fx) * (I01 - I00) + fx * (I11 - I10)
        return values, np.stack([gx, gy], axis=1), valid


class AnalyticImage:
    """Smooth intensity field given in closed form; fn(x, y) -> (value, gx, gy)."""

    def __init__(self, fn: Callable, width: int, height: int):
        self.fn = fn
        self.width, self.height = width, height

    def sample(self, pixels):
        P = np.asarray(pixels, dtype=float).reshape(-1, 2)
        x, y = P[:, 0], P[:, 1]
        valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0) & (x <= self.width - 1) & (y <= self.height - 1)
        v, gx, gy = self.fn(np.nan_to_num(x), np.nan_to_num(y))
        return np.asarray(v, dtype=float), np.stack([gx, gy], axis=1).astype(float), valid


# --------------------------------------------------------------------------
# Window members
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Keyframe:
    id: int
    timestamp: float
    pose: Pose  # body frame in world
    image: IntensityField
    camera: CameraIntrinsics
    exposure: float = 1.0
    a: float = 0.0
    b: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: ImuBias = field(default_factory=lambda: ImuBias(np.zeros(3), np.zeros(3)))
    T_bc: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.exposure <= 0:
            raise ValueError(f"exposure must be positive, got {self.exposure}")
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)

    @property
    def T_wc(self) -> Pose:
        return self.pose @ self.T_bc

    @property
    def body_state(self) -> BodyState:
        return BodyState(self.pose, self.velocity, self.bias)

    def body_vector(self) -> np.ndarray:
        return np.concatenate([self.velocity, self.bias.bg, self.bias.ba])

    def set_body_vector(self, v: np.ndarray):
        self.velocity = np.array(v[0:3], dtype=float)
        self.bias = ImuBias(np.array(v[3:6]), np.array(v[6:9]))


@dataclass(eq=False)
class PointFeature:
    id: int
    host_id: int
    pixel: np.ndarray
    inv_depth: float | None = None
    plane_id: int | None = None
    status: str = "active"  # active | marginalized

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)
        if self.plane_id is None and not (self.inv_depth is not None and self.inv_depth > 0):
            raise ValueError(f"point {self.id}: non-coplanar point needs a positive inverse depth")

    @property
    def coplanar(self) -> bool:
        return self.plane_id is not None

    def bind_to_plane(self, plane_id: int):
        self.plane_id = plane_id
        self.inv_depth = None


@dataclass(eq=False)
class PlaneState:
    params: MinimalPlane
    members: set[int] = field(default_factory=set)  # every landmark ever associated

    @property
    def kind(self) -> str:
        return self.params.kind

    @property
    def dof(self) -> int:
        return self.params.dof


def inverse_sqrt_psd(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V / np.sqrt(w)) @ V.T


@dataclass(eq=False)
class PlanePriorFactor:
    plane_id: int
    prior: MinimalPlane
    w_n: int
    covariance: np.ndarray

    def __post_init__(self):
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if self.w_n < 1:
            raise ValueError("plane prior weight must count at least one point")
        if self.covariance.shape != (self.prior.dof, self.prior.dof):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match plane dof {self.prior.dof}")
        if not np.allclose(self.covariance, self.covariance.T) or np.linalg.eigvalsh(self.covariance).min() <= 0:
            raise ValueError("plane prior covariance must be symmetric positive definite")

    @property
    def kind(self) -> str:
        return self.prior.kind

    @property
    def prior_values(self) -> tuple[float | None, float, float]:
        """(phi', psi', d'); psi' is identically zero for the gravity-aligned planes."""
        phi = self.prior.phi if isinstance(self.prior, VerticalPlane) else None
        return phi, 0.0, self.prior.d

    def whitening(self) -> np.ndarray:
        return math.sqrt(self.w_n) * inverse_sqrt_psd(self.covariance)


def project_psd(H: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w[w < tol] = 0.0
    return (V * w) @ V.T


@dataclass(eq=False)
class MarginalizationPrior:
    """Quadratic prior 2 b^T dx + dx^T H dx + c over variables linearized at fixed values."""

    keys: list[VarKey] = field(default_factory=list)
    H: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    constant: float = 0.0
    linearization: dict[VarKey, object] = field(default_factory=dict)

    def __post_init__(self):
        self.H = project_psd(np.atleast_2d(self.H)) if self.H.size else np.zeros((0, 0))

    @property
    def dim(self) -> int:
        return len(self.b)

    def connected(self, key: VarKey) -> bool:
        return key in self.linearization

    def energy(self, dx: np.ndarray) -> float:
        return float(2.0 * self.b @ dx + dx @ self.H @ dx + self.constant)


# --------------------------------------------------------------------------
# Variable layout and tangent operations
# --------------------------------------------------------------------------

def variable_dim(key: VarKey, window: SlidingWindow) -> int:
    kind, ident = key
    if kind == "kf":
        return KF_DIM
    if kind == "body":
        return BODY_DIM
    return window.planes[ident].dof


class Layout:
    """Offsets of every non-point variable block in the reduced state vector."""

    def __init__(self, keys: list[VarKey], dims: list[int]):
        self.keys = list(keys)
        self.dims = dict(zip(keys, dims))
        self.offsets = {}
        off = 0
        for k, d in zip(keys, dims):
            self.offsets[k] = off
            off += d
        self.size = off

    def slice(self, key: VarKey) -> slice:
        o = self.offsets[key]
        return slice(o, o + self.dims[key])

    def __contains__(self, key):
        return key in self.offsets


def variable_value(window: SlidingWindow, key: VarKey):
    kind, ident = key
    if kind == "kf":
        kf = window.keyframe(ident)
        return (kf.pose, kf.a, kf.b)
    if kind == "body":
        return window.keyframe(ident).body_vector()
    return window.planes[ident].params.params()


def tangent_delta(key: VarKey, value, lin) -> np.ndarray:
    """value minus lin in the tangent space used by the optimizer (left perturbation on poses)."""
    kind = key[0]
    if kind == "kf":
        pose, a, b = value
        pose0, a0, b0 = lin
        return np.concatenate([pose_difference(pose, pose0), [a - a0, b - b0]])
    delta = np.asarray(value, dtype=float) - np.asarray(lin, dtype=float)
    if kind == "plane" and len(delta) == 2:
        delta[0] = wrap_angle(delta[0])
    return delta


# --------------------------------------------------------------------------
# Window
# --------------------------------------------------------------------------

class SlidingWindow:
    def __init__(self, max_size: int = 7, gravity: np.ndarray = GRAVITY):
        self.max_size = max_size
        self.gravity = np.asarray(gravity, dtype=float)
        self.keyframes: list[Keyframe] = []
        self.points: dict[int, PointFeature] = {}
        self.planes: dict[int, PlaneState] = {}
        self.plane_priors: dict[int, PlanePriorFactor] = {}
        self.imu: dict[tuple[int, int], PreintegratedImu] = {}
        self.marg_prior = MarginalizationPrior()

    def __len__(self):
        return len(self.keyframes)

    # keyframes

    def keyframe(self, kf_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.id == kf_id:
                return kf
        raise KeyError(f"keyframe {kf_id} not in window")

    def keyframe_ids(self) -> list[int]:
        return [kf.id for kf in self.keyframes]

    def add_keyframe(self, kf: Keyframe, pre: PreintegratedImu | None = None):
        if self.keyframes and pre is not None:
            self.imu[(self.keyframes[-1].id, kf.id)] = pre
        self.keyframes.append(kf)

    def remove_keyframe(self, kf_id: int):
        self.keyframes = [kf for kf in self.keyframes if kf.id != kf_id]
        self.imu = {k: v for k, v in self.imu.items() if kf_id not in k}

    # points and planes

    def add_point(self, pt: PointFeature):
        self.points[pt.id] = pt

    def active_points(self) -> list[PointFeature]:
        return [p for p in self.points.values() if p.status == "active"]

    def non_coplanar_points(self) -> list[PointFeature]:
        return [p for p in self.active_points() if not p.coplanar]

    def coplanar_points(self, plane_id: int | None = None) -> list[PointFeature]:
        return [p for p in self.active_points() if p.coplanar and (plane_id is None or p.plane_id == plane_id)]

    def points_hosted(self, kf_id: int) -> list[PointFeature]:
        return [p for p in self.active_points() if p.host_id == kf_id]

    def targets_of(self, pt: PointFeature) -> list[Keyframe]:
        return [kf for kf in self.keyframes if kf.id != pt.host_id]

    def plane(self, plane_id: int) -> PlaneState:
        if plane_id not in self.planes:
            raise InactivePlane(f"plane {plane_id} is not active in the window")
        return self.planes[plane_id]

    # layout and state

    def layout(self) -> Layout:
        keys: list[VarKey] = [("kf", kf.id) for kf in self.keyframes]
        keys += [("body", kf.id) for kf in self.keyframes]
        keys += [("plane", pid) for pid in sorted(self.planes)]
        return Layout(keys, [variable_dim(k, self) for k in keys])

    def apply_increment(self, key: VarKey, dx: np.ndarray):
        kind, ident = key
        if kind == "kf":
            kf = self.keyframe(ident)
            kf.pose = kf.pose.retract(dx[:6])
            kf.a += float(dx[6])
            kf.b += float(dx[7])
        elif kind == "body":
            kf = self.keyframe(ident)
            kf.set_body_vector(kf.body_vector() + dx)
        else:
            st = self.planes[ident]
            st.params = st.params.with_params(st.params.params() + dx)

    def snapshot(self) -> dict:
        return {
            "kf": {kf.id: (kf.pose, kf.a, kf.b, kf.velocity.copy(), kf.bias) for kf in self.keyframes},
            "points": {pid: p.inv_depth for pid, p in self.points.items()},
            "planes": {pid: st.params for pid, st in self.planes.items()},
        }

    def restore(self, snap: dict):
        for kf in self.keyframes:
            kf.pose, kf.a, kf.b, v, kf.bias = snap["kf"][kf.id]
            kf.velocity = v.copy()
        for pid, d in snap["points"].items():
            if pid in self.points:
                self.points[pid].inv_depth = d
        for pid, params in snap["planes"].items():
            if pid in self.planes:
                self.planes[pid].params = params

    def copy(self) -> SlidingWindow:
        return copy.deepcopy(self)

    def check_invariants(self):
        ids = set(self.keyframe_ids())
        if len(self.keyframes) > self.max_size:
            raise AssertionError(f"window holds {len(self.keyframes)} keyframes, max {self.max_size}")
        for p in self.active_points():
            if p.host_id not in ids:
                raise AssertionError(f"point {p.id} hosted by keyframe {p.host_id} outside the window")
            if p.coplanar and p.plane_id not in self.planes:
                raise AssertionError(f"point {p.id} bound to inactive plane {p.plane_id}")
