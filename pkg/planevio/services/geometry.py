"""SE(3) and pinhole kernels, plane parameterizations, point/plane transfer.

Conventions:
    - Pose T_ab maps points from frame b to frame a: X_a = R X_b + t.
    - Tangent vectors are xi = (rho, phi): translation part first, rotation part last.
    - Retraction is on the left: T <- Exp(xi) * T.
    - Planes satisfy n . X + d = 0, so d is the negated signed distance of the
      origin along n and |d| is the distance from the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from planevio.errors import (
    BehindCamera,
    InvalidIntrinsics,
    NegativeDepth,
    NonPositiveDepth,
    NonPositiveInverseDepth,
    RayParallelToPlane,
)

SMALL_ANGLE = 1e-8
MIN_DEPTH = 1e-9
PARALLEL_EPS = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_many(v: np.ndarray) -> np.ndarray:
    """Stacked skew matrices for an (N, 3) array."""
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return -((-a + math.pi) % (2.0 * math.pi) - math.pi)


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    A, B, _ = _rodrigues_coeffs(float(np.linalg.norm(phi)))
    K = skew(phi)
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def left_jacobian(phi: np.ndarray) -> np.ndarray:
    _, B, C = _rodrigues_coeffs(float(np.linalg.norm(phi)))
    K = skew(phi)
    return np.eye(3) + B * K + C * (K @ K)


def left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0
    else:
        half = 0.5 * theta
        coeff = (1.0 - half / math.tan(half)) / theta**2
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    return left_jacobian(-np.asarray(phi, dtype=float))


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return left_jacobian_inv(-np.asarray(phi, dtype=float))


@dataclass(frozen=True, eq=False)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        return cls(T[:3, :3], T[:3, 3]).normalized()

    @classmethod
    def from_quaternion(cls, q_xyzw, t) -> Pose:
        return cls(Rotation.from_quat(q_xyzw).as_matrix(), t)

    def quaternion(self) -> np.ndarray:
        """(qx, qy, qz, qw) with qw >= 0."""
        q = Rotation.from_matrix(self.R).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3], T[:3, 3] = self.R, self.t
        return T

    def normalized(self) -> Pose:
        U, _, Vt = np.linalg.svd(self.R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return Pose(R, self.t)

    def inverse(self) -> Pose:
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: Pose) -> Pose:
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def compose(self, other: Pose) -> Pose:
        return self @ other

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def log(self) -> np.ndarray:
        return se3_log(self)

    def retract(self, xi: np.ndarray) -> Pose:
        return se3_exp(xi) @ self

    def adjoint(self) -> np.ndarray:
        """Ad_T for xi = (rho, phi)."""
        Ad = np.zeros((6, 6))
        Ad[:3, :3] = self.R
        Ad[:3, 3:] = skew(self.t) @ self.R
        Ad[3:, 3:] = self.R
        return Ad

    def __repr__(self):
        return f"Pose(t={np.round(self.t, 6).tolist()}, rotvec={np.round(so3_log(self.R), 6).tolist()})"


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), left_jacobian(phi) @ rho)


def se3_log(T: Pose) -> np.ndarray:
    phi = so3_log(T.R)
    return np.concatenate([left_jacobian_inv(phi) @ T.t, phi])


def pose_difference(a: Pose, b: Pose) -> np.ndarray:
    """Left-tangent difference a [-] b = Log(a * b^-1)."""
    return se3_log(a @ b.inverse())


# --------------------------------------------------------------------------
# Camera
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidIntrinsics(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidIntrinsics(f"image size must be positive: {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise InvalidIntrinsics(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self, pixels: np.ndarray) -> np.ndarray:
        """Unit-depth rays Pi^-1(p, 1) for an (N, 2) array."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        return np.column_stack([
            (pixels[:, 0] - self.cx) / self.fx,
            (pixels[:, 1] - self.cy) / self.fy,
            np.ones(len(pixels)),
        ])

    def in_image(self, pixels: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pixels = np.atleast_2d(pixels)
        return (
            (pixels[:, 0] >= margin) & (pixels[:, 0] <= self.width - 1 - margin)
            & (pixels[:, 1] >= margin) & (pixels[:, 1] <= self.height - 1 - margin)
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def project_many(cam: CameraIntrinsics, X: np.ndarray, with_jacobian: bool = False):
    """Project (N, 3) camera-frame points; no depth check. Optional (N, 2, 3) Jacobian."""
    X = np.atleast_2d(X)
    iz = 1.0 / X[:, 2]
    u = cam.fx * X[:, 0] * iz + cam.cx
    v = cam.fy * X[:, 1] * iz + cam.cy
    pix = np.column_stack([u, v])
    if not with_jacobian:
        return pix
    J = np.zeros((len(X), 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * X[:, 0] * iz * iz
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * X[:, 1] * iz * iz
    return pix, J


def project(cam: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        if X[2] <= MIN_DEPTH:
            raise NonPositiveDepth(f"point depth {X[2]} is not positive")
        return project_many(cam, X[None])[0]
    if np.any(X[:, 2] <= MIN_DEPTH):
        raise NonPositiveDepth("at least one point has non-positive depth")
    return project_many(cam, X)


def backproject(cam: CameraIntrinsics, p: np.ndarray, inv_depth: float) -> np.ndarray:
    if inv_depth <= 0:
        raise NonPositiveInverseDepth(f"inverse depth {inv_depth} is not positive")
    return cam.rays(p)[0] / inv_depth


class TransferResult(NamedTuple):
    pixel: np.ndarray
    depth: float
    in_image: bool


def transfer_point(p: np.ndarray, inv_depth: float, T_th: Pose, cam: CameraIntrinsics) -> TransferResult:
    """p' = Pi(R_th Pi^-1(p, d_p) + t_th); out-of-image is a flag, not an error."""
    X_t = T_th.apply(backproject(cam, p, inv_depth))
    if X_t[2] <= MIN_DEPTH:
        raise BehindCamera(f"transferred depth {X_t[2]} is not positive")
    pix = project_many(cam, X_t[None])[0]
    return TransferResult(pix, float(X_t[2]), bool(cam.in_image(pix)[0]))


# --------------------------------------------------------------------------
# Planes
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GeneralPlane:
    n: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"plane normal must be unit length, got |n|={np.linalg.norm(n)}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "d", float(self.d))

    @classmethod
    def from_homogeneous(cls, pi: np.ndarray) -> GeneralPlane:
        scale = np.linalg.norm(pi[:3])
        return cls(pi[:3] / scale, pi[3] / scale)

    def homogeneous(self) -> np.ndarray:
        return np.append(self.n, self.d)

    def incidence(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.n + self.d


@dataclass(frozen=True)
class HorizontalPlane:
    d: float

    kind = "horizontal"
    dof = 1

    @property
    def normal(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    def params(self) -> np.ndarray:
        return np.array([self.d])

    def with_params(self, params: np.ndarray) -> HorizontalPlane:
        return HorizontalPlane(float(params[0]))

    def to_general(self) -> GeneralPlane:
        return horizontal_plane_to_general(self)

    def normal_derivatives(self) -> np.ndarray:
        """d n / d params, shape (3, dof)."""
        return np.zeros((3, 1))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "phi": None, "d": self.d}


@dataclass(frozen=True)
class VerticalPlane:
    phi: float
    d: float

    kind = "vertical"
    dof = 2

    def __post_init__(self):
        object.__setattr__(self, "phi", wrap_angle(float(self.phi)))

    @property
    def normal(self) -> np.ndarray:
        return np.array([math.cos(self.phi), math.sin(self.phi), 0.0])

    def params(self) -> np.ndarray:
        return np.array([self.phi, self.d])

    def with_params(self, params: np.ndarray) -> VerticalPlane:
        return VerticalPlane(float(params[0]), float(params[1]))

    def to_general(self) -> GeneralPlane:
        return vertical_plane_to_general(self)

    def normal_derivatives(self) -> np.ndarray:
        return np.array([[-math.sin(self.phi), 0.0], [math.cos(self.phi), 0.0], [0.0, 0.0]])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "phi": self.phi, "d": self.d}


MinimalPlane = HorizontalPlane | VerticalPlane


def vertical_plane_to_general(vp: VerticalPlane) -> GeneralPlane:
    psi = 0.0
    n = np.array([math.cos(psi) * math.cos(vp.phi), math.cos(psi) * math.sin(vp.phi), math.sin(psi)])
    return GeneralPlane(n, vp.d)


def horizontal_plane_to_general(hp: HorizontalPlane) -> GeneralPlane:
    return GeneralPlane(np.array([0.0, 0.0, 1.0]), hp.d)


def plane_world_to_camera(pi_w: GeneralPlane, T_cw: Pose) -> GeneralPlane:
    """pi_c = T_cw^-T pi_w, renormalized to a unit normal."""
    T_wc = T_cw.inverse()
    pi_c = T_wc.matrix().T @ pi_w.homogeneous()
    return GeneralPlane.from_homogeneous(pi_c)


def depth_from_plane(p: np.ndarray, pi_c: GeneralPlane, cam: CameraIntrinsics) -> float:
    """Solve z * n_c . Pi^-1(p, 1) + d_c = 0 for the depth z."""
    ray = cam.rays(p)[0]
    denom = float(pi_c.n @ ray)
    if abs(denom) <= PARALLEL_EPS:
        raise RayParallelToPlane(f"ray through {np.asarray(p).tolist()} is parallel to the plane")
    z = -pi_c.d / denom
    if z <= 0:
        raise NegativeDepth(f"plane intersects the ray behind the camera (z={z})")
    return z


def transfer_coplanar_point(
    p: np.ndarray, pi_w: GeneralPlane, T_wh: Pose, T_wt: Pose, cam: CameraIntrinsics,
) -> TransferResult:
    pi_h = plane_world_to_camera(pi_w, T_wh.inverse())
    z = depth_from_plane(p, pi_h, cam)
    return transfer_point(p, 1.0 / z, T_wt.inverse() @ T_wh, cam)
