"""Synthetic world: textured planar scenes, analytic trajectories, renders and IMU streams.

Every quantity here is ground truth for the estimator tests. Textures are sums of
products of sines so that images are smooth everywhere on a plane; trajectories
are closed-form so gyro and accelerometer readings have exact derivatives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from planevio.config import CameraSection, ExperimentConfig, SceneSection, TrajectorySection
from planevio.errors import NoVisibleGeometry
from planevio.services.geometry import (
    MIN_DEPTH, PARALLEL_EPS, CameraIntrinsics, HorizontalPlane, MinimalPlane, Pose,
    VerticalPlane, so3_exp,
)
from planevio.services.imu import GRAVITY, BodyState, ImuBias, ImuNoise, ImuSample
from planevio.state import AnalyticImage, RasterImage, SlidingWindow

logger = logging.getLogger(__name__)

TEXTURE_TERMS = 6
TEXTURE_MEAN = 128.0
TEXTURE_AMPLITUDE = 110.0  # sum of the term amplitudes
TEXTURE_FREQ = (6.0, 24.0)  # rad/m

AFFINE_A_AMPLITUDE = 0.03
AFFINE_B_AMPLITUDE = 1.5

SELECT_MARGIN = 4
NEIGHBORHOOD = 5

# camera x right, y down, z forward; body x right, y forward, z up
CAMERA_MOUNT = Pose(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]), np.zeros(3))


# --------------------------------------------------------------------------
# Scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Texture:
    """I(u, v) = 128 + sum_k A_k sin(w_k u + r_k) sin(n_k v + s_k)."""

    amplitudes: np.ndarray
    omega: np.ndarray
    rho: np.ndarray
    nu: np.ndarray
    varsigma: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, terms: int = TEXTURE_TERMS) -> Texture:
        w = rng.uniform(0.5, 1.5, terms)
        return cls(
            amplitudes=TEXTURE_AMPLITUDE * w / w.sum(),
            omega=rng.uniform(*TEXTURE_FREQ, terms),
            rho=rng.uniform(0.0, 2.0 * math.pi, terms),
            nu=rng.uniform(*TEXTURE_FREQ, terms),
            varsigma=rng.uniform(0.0, 2.0 * math.pi, terms),
        )

    def evaluate(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Intensity and its (u, v) partial derivatives."""
        u = np.asarray(u, dtype=float)[..., None]
        v = np.asarray(v, dtype=float)[..., None]
        su, cu = np.sin(self.omega * u + self.rho), np.cos(self.omega * u + self.rho)
        sv, cv = np.sin(self.nu * v + self.varsigma), np.cos(self.nu * v + self.varsigma)
        value = TEXTURE_MEAN + np.sum(self.amplitudes * su * sv, axis=-1)
        du = np.sum(self.amplitudes * self.omega * cu * sv, axis=-1)
        dv = np.sum(self.amplitudes * self.nu * su * cv, axis=-1)
        return value, du, dv


@dataclass(frozen=True, eq=False)
class ScenePlane:
    id: int
    plane: MinimalPlane
    texture: Texture
    u_range: tuple[float, float]
    v_range: tuple[float, float]

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane texture axes (e_u, e_v): u = e_u . X, v = e_v . X."""
        if self.plane.kind == "horizontal":
            return np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
        n = self.plane.normal
        return np.array([-n[1], n[0], 0.0]), np.array([0.0, 0.0, 1.0])

    def coords(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        e_u, e_v = self.axes()
        return X @ e_u, X @ e_v

    def contains(self, X: np.ndarray) -> np.ndarray:
        u, v = self.coords(X)
        return (
            (u >= self.u_range[0]) & (u <= self.u_range[1])
            & (v >= self.v_range[0]) & (v <= self.v_range[1])
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id, **self.plane.to_dict(),
            "u_range": list(self.u_range), "v_range": list(self.v_range),
        }


@dataclass(frozen=True, eq=False)
class SceneSpec:
    name: str
    planes: list[ScenePlane] = field(default_factory=list)

    def plane(self, plane_id: int) -> ScenePlane:
        for p in self.planes:
            if p.id == plane_id:
                return p
        raise KeyError(f"scene has no plane {plane_id}")

    def to_dict(self) -> dict:
        return {"name": self.name, "planes": [p.to_dict() for p in self.planes]}

    @classmethod
    def from_config(cls, sec: SceneSection) -> SceneSpec:
        """Build one of the named scenes. Plane ids follow list order, floor first."""
        h = sec.floor_height
        top = h + sec.wall_height
        near = -5.0
        if sec.name == "floor":
            geometry = [(HorizontalPlane(-h), (-20.0, 20.0), (near, sec.length))]
        elif sec.name == "corridor":
            geometry = [
                (HorizontalPlane(-h), (-sec.wall_x, sec.wall_x), (near, sec.length)),
                (VerticalPlane(0.0, -sec.wall_x), (near, sec.length), (h, top)),
                (VerticalPlane(0.0, sec.wall_x), (near, sec.length), (h, top)),
            ]
        else:
            # side wall at x = wall_x, end wall at y = corner_y; axes of the end wall run along -x
            geometry = [
                (HorizontalPlane(-h), (-20.0, sec.wall_x), (near, sec.corner_y)),
                (VerticalPlane(0.0, -sec.wall_x), (near, sec.corner_y), (h, top)),
                (VerticalPlane(math.pi / 2, -sec.corner_y), (-sec.wall_x, 20.0), (h, top)),
            ]
        planes = []
        for pid, (plane, u_range, v_range) in enumerate(geometry):
            rng = np.random.default_rng([sec.texture_seed, pid])
            planes.append(ScenePlane(pid, plane, Texture.random(rng), u_range, v_range))
        return cls(sec.name, planes)


def camera_from_config(sec: CameraSection) -> CameraIntrinsics:
    return CameraIntrinsics(sec.fx, sec.fy, sec.cx, sec.cy, sec.width, sec.height)


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def _pixel_grid(cam: CameraIntrinsics) -> np.ndarray:
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    return np.column_stack([xs.ravel(), ys.ravel()]).astype(float)


def intersect_scene(scene: SceneSpec, origin: np.ndarray, rays_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest ray-plane hit per ray. Rays are scaled so that s is the camera depth.

    Returns (s, plane id) with s = inf and id = -1 where every plane is missed.
    """
    best = np.full(len(rays_w), np.inf)
    ids = np.full(len(rays_w), -1, dtype=int)
    for sp in scene.planes:
        g = sp.plane.to_general()
        denom = rays_w @ g.n
        ok = np.abs(denom) > PARALLEL_EPS
        s = np.full(len(rays_w), np.inf)
        s[ok] = -(g.n @ origin + g.d) / denom[ok]
        hit = ok & (s > MIN_DEPTH)
        X = origin + np.where(hit, s, 0.0)[:, None] * rays_w
        hit &= sp.contains(X) & (s < best)
        best = np.where(hit, s, best)
        ids = np.where(hit, sp.id, ids)
    return best, ids


def _radiance(scene: SceneSpec, X: np.ndarray, ids: np.ndarray) -> np.ndarray:
    out = np.zeros(len(X))
    for sp in scene.planes:
        m = ids == sp.id
        if np.any(m):
            u, v = sp.coords(X[m])
            out[m] = sp.texture.evaluate(u, v)[0]
    return out


@dataclass(eq=False)
class RenderedKeyframe:
    image: np.ndarray  # (h, w) intensities
    depth: np.ndarray  # (h, w), inf where nothing is visible
    plane_id: np.ndarray  # (h, w), -1 where nothing is visible
    T_wc: Pose
    exposure: float = 1.0
    a: float = 0.0
    b: float = 0.0

    def raster(self) -> RasterImage:
        return RasterImage(self.image)

    def depth_at(self, pixels: np.ndarray) -> np.ndarray:
        P = np.rint(np.atleast_2d(pixels)).astype(int)
        return self.depth[P[:, 1], P[:, 0]]


def render(
    scene: SceneSpec,
    cam: CameraIntrinsics,
    T_wc: Pose,
    exposure: float = 1.0,
    a: float = 0.0,
    b: float = 0.0,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> RenderedKeyframe:
    """Ray-cast the scene; I = exposure * e^a * L + b + noise on visible pixels, b elsewhere."""
    rays_w = cam.rays(_pixel_grid(cam)) @ T_wc.R.T
    s, ids = intersect_scene(scene, T_wc.t, rays_w)
    visible = ids >= 0
    if not np.any(visible):
        raise NoVisibleGeometry("no ray hits a scene plane")

    X = T_wc.t + np.where(visible, s, 0.0)[:, None] * rays_w
    L = _radiance(scene, X, ids)
    image = np.where(visible, exposure * math.exp(a) * L, 0.0) + b
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng()
        image = image + rng.normal(0.0, noise_sigma, image.shape)

    shape = (cam.height, cam.width)
    return RenderedKeyframe(
        image=image.reshape(shape), depth=s.reshape(shape), plane_id=ids.reshape(shape),
        T_wc=T_wc, exposure=exposure, a=a, b=b,
    )


def analytic_view(
    scene: SceneSpec, cam: CameraIntrinsics, T_wc: Pose,
    exposure: float = 1.0, a: float = 0.0, b: float = 0.0,
) -> AnalyticImage:
    """Noiseless view as a closed-form intensity field with exact pixel gradients."""
    gain = exposure * math.exp(a)
    R = T_wc.R

    def fn(x, y):
        pix = np.column_stack([np.ravel(x), np.ravel(y)])
        rays_w = cam.rays(pix) @ R.T
        s, ids = intersect_scene(scene, T_wc.t, rays_w)
        value = np.full(len(pix), b)
        gx = np.zeros(len(pix))
        gy = np.zeros(len(pix))
        for sp in scene.planes:
            m = ids == sp.id
            if not np.any(m):
                continue
            n = sp.plane.normal
            r = rays_w[m]
            X = T_wc.t + s[m, None] * r
            e_u, e_v = sp.axes()
            L, Lu, Lv = sp.texture.evaluate(X @ e_u, X @ e_v)
            dL_dX = Lu[:, None] * e_u + Lv[:, None] * e_v
            nr = r @ n
            for col, f, out in ((0, cam.fx, gx), (1, cam.fy, gy)):
                q = R[:, col] / f
                dX = s[m, None] * (q - r * ((q @ n) / nr)[:, None])
                out[m] = gain * np.sum(dL_dX * dX, axis=1)
            value[m] = gain * L + b
        return value, gx, gy

    return AnalyticImage(fn, cam.width, cam.height)


# --------------------------------------------------------------------------
# Trajectory and IMU
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    """Forward walk along +y with lateral sway, vertical bob and a slow yaw oscillation."""

    duration: float = 3.0
    keyframe_rate: float = 4.0
    imu_rate: float = 200.0
    speed: float = 0.5
    sway_amplitude: float = 0.15
    sway_frequency: float = 0.4
    bob_amplitude: float = 0.04
    bob_frequency: float = 0.7
    yaw_amplitude: float = 0.08
    yaw_frequency: float = 0.3

    @classmethod
    def from_config(cls, sec: TrajectorySection) -> TrajectorySpec:
        return cls(**sec.model_dump())

    @staticmethod
    def _sine(amp: float, freq: float, t: float) -> tuple[float, float, float]:
        w = 2.0 * math.pi * freq
        return amp * math.sin(w * t), amp * w * math.cos(w * t), -amp * w * w * math.sin(w * t)

    def kinematics(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, velocity and acceleration of the body in the world frame."""
        x, vx, ax = self._sine(self.sway_amplitude, self.sway_frequency, t)
        z, vz, az = self._sine(self.bob_amplitude, self.bob_frequency, t)
        return (
            np.array([x, self.speed * t, z]),
            np.array([vx, self.speed, vz]),
            np.array([ax, 0.0, az]),
        )

    def yaw(self, t: float) -> tuple[float, float]:
        psi, dpsi, _ = self._sine(self.yaw_amplitude, self.yaw_frequency, t)
        return psi, dpsi

    def body_pose(self, t: float) -> Pose:
        p, _, _ = self.kinematics(t)
        return Pose(so3_exp(np.array([0.0, 0.0, self.yaw(t)[0]])), p)

    def velocity(self, t: float) -> np.ndarray:
        return self.kinematics(t)[1]

    def angular_velocity_world(self, t: float) -> np.ndarray:
        return np.array([0.0, 0.0, self.yaw(t)[1]])

    def keyframe_times(self) -> np.ndarray:
        n = int(math.floor(self.duration * self.keyframe_rate + 1e-9))
        return np.arange(n + 1) / self.keyframe_rate

    def imu_times(self) -> np.ndarray:
        n = int(math.floor(self.duration * self.imu_rate + 1e-9))
        return np.arange(n + 1) / self.imu_rate


def simulate_imu(
    traj: TrajectorySpec,
    bias: ImuBias | None = None,
    noise: ImuNoise | None = None,
    gravity: np.ndarray = GRAVITY,
    rng: np.random.Generator | None = None,
    bias_walk: bool = False,
) -> list[ImuSample]:
    """Body-frame gyro and accelerometer readings at the IMU rate.

    Without `noise` the stream is exact. White noise uses the discrete standard
    deviation sigma / sqrt(dt) of the continuous densities; with `bias_walk` the
    biases follow a random walk of density sigma_bg, sigma_ba.
    """
    bias = bias if bias is not None else ImuBias()
    rng = rng if rng is not None else np.random.default_rng()
    dt = 1.0 / traj.imu_rate
    bg, ba = bias.bg.copy(), bias.ba.copy()
    samples = []
    for t in traj.imu_times():
        R = traj.body_pose(t).R
        _, _, acc = traj.kinematics(t)
        gyro = R.T @ traj.angular_velocity_world(t) + bg
        accel = R.T @ (acc - gravity) + ba
        if noise is not None:
            gyro = gyro + rng.normal(0.0, noise.sigma_g / math.sqrt(dt), 3)
            accel = accel + rng.normal(0.0, noise.sigma_a / math.sqrt(dt), 3)
            if bias_walk:
                bg = bg + rng.normal(0.0, noise.sigma_bg * math.sqrt(dt), 3)
                ba = ba + rng.normal(0.0, noise.sigma_ba * math.sqrt(dt), 3)
        samples.append(ImuSample(float(t), gyro, accel))
    return samples


def samples_between(samples: list[ImuSample], t0: float, t1: float, tol: float = 1e-9) -> list[ImuSample]:
    return [s for s in samples if t0 - tol <= s.timestamp <= t1 + tol]


def ground_truth_state(traj: TrajectorySpec, t: float, bias: ImuBias | None = None) -> BodyState:
    return BodyState(traj.body_pose(t), traj.velocity(t), bias if bias is not None else ImuBias())


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------

def perturb_pose(pose: Pose, rng: np.random.Generator, sigma_pos: float, sigma_rot: float) -> Pose:
    R, t = pose.R, pose.t
    if sigma_rot > 0:
        R = so3_exp(rng.normal(0.0, sigma_rot, 3)) @ R
    if sigma_pos > 0:
        t = t + rng.normal(0.0, sigma_pos, 3)
    return Pose(R, t)


def perturb_inv_depth(inv_depth: float, rng: np.random.Generator, sigma_depth: float) -> float:
    """Relative Gaussian perturbation, kept positive."""
    if sigma_depth <= 0:
        return inv_depth
    return float(inv_depth * max(1.0 + rng.normal(0.0, sigma_depth), 0.1))


def perturb_init(
    window: SlidingWindow,
    sigma_pos: float,
    sigma_rot: float,
    sigma_depth: float,
    seed: int,
    sigma_vel: float = 0.0,
) -> SlidingWindow:
    """Seeded Gaussian perturbation of a ground-truth window. The input is left untouched.

    Keyframes are visited in window order, then points and planes by id, so a seed
    fixes the result.
    """
    if min(sigma_pos, sigma_rot, sigma_depth, sigma_vel) < 0:
        raise ValueError("perturbation sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    out = window.copy()
    for kf in out.keyframes:
        kf.pose = perturb_pose(kf.pose, rng, sigma_pos, sigma_rot)
        if sigma_vel > 0:
            kf.velocity = kf.velocity + rng.normal(0.0, sigma_vel, 3)
    for pid in sorted(out.points):
        pt = out.points[pid]
        if not pt.coplanar:
            pt.inv_depth = perturb_inv_depth(pt.inv_depth, rng, sigma_depth)
    for pid in sorted(out.planes):
        st = out.planes[pid]
        params = st.params.params().copy()
        if st.kind == "vertical" and sigma_rot > 0:
            params[0] += rng.normal(0.0, sigma_rot)
        if sigma_pos > 0:
            params[-1] += rng.normal(0.0, sigma_pos)
        st.params = st.params.with_params(params)
    return out


# --------------------------------------------------------------------------
# Point selection
# --------------------------------------------------------------------------

class PointSelection(NamedTuple):
    pixels: np.ndarray  # (M, 2)
    inv_depths: np.ndarray  # (M,)
    plane_ids: np.ndarray  # (M,), ground-truth scene plane


def select_points(frame: RenderedKeyframe, count: int, margin: int = SELECT_MARGIN) -> PointSelection:
    """Up to `count` high-gradient pixels, one per grid cell, ranked by gradient.

    Only pixels whose whole 5x5 neighborhood sees a single plane are eligible.
    """
    h, w = frame.image.shape
    gy, gx = np.gradient(frame.image)
    mag = np.hypot(gx, gy)

    ids = frame.plane_id
    same = (
        (ndimage.minimum_filter(ids, size=NEIGHBORHOOD, mode="nearest") == ids)
        & (ndimage.maximum_filter(ids, size=NEIGHBORHOOD, mode="nearest") == ids)
    )
    eligible = same & (ids >= 0) & np.isfinite(frame.depth)
    eligible[:margin, :] = False
    eligible[h - margin:, :] = False
    eligible[:, :margin] = False
    eligible[:, w - margin:] = False
    n_eligible = int(eligible.sum())
    if n_eligible == 0 or count <= 0:
        return PointSelection(np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=int))

    cell = max(1, int(math.sqrt(n_eligible / count)))
    score = np.where(eligible, mag, -1.0)
    picks = []
    for y0 in range(0, h, cell):
        for x0 in range(0, w, cell):
            block = score[y0:y0 + cell, x0:x0 + cell]
            k = int(np.argmax(block))
            by, bx = divmod(k, block.shape[1])
            if block[by, bx] >= 0:
                picks.append((block[by, bx], x0 + bx, y0 + by))
    # strongest first, ties broken by raster order
    picks.sort(key=lambda p: (-p[0], p[2], p[1]))
    picks = picks[:count]

    xs = np.array([p[1] for p in picks])
    ys = np.array([p[2] for p in picks])
    return PointSelection(
        pixels=np.column_stack([xs, ys]).astype(float),
        inv_depths=1.0 / frame.depth[ys, xs],
        plane_ids=ids[ys, xs].astype(int),
    )


# --------------------------------------------------------------------------
# Whole sequences
# --------------------------------------------------------------------------

def affine_at(k: int) -> tuple[float, float]:
    """Ground-truth brightness parameters of keyframe k; zero for the first keyframe."""
    return AFFINE_A_AMPLITUDE * math.sin(0.9 * k), AFFINE_B_AMPLITUDE * math.sin(0.6 * k)


@dataclass(eq=False)
class SyntheticSequence:
    scene: SceneSpec
    camera: CameraIntrinsics
    trajectory: TrajectorySpec
    timestamps: np.ndarray
    frames: list[RenderedKeyframe]
    body_poses: list[Pose]
    velocities: list[np.ndarray]
    imu: list[ImuSample]
    bias: ImuBias = field(default_factory=ImuBias)
    T_bc: Pose = CAMERA_MOUNT


def imu_noise_from_config(cfg: ExperimentConfig) -> ImuNoise:
    n = cfg.noise
    return ImuNoise(n.sigma_g, n.sigma_a, n.sigma_bg, n.sigma_ba)


def synthesize(cfg: ExperimentConfig, progress: bool = False) -> SyntheticSequence:
    """Render every keyframe and simulate the IMU stream for an experiment config."""
    scene = SceneSpec.from_config(cfg.scene)
    cam = camera_from_config(cfg.camera)
    traj = TrajectorySpec.from_config(cfg.trajectory)
    rng = np.random.default_rng(cfg.run.seed)

    times = traj.keyframe_times()
    frames, poses, velocities = [], [], []
    for k, t in enumerate(tqdm(times, desc="render", disable=not progress)):
        body = traj.body_pose(t)
        a, b = affine_at(k)
        frames.append(render(scene, cam, body @ CAMERA_MOUNT, 1.0, a, b, cfg.noise.image_sigma, rng))
        poses.append(body)
        velocities.append(traj.velocity(t))

    noise = imu_noise_from_config(cfg) if cfg.noise.imu_noise else None
    imu = simulate_imu(traj, ImuBias(), noise, GRAVITY, rng, cfg.noise.bias_walk)
    logger.info("synthesized %d keyframes and %d IMU samples of scene %s", len(frames), len(imu), scene.name)
    return SyntheticSequence(scene, cam, traj, times, frames, poses, velocities, imu)
