"""Sliding-window estimator driver over a scene bundle.

Per keyframe, in timestamp order:
    1. initialize the state (IMU prediction for velocity, perturbed ground truth for pose)
    2. select high-gradient points with noisy inverse depths
    3. mesh the window's landmarks seen from the new keyframe, detect planes, merge them
       into the registry and bind associated points
    4. run LM iterations
    5. retire planes that lost their support
    6. marginalize the oldest keyframe once the window is over capacity
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from planevio.config import ExperimentConfig
from planevio.errors import AllCollinear, IoFailure, MissingDepth, TooFewPoints
from planevio.services.bundle import SceneBundle, write_tum
from planevio.services.evaluation import Trajectory
from planevio.services.geometry import MIN_DEPTH, PARALLEL_EPS, Pose, project_many
from planevio.services.imu import GRAVITY, preintegrate, predict_state
from planevio.services.meshing import Mesh3D, delaunay2d, lift_to_3d
from planevio.services.optimizer import (
    gauge_prior, marginalize_keyframe, optimize, retire_plane, state_dimension, trace_lines,
)
from planevio.services.plane_detect import PlaneRegistry, detect_planes, merge_or_insert
from planevio.services.residuals import RobustWeights
from planevio.services.synth import (
    RenderedKeyframe, imu_noise_from_config, perturb_inv_depth, perturb_pose, samples_between, select_points,
)
from planevio.state import Keyframe, PlaneState, PointFeature, RasterImage, SlidingWindow

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    estimate: Trajectory
    trace: list[dict] = field(default_factory=list)
    dimensions: list[dict] = field(default_factory=list)
    plane_history: list[dict] = field(default_factory=list)
    planes: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> Path:
        """est.tum, trace.jsonl, dimensions.jsonl, planes.json, timings.json."""
        root = Path(out_dir)
        try:
            root.mkdir(parents=True, exist_ok=True)
            (root / "trace.jsonl").write_text(trace_lines(self.trace))
            (root / "dimensions.jsonl").write_text(trace_lines(self.dimensions))
            (root / "planes.json").write_text(
                json.dumps({"registry": self.planes, "history": self.plane_history}, indent=2) + "\n")
            (root / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")
        except OSError as e:
            raise IoFailure(f"cannot write run outputs to {root}: {e}") from e
        write_tum(root / "est.tum", self.estimate)
        return root


def landmark_positions(window: SlidingWindow) -> dict[int, np.ndarray]:
    """World position of every active landmark whose depth is defined."""
    out: dict[int, np.ndarray] = {}
    by_host: dict[int, list[PointFeature]] = defaultdict(list)
    for p in window.active_points():
        by_host[p.host_id].append(p)
    for host_id, pts in by_host.items():
        T_wc = window.keyframe(host_id).T_wc
        cam = window.keyframe(host_id).camera
        r_w = cam.rays(np.array([p.pixel for p in pts])) @ T_wc.R.T
        s = np.empty(len(pts))
        for k, p in enumerate(pts):
            if p.coplanar:
                g = window.planes[p.plane_id].params.to_general()
                denom = float(g.n @ r_w[k])
                s[k] = -(g.n @ T_wc.t + g.d) / denom if abs(denom) > PARALLEL_EPS else -1.0
            else:
                s[k] = 1.0 / p.inv_depth
        for k, p in enumerate(pts):
            if s[k] > MIN_DEPTH:
                out[p.id] = T_wc.t + s[k] * r_w[k]
    return out


class VioPipeline:
    def __init__(self, cfg: ExperimentConfig, bundle: SceneBundle, progress: bool = False):
        self.cfg = cfg
        self.est = cfg.estimator
        self.bundle = bundle
        self.progress = progress
        self.threads = cfg.run.threads
        self.weights = RobustWeights.from_config(self.est)
        self.window = SlidingWindow(self.est.window_size, GRAVITY)
        self.registry = PlaneRegistry()
        self.imu_noise = imu_noise_from_config(cfg)
        # independent of the stream used to synthesize the bundle
        self.rng = np.random.default_rng([cfg.run.seed, 1])
        self.prior_sigma = (self.est.prior_sigma_phi, self.est.prior_sigma_d)

        self.trace: list[dict] = []
        self.dimensions: list[dict] = []
        self.plane_history: list[dict] = []
        self.timings: dict[str, float] = defaultdict(float)
        self.finished: dict[int, tuple[float, Pose]] = {}
        self._step_timings: dict[str, float] = {}
        self._next_point = 0

    @contextmanager
    def _stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t0
            self.timings[name] += dt
            self._step_timings[name] = self._step_timings.get(name, 0.0) + dt

    # --- initialization -------------------------------------------------

    def _new_keyframe(self, k: int) -> Keyframe:
        b = self.bundle
        noise = self.cfg.noise
        t = float(b.timestamps[k])
        gt = b.gt.poses[k]
        if k == 0:
            pose, velocity = gt, b.velocities[0].copy()
            bias, a, off, pre = None, 0.0, 0.0, None
        else:
            prev = self.window.keyframes[-1]
            pre = preintegrate(samples_between(b.imu, prev.timestamp, t), prev.bias, self.imu_noise)
            predicted = predict_state(prev.body_state, pre, self.window.gravity)
            pose = perturb_pose(gt, self.rng, noise.init_sigma_pos, math.radians(noise.init_sigma_rot_deg))
            velocity, bias, a, off = predicted.velocity, prev.bias, prev.a, prev.b
        if noise.init_sigma_vel > 0:
            velocity = velocity + self.rng.normal(0.0, noise.init_sigma_vel, 3)

        kf = Keyframe(
            id=k, timestamp=t, pose=pose, image=RasterImage(b.images[k]), camera=b.camera,
            exposure=float(b.exposures[k]), a=a, b=off, velocity=velocity, T_bc=b.T_bc,
        )
        if bias is not None:
            kf.bias = bias
        self.window.add_keyframe(kf, pre)
        if k == 0:
            gauge_prior(self.window, kf.id, self.est.gauge_sigma_pose, self.est.gauge_sigma_affine)
        return kf

    def _add_points(self, kf: Keyframe, k: int) -> int:
        b = self.bundle
        frame = RenderedKeyframe(b.images[k], b.depths[k], b.plane_ids[k], b.gt.poses[k] @ b.T_bc)
        sel = select_points(frame, self.est.points_per_keyframe)
        for pixel, rho in zip(sel.pixels, sel.inv_depths):
            rho = perturb_inv_depth(float(rho), self.rng, self.cfg.noise.init_sigma_depth)
            self.window.add_point(PointFeature(self._next_point, kf.id, pixel, rho))
            self._next_point += 1
        return len(sel.pixels)

    # --- planes ---------------------------------------------------------

    def _mesh(self, kf: Keyframe) -> Mesh3D | None:
        positions = landmark_positions(self.window)
        if not positions:
            return None
        ids = np.array(sorted(positions))
        X_w = np.array([positions[i] for i in ids])
        X_c = kf.T_wc.inverse().apply(X_w)
        front = X_c[:, 2] > MIN_DEPTH
        ids, X_c = ids[front], X_c[front]
        pix = project_many(kf.camera, X_c) if len(X_c) else np.zeros((0, 2))
        inside = kf.camera.in_image(pix) if len(pix) else np.zeros(0, dtype=bool)
        ids, X_c, pix = ids[inside], X_c[inside], pix[inside]
        try:
            tri = delaunay2d(pix, ids)
            depths = {int(i): 1.0 / z for i, z in zip(ids, X_c[:, 2])}
            return lift_to_3d(tri, depths, kf.T_wc, kf.camera, self.est.max_edge_3d)
        except (TooFewPoints, AllCollinear, MissingDepth) as e:
            logger.debug("no mesh for keyframe %d: %s", kf.id, e)
            return None

    def _follow_absorptions(self):
        for pid in sorted(self.window.planes):
            target = self.registry.resolve(pid)
            if target == pid:
                continue
            st = self.window.planes.pop(pid)
            self.window.plane_priors.pop(pid, None)
            if target not in self.window.planes:
                self.window.planes[target] = PlaneState(self.registry[target].params)
            self.window.planes[target].members |= st.members
            for p in self.window.coplanar_points(pid):
                p.plane_id = target
            logger.debug("window plane %d now bound to plane %d", pid, target)

    def _bind(self, pid: int, candidates: set[int], positions: dict[int, np.ndarray]) -> int:
        st = self.window.planes[pid]
        g = st.params.to_general()
        bound = 0
        for lid in sorted(candidates):
            p = self.window.points.get(lid)
            if p is None or p.status != "active" or p.coplanar or lid not in positions:
                continue
            if abs(g.incidence(positions[lid])) > self.est.point_dist_tol:
                continue
            host = self.window.keyframe(p.host_id).T_wc
            ray = host.R @ self.window.keyframe(p.host_id).camera.rays(p.pixel)[0]
            denom = float(g.n @ ray)
            if abs(denom) <= PARALLEL_EPS or -(g.n @ host.t + g.d) / denom <= MIN_DEPTH:
                continue
            p.bind_to_plane(pid)
            st.members.add(lid)
            bound += 1
        return bound

    def _detect(self, kf: Keyframe):
        with self._stage("meshing"):
            mesh = self._mesh(kf)
        if mesh is None or len(mesh) == 0:
            return
        with self._stage("detection"):
            candidates = detect_planes(mesh, self.est)
            merged: dict[int, set[int]] = defaultdict(set)
            for cand in candidates:
                pid = merge_or_insert(self.registry, cand, self.cfg.angle_tol, self.est.dist_thresh)
                merged[pid] |= cand.member_points
            self._follow_absorptions()

            positions = landmark_positions(self.window)
            for pid, members in sorted(merged.items()):
                pid = self.registry.resolve(pid)
                if pid not in self.window.planes:
                    self.window.planes[pid] = PlaneState(self.registry[pid].params)
                n = self._bind(pid, members, positions)
                logger.debug("plane %d: %d points bound on keyframe %d", pid, n, kf.id)

    def _retire_planes(self):
        for pid in sorted(self.window.planes):
            if len(self.window.coplanar_points(pid)) >= self.est.min_active_obs:
                continue
            retire_plane(self.window, pid, self.weights, self.prior_sigma, self.threads)
            self.registry.deactivate(pid)
            if not self.est.plane_prior_enabled:
                self.window.plane_priors.pop(pid, None)

    def _sync_registry(self):
        for pid, st in self.window.planes.items():
            if pid in self.registry.planes:
                self.registry.update_params(pid, st.params)

    # --- main loop ------------------------------------------------------

    def step(self, k: int):
        self._step_timings = {}
        kf = self._new_keyframe(k)
        with self._stage("selection"):
            n_new = self._add_points(kf, k)

        if self.est.plane_enabled:
            self._detect(kf)

        with self._stage("optimization"):
            summary = optimize(
                self.window, self.weights, self.est.lm_iterations, self.est.lm_damping,
                self.est.lm_max_retries, self.threads, trace_start=len(self.trace),
            )
        for row in summary.trace:
            self.trace.append({"keyframe": k, **row})
        self._sync_registry()

        if self.est.plane_enabled:
            with self._stage("detection"):
                self._retire_planes()

        dims = state_dimension(self.window)
        if len(self.window) > self.window.max_size:
            oldest = self.window.keyframes[0]
            self.finished[oldest.id] = (oldest.timestamp, oldest.pose)
            with self._stage("marginalization"):
                marginalize_keyframe(
                    self.window, oldest.id, self.weights,
                    self.prior_sigma if self.est.plane_prior_enabled else None, self.threads,
                )

        self.dimensions.append({
            "keyframe": k, "new_points": n_new, **dims,
            "timing_ms": {name: round(1e3 * v, 3) for name, v in sorted(self._step_timings.items())},
        })
        for pid in sorted(self.window.planes):
            self.plane_history.append({"keyframe": k, "plane_id": pid, **self.window.planes[pid].params.to_dict()})
        logger.info("keyframe %d: energy %.6g -> %.6g, %d variables, %d planes",
                    k, summary.initial_energy, summary.final_energy, dims["total"], dims["planes"])

    def run(self) -> RunResult:
        for k in tqdm(range(len(self.bundle)), desc="keyframes", disable=not self.progress):
            self.step(k)
        for kf in self.window.keyframes:
            self.finished[kf.id] = (kf.timestamp, kf.pose)
        ids = sorted(self.finished, key=lambda i: self.finished[i][0])
        estimate = Trajectory(np.array([self.finished[i][0] for i in ids]), [self.finished[i][1] for i in ids])
        return RunResult(
            estimate=estimate, trace=self.trace, dimensions=self.dimensions,
            plane_history=self.plane_history, planes=self.registry.to_report(),
            timings={name: round(v, 6) for name, v in self.timings.items()},
        )


def run_pipeline(cfg: ExperimentConfig, bundle: SceneBundle, progress: bool = False) -> RunResult:
    return VioPipeline(cfg, bundle, progress).run()
