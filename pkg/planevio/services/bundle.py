"""On-disk scene bundles: TUM trajectories, IMU CSV, rendered keyframes and the manifest.

Bundle layout:
    manifest.json   scene, camera, camera mount, per-keyframe metadata, config text
    gt.tum          ground-truth body poses, one line per keyframe
    imu.csv         t,gx,gy,gz,ax,ay,az
    images.npy      (K, h, w) float64 intensities
    depths.npy      (K, h, w) ground-truth depth, inf where nothing is visible
    plane_ids.npy   (K, h, w) ground-truth scene plane, -1 where nothing is visible
    previews/       optional 8-bit PGM dumps
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from planevio.errors import BadBundle, IoFailure, ParseError
from planevio.services.evaluation import Trajectory
from planevio.services.geometry import CameraIntrinsics, Pose
from planevio.services.imu import ImuSample

logger = logging.getLogger(__name__)

TUM_FORMAT = "%.9f %.6f %.6f %.6f %.9f %.9f %.9f %.9f"
IMU_HEADER = ["t", "gx", "gy", "gz", "ax", "ay", "az"]
BUNDLE_FILES = ("manifest.json", "gt.tum", "imu.csv", "images.npy", "depths.npy", "plane_ids.npy")


# --------------------------------------------------------------------------
# TUM trajectories
# --------------------------------------------------------------------------

def format_tum(traj: Trajectory) -> str:
    lines = []
    for t, pose in zip(traj.timestamps, traj.poses):
        q = pose.quaternion()
        lines.append(TUM_FORMAT % (t, *pose.t, *q))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_tum(text: str, source: str = "<string>") -> Trajectory:
    stamps, poses = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"{source}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            vals = [float(f) for f in fields]
        except ValueError as e:
            raise ParseError(f"{source}:{lineno}: {e}") from e
        q = np.array(vals[4:8])
        if not np.isclose(np.linalg.norm(q), 1.0, atol=1e-3):
            raise ParseError(f"{source}:{lineno}: quaternion is not unit length")
        stamps.append(vals[0])
        poses.append(Pose.from_quaternion(q / np.linalg.norm(q), vals[1:4]))
    try:
        return Trajectory(np.array(stamps), poses)
    except ValueError as e:
        raise ParseError(f"{source}: {e}") from e


def write_tum(path: str | Path, traj: Trajectory):
    try:
        with open(path, "w", newline="\n") as f:
            f.write(format_tum(traj))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_tum(path: str | Path) -> Trajectory:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    return parse_tum(text, str(path))


# --------------------------------------------------------------------------
# IMU CSV
# --------------------------------------------------------------------------

def write_imu_csv(path: str | Path, samples: list[ImuSample]):
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(IMU_HEADER)
            for s in samples:
                writer.writerow([f"{s.timestamp:.9f}"] + [f"{v:.12e}" for v in (*s.gyro, *s.accel)])
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_imu_csv(path: str | Path) -> list[ImuSample]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    if not rows or [c.strip() for c in rows[0]] != IMU_HEADER:
        raise ParseError(f"{path}: header must be {','.join(IMU_HEADER)}")
    samples = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != 7:
            raise ParseError(f"{path}:{lineno}: expected 7 columns, got {len(row)}")
        try:
            v = [float(c) for c in row]
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: {e}") from e
        samples.append(ImuSample(v[0], v[1:4], v[4:7]))
    return samples


# --------------------------------------------------------------------------
# PGM previews
# --------------------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray):
    """Binary 8-bit PGM; intensities are clipped to [0, 255]."""
    data = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = data.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


# --------------------------------------------------------------------------
# Bundles
# --------------------------------------------------------------------------

@dataclass(eq=False)
class SceneBundle:
    root: Path
    manifest: dict
    camera: CameraIntrinsics
    T_bc: Pose
    gt: Trajectory
    velocities: np.ndarray  # (K, 3)
    imu: list[ImuSample]
    images: np.ndarray
    depths: np.ndarray
    plane_ids: np.ndarray
    exposures: np.ndarray
    affine: np.ndarray  # (K, 2) ground-truth (a, b)

    def __len__(self):
        return len(self.gt)

    @property
    def timestamps(self) -> np.ndarray:
        return self.gt.timestamps

    @property
    def config_text(self) -> str:
        return self.manifest.get("config", "")


def write_bundle(seq, config_text: str, out_dir: str | Path, pgm: bool = False) -> Path:
    """Write a SyntheticSequence to `out_dir`; every file is a deterministic function of its input."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {root}: {e}") from e

    manifest = {
        "version": 1,
        "scene": seq.scene.to_dict(),
        "camera": seq.camera.to_dict(),
        "T_bc": seq.T_bc.matrix().tolist(),
        "keyframes": [
            {"index": k, "timestamp": float(t), "exposure": f.exposure, "a": f.a, "b": f.b,
             "velocity": [float(x) for x in v]}
            for k, (t, f, v) in enumerate(zip(seq.timestamps, seq.frames, seq.velocities))
        ],
        "imu_samples": len(seq.imu),
        "config": config_text,
    }
    try:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        np.save(root / "images.npy", np.stack([f.image for f in seq.frames]))
        np.save(root / "depths.npy", np.stack([f.depth for f in seq.frames]))
        np.save(root / "plane_ids.npy", np.stack([f.plane_id for f in seq.frames]).astype(np.int32))
    except OSError as e:
        raise IoFailure(f"cannot write bundle {root}: {e}") from e
    write_tum(root / "gt.tum", Trajectory(seq.timestamps, seq.body_poses))
    write_imu_csv(root / "imu.csv", seq.imu)

    if pgm:
        (root / "previews").mkdir(exist_ok=True)
        for k, f in enumerate(seq.frames):
            write_pgm(root / "previews" / f"kf_{k:04d}.pgm", f.image)
    logger.info("wrote bundle with %d keyframes to %s", len(seq.frames), root)
    return root


def read_bundle(path: str | Path) -> SceneBundle:
    root = Path(path)
    missing = [name for name in BUNDLE_FILES if not (root / name).is_file()]
    if missing:
        raise BadBundle(f"{root}: missing {', '.join(missing)}")
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        camera = CameraIntrinsics(**manifest["camera"])
        T_bc = Pose.from_matrix(np.array(manifest["T_bc"], dtype=float))
        kfs = manifest["keyframes"]
        velocities = np.array([k["velocity"] for k in kfs], dtype=float).reshape(-1, 3)
        exposures = np.array([k["exposure"] for k in kfs], dtype=float)
        affine = np.array([[k["a"], k["b"]] for k in kfs], dtype=float).reshape(-1, 2)
        images = np.load(root / "images.npy")
        depths = np.load(root / "depths.npy")
        plane_ids = np.load(root / "plane_ids.npy")
        gt = read_tum(root / "gt.tum")
        imu = read_imu_csv(root / "imu.csv")
    except (KeyError, TypeError, ValueError, OSError, ParseError) as e:
        raise BadBundle(f"{root}: {e}") from e

    shape = (len(kfs), camera.height, camera.width)
    for name, arr in (("images", images), ("depths", depths), ("plane_ids", plane_ids)):
        if arr.shape != shape:
            raise BadBundle(f"{root}: {name} has shape {arr.shape}, expected {shape}")
    if len(gt) != len(kfs):
        raise BadBundle(f"{root}: gt.tum has {len(gt)} poses for {len(kfs)} keyframes")
    if len(imu) < 2:
        raise BadBundle(f"{root}: imu.csv holds fewer than two samples")

    return SceneBundle(root, manifest, camera, T_bc, gt, velocities, imu,
                       images, depths, plane_ids, exposures, affine)


def bundle_from_sequence(seq, config_text: str = "") -> SceneBundle:
    """In-memory bundle; unlike a round trip through gt.tum the ground truth keeps full precision."""
    timestamps = np.asarray(seq.timestamps, dtype=float)
    return SceneBundle(
        root=Path("."),
        manifest={"config": config_text},
        camera=seq.camera,
        T_bc=seq.T_bc,
        gt=Trajectory(timestamps, list(seq.body_poses)),
        velocities=np.array(seq.velocities, dtype=float).reshape(-1, 3),
        imu=list(seq.imu),
        images=np.stack([f.image for f in seq.frames]),
        depths=np.stack([f.depth for f in seq.frames]),
        plane_ids=np.stack([f.plane_id for f in seq.frames]).astype(np.int32),
        exposures=np.array([f.exposure for f in seq.frames], dtype=float),
        affine=np.array([[f.a, f.b] for f in seq.frames], dtype=float).reshape(-1, 2),
    )
