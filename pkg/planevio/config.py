"""Configuration from environment variables and experiment config files."""

import configparser
import math
import os
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from planevio.errors import BadConfig

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.getenv("PLANEVIO_DATA_DIR", str(BASE_DIR / "data")))
DB_PATH = Path(os.getenv("PLANEVIO_DB_PATH", str(DATA_DIR / "experiments.db")))
DATABASE_URL = f"sqlite:///{DB_PATH}"

LOG_LEVEL = os.getenv("PLANEVIO_LOG_LEVEL", "INFO").upper()
THREADS = int(os.getenv("PLANEVIO_THREADS", "1"))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SceneSection(_Section):
    name: Literal["corridor", "floor", "corner"] = "corridor"
    texture_seed: int = 7
    floor_height: float = -1.0
    wall_x: float = 2.0
    length: float = 40.0
    wall_height: float = Field(3.0, gt=0)
    corner_y: float = 6.0


class CameraSection(_Section):
    width: int = Field(160, gt=8)
    height: int = Field(120, gt=8)
    fx: float = Field(130.0, gt=0)
    fy: float = Field(130.0, gt=0)
    cx: float = 79.5
    cy: float = 59.5


class TrajectorySection(_Section):
    duration: float = Field(3.0, gt=0)
    keyframe_rate: float = Field(4.0, gt=0)
    imu_rate: float = Field(200.0, gt=0)
    speed: float = 0.5
    sway_amplitude: float = 0.15
    sway_frequency: float = 0.4
    bob_amplitude: float = 0.04
    bob_frequency: float = 0.7
    yaw_amplitude: float = 0.08
    yaw_frequency: float = 0.3


class NoiseSection(_Section):
    image_sigma: float = Field(5.0, ge=0)
    # EuRoC-like densities
    sigma_g: float = Field(1.7e-4, gt=0)
    sigma_a: float = Field(2.0e-3, gt=0)
    sigma_bg: float = Field(1.9e-5, gt=0)
    sigma_ba: float = Field(3.0e-3, gt=0)
    imu_noise: bool = True
    bias_walk: bool = False
    init_sigma_pos: float = Field(0.01, ge=0)
    init_sigma_rot_deg: float = Field(0.5, ge=0)
    init_sigma_depth: float = Field(0.05, ge=0)
    init_sigma_vel: float = Field(0.01, ge=0)


class EstimatorSection(_Section):
    window_size: int = Field(7, ge=2)
    points_per_keyframe: int = Field(800, ge=1)
    plane_enabled: bool = True
    plane_prior_enabled: bool = True
    sigma_t: int = Field(20, ge=1)
    height_bin: float = Field(0.05, gt=0)
    azimuth_bin_deg: float = Field(2.0, gt=0)
    distance_bin: float = Field(0.05, gt=0)
    smooth_sigma: float = Field(1.5, gt=0)
    angle_tol_deg: float = Field(5.0, gt=0)
    dist_thresh: float = Field(0.1, gt=0)
    point_dist_tol: float = Field(0.05, gt=0)
    max_edge_3d: float = Field(0.5, gt=0)
    huber_gamma: float = Field(9.0, gt=0)
    grad_const: float = Field(50.0, gt=0)
    photometric_sigma: float = Field(11.0, gt=0)
    lm_damping: float = Field(1e-4, gt=0)
    lm_iterations: int = Field(6, ge=1)
    lm_max_retries: int = Field(5, ge=1)
    min_active_obs: int = Field(10, ge=1)
    prior_sigma_phi: float = Field(1e-2, gt=0)
    prior_sigma_d: float = Field(1e-2, gt=0)
    gauge_sigma_pose: float = Field(1e-3, gt=0)
    gauge_sigma_affine: float = Field(1e-2, gt=0)
    marginalization: Literal["oldest"] = "oldest"


class RunSection(_Section):
    seed: int = 0
    threads: int = Field(THREADS, ge=1)


class ExperimentConfig(_Section):
    scene: SceneSection = SceneSection()
    camera: CameraSection = CameraSection()
    trajectory: TrajectorySection = TrajectorySection()
    noise: NoiseSection = NoiseSection()
    estimator: EstimatorSection = EstimatorSection()
    run: RunSection = RunSection()

    @property
    def angle_tol(self) -> float:
        return math.radians(self.estimator.angle_tol_deg)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with per-section field overrides: with_overrides(estimator={"plane_enabled": False})."""
        data = self.model_dump()
        for name, fields in sections.items():
            if name not in data:
                raise BadConfig(f"unknown section [{name}]")
            data[name].update(fields)
        return _validate(data)

    def to_text(self) -> str:
        """Serialize back to the key = value grammar."""
        lines = []
        for name, section in self.model_dump().items():
            lines.append(f"[{name}]")
            for key, val in section.items():
                if isinstance(val, bool):
                    val = "true" if val else "false"
                lines.append(f"{key} = {val}")
            lines.append("")
        return "\n".join(lines)


def _coerce(raw: str):
    low = raw.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    return raw.strip()


def _validate(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise BadConfig(str(e)) from e


def parse_experiment_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), default_section="__none__",
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise BadConfig(f"malformed config: {e}") from e
    data = {name: {k: _coerce(v) for k, v in parser[name].items()} for name in parser.sections()}
    return _validate(data)


def load_experiment_config(path: str | Path | None) -> ExperimentConfig:
    """Load a config file; None yields the all-defaults corridor experiment."""
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise BadConfig(f"cannot read config {path}: {e}") from e
    return parse_experiment_config(text)
