"""Batch experiments: plane ablation, photometric-sigma sweep, plane-prior stability.

Each run synthesizes its own bundle in memory, runs the estimator and scores the
trajectory. Results optionally land in the experiment database, one row per run.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
from sqlalchemy.orm import Session
from tqdm import tqdm

from planevio.config import ExperimentConfig
from planevio.errors import IoFailure
from planevio.models import ExperimentRun, RunMetric
from planevio.services.bundle import bundle_from_sequence
from planevio.services.evaluation import trajectory_metrics
from planevio.services.pipeline import RunResult, run_pipeline
from planevio.services.synth import synthesize

logger = logging.getLogger(__name__)

SWEEP_SIGMAS = (5.0, 8.0, 11.0, 15.0, 20.0)
SWEEP_THRESHOLDS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05)


def record_run(session: Session | None, experiment: str, seed: int, variant: str,
               metrics: dict, status: str = "complete") -> ExperimentRun | None:
    if session is None:
        return None
    run = ExperimentRun(experiment=experiment, seed=seed, variant=variant, status=status)
    run.metrics = [RunMetric(name=k, value=float(v)) for k, v in sorted(metrics.items())
                   if isinstance(v, (int, float)) and not isinstance(v, bool)]
    session.add(run)
    session.commit()
    return run


def run_once(cfg: ExperimentConfig) -> tuple[RunResult, dict]:
    """Synthesize, estimate and score one configuration."""
    seq = synthesize(cfg)
    bundle = bundle_from_sequence(seq, cfg.to_text())
    result = run_pipeline(cfg, bundle)
    metrics = trajectory_metrics(result.estimate, bundle.gt)
    final = result.dimensions[-1] if result.dimensions else {}
    metrics["state_total"] = final.get("total", 0)
    metrics["planes"] = final.get("planes", 0)
    return result, metrics


def ablation(cfg: ExperimentConfig, runs: int = 20, session: Session | None = None,
             progress: bool = False) -> dict:
    """Paired runs with planes on and off over seeds 0..runs-1; improvement = ATE(off) - ATE(on)."""
    rows = []
    for seed in tqdm(range(runs), desc="ablation", disable=not progress):
        row = {"seed": seed}
        for enabled in (True, False):
            variant = cfg.with_overrides(run={"seed": seed}, estimator={"plane_enabled": enabled})
            _, metrics = run_once(variant)
            tag = "on" if enabled else "off"
            row[f"rmse_{tag}"] = metrics["rmse"]
            row[f"state_{tag}"] = metrics["state_total"]
            record_run(session, "ablation", seed, f"planes={tag}", metrics)
        row["improvement"] = row["rmse_off"] - row["rmse_on"]
        rows.append(row)
        logger.info("ablation seed %d: on %.6f m, off %.6f m", seed, row["rmse_on"], row["rmse_off"])

    on = np.array([r["rmse_on"] for r in rows])
    off = np.array([r["rmse_off"] for r in rows])
    return {
        "runs": rows,
        "median_rmse_on": float(np.median(on)) if rows else math.nan,
        "median_rmse_off": float(np.median(off)) if rows else math.nan,
        "improved": int(np.sum(off - on > 0)),
        "total": len(rows),
    }


def sigma_sweep(cfg: ExperimentConfig, sigmas=SWEEP_SIGMAS, runs: int = 5,
                thresholds=SWEEP_THRESHOLDS, session: Session | None = None, progress: bool = False) -> dict:
    """Cumulative error curve per photometric sigma: fraction of runs with ATE below each threshold."""
    table = []
    jobs = [(s, seed) for s in sigmas for seed in range(runs)]
    errors: dict[float, list[float]] = {float(s): [] for s in sigmas}
    for sigma, seed in tqdm(jobs, desc="sweep", disable=not progress):
        variant = cfg.with_overrides(run={"seed": seed}, estimator={"photometric_sigma": sigma})
        _, metrics = run_once(variant)
        errors[float(sigma)].append(metrics["rmse"])
        record_run(session, "sweep", seed, f"sigma={sigma:g}", metrics)
    for sigma, errs in errors.items():
        e = np.array(errs)
        table.append({
            "sigma": sigma,
            "median_rmse": float(np.median(e)),
            "curve": [{"threshold": t, "fraction": float(np.mean(e <= t))} for t in thresholds],
        })
    return {"runs_per_sigma": runs, "table": table}


def floor_series(result: RunResult) -> list[float]:
    """Per-keyframe d of the horizontal plane tracked longest."""
    counts: dict[int, int] = {}
    for h in result.plane_history:
        if h["kind"] == "horizontal":
            counts[h["plane_id"]] = counts.get(h["plane_id"], 0) + 1
    if not counts:
        return []
    floor = max(sorted(counts), key=lambda pid: counts[pid])
    return [h["d"] for h in result.plane_history if h["plane_id"] == floor]


def stability(cfg: ExperimentConfig, windows: int = 30, session: Session | None = None,
              progress: bool = False) -> dict:
    """Floor-distance spread over a long sequence with and without retired-plane priors."""
    rate = cfg.trajectory.keyframe_rate
    duration = (windows + cfg.estimator.window_size - 1) / rate
    out = {}
    for enabled in tqdm((True, False), desc="stability", disable=not progress):
        variant = cfg.with_overrides(
            trajectory={"duration": duration},
            estimator={"plane_prior_enabled": enabled, "plane_enabled": True},
        )
        result, metrics = run_once(variant)
        series = floor_series(result)
        std = float(np.std(series, ddof=1)) if len(series) > 1 else math.nan
        tag = "with_prior" if enabled else "without_prior"
        out[tag] = {"floor_d": series, "std": std, "rmse": metrics["rmse"]}
        record_run(session, "stability", cfg.run.seed, tag, {"floor_std": std, **metrics})
    return out


def write_summary(path: str | Path, summary: dict):
    try:
        Path(path).write_text(json.dumps(summary, indent=2) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write summary {path}: {e}") from e
