"""Command handlers. Results go to files or stdout; diagnostics go to the log."""

from __future__ import annotations

import json
import logging
import sys

import numpy as np

from planevio.config import ExperimentConfig, load_experiment_config, parse_experiment_config
from planevio.database import get_session, init_db
from planevio.errors import AllCollinear, BadBundle, TooFewPoints
from planevio.services import experiments
from planevio.services.bundle import read_bundle, read_tum, write_bundle
from planevio.services.evaluation import trajectory_metrics
from planevio.services.meshing import Mesh3D, delaunay2d, lift_to_3d
from planevio.services.pipeline import run_pipeline
from planevio.services.plane_detect import detect_planes, detection_report
from planevio.services.synth import RenderedKeyframe, select_points, synthesize

logger = logging.getLogger(__name__)


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def _bundle_config(args, bundle) -> ExperimentConfig:
    """--config wins; otherwise the config the bundle was synthesized with."""
    if args.config is not None:
        return load_experiment_config(args.config)
    return parse_experiment_config(bundle.config_text) if bundle.config_text else ExperimentConfig()


def cmd_synth(args) -> int:
    cfg = load_experiment_config(args.config)
    seq = synthesize(cfg, progress=args.progress)
    write_bundle(seq, cfg.to_text(), args.out, pgm=args.pgm)
    return 0


def cmd_run(args) -> int:
    bundle = read_bundle(args.bundle)
    cfg = _bundle_config(args, bundle)
    result = run_pipeline(cfg, bundle, progress=args.progress)
    result.write(args.out)
    logger.info("estimated %d poses, results in %s", len(result.estimate), args.out)
    return 0


def cmd_eval(args) -> int:
    est = read_tum(args.est)
    gt = read_tum(args.gt)
    _emit(trajectory_metrics(est, gt, args.max_dt))
    return 0


def frame_mesh(bundle, cfg: ExperimentConfig, frame: int) -> Mesh3D:
    """Mesh of the selected landmarks of one keyframe at ground-truth depth."""
    if not 0 <= frame < len(bundle):
        raise BadBundle(f"frame {frame} outside bundle of {len(bundle)} keyframes")
    T_wc = bundle.gt.poses[frame] @ bundle.T_bc
    rendered = RenderedKeyframe(bundle.images[frame], bundle.depths[frame], bundle.plane_ids[frame], T_wc)
    sel = select_points(rendered, cfg.estimator.points_per_keyframe)
    try:
        tri = delaunay2d(sel.pixels)
    except (TooFewPoints, AllCollinear) as e:
        raise BadBundle(f"frame {frame} has no usable landmarks: {e}") from e
    depths = {i: float(rho) for i, rho in enumerate(sel.inv_depths)}
    return lift_to_3d(tri, depths, T_wc, bundle.camera, cfg.estimator.max_edge_3d)


def cmd_detect(args) -> int:
    bundle = read_bundle(args.bundle)
    cfg = _bundle_config(args, bundle)
    mesh = frame_mesh(bundle, cfg, args.frame)
    if args.ply:
        mesh.save_ply(args.ply)
    planes = detect_planes(mesh, cfg.estimator)
    sys.stdout.write(detection_report(planes) + "\n")
    return 0


def cmd_experiments(args) -> int:
    cfg = load_experiment_config(args.config)
    session = None
    if args.record:
        init_db()
        session = get_session()
    try:
        if args.experiment == "ablation":
            summary = experiments.ablation(cfg, args.runs, session, progress=args.progress)
        elif args.experiment == "sweep":
            summary = experiments.sigma_sweep(cfg, runs=args.runs, session=session, progress=args.progress)
        else:
            summary = experiments.stability(cfg, args.windows, session, progress=args.progress)
    finally:
        if session is not None:
            session.close()
    if args.out:
        experiments.write_summary(args.out, summary)
    _emit(_compact(summary))
    return 0


def _compact(summary: dict) -> dict:
    """Drop per-keyframe series from what is printed."""
    out = {}
    for k, v in summary.items():
        if isinstance(v, dict):
            out[k] = _compact(v)
        elif isinstance(v, list) and v and isinstance(v[0], float):
            out[k] = {"count": len(v), "mean": float(np.mean(v))}
        else:
            out[k] = v
    return out
