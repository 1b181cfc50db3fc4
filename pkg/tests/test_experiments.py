import json
import math
from types import SimpleNamespace

import pytest

from planevio.database import get_session, init_db
from planevio.errors import IoFailure
from planevio.models import ExperimentRun, RunMetric
from planevio.services import experiments
from planevio.services.experiments import floor_series, record_run, write_summary


@pytest.fixture
def session(tmp_path):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    init_db(url)
    s = get_session(url)
    yield s
    s.close()


def test_record_run_stores_numeric_metrics(session):
    run = record_run(session, "ablation", 3, "planes=on",
                     {"rmse": 0.012, "planes": 2, "ok": True, "label": "x"})
    assert run.id is not None
    stored = session.query(ExperimentRun).one()
    assert stored.experiment == "ablation"
    assert stored.status == "complete"
    assert stored.to_dict()["metrics"] == {"planes": 2.0, "rmse": 0.012}
    assert session.query(RunMetric).count() == 2


def test_record_run_without_session():
    assert record_run(None, "sweep", 0, "sigma=11", {"rmse": 1.0}) is None


def test_deleting_run_cascades_to_metrics(session):
    run = record_run(session, "sweep", 0, "sigma=11", {"rmse": 0.5, "scale_error": 0.01})
    session.delete(run)
    session.commit()
    assert session.query(RunMetric).count() == 0


def test_floor_series_follows_longest_tracked_floor():
    history = [
        {"keyframe": 0, "plane_id": 0, "kind": "horizontal", "phi": None, "d": 1.0},
        {"keyframe": 0, "plane_id": 1, "kind": "vertical", "phi": 0.0, "d": -2.0},
        {"keyframe": 1, "plane_id": 0, "kind": "horizontal", "phi": None, "d": 1.01},
        {"keyframe": 1, "plane_id": 4, "kind": "horizontal", "phi": None, "d": 3.0},
        {"keyframe": 2, "plane_id": 0, "kind": "horizontal", "phi": None, "d": 0.99},
    ]
    assert floor_series(SimpleNamespace(plane_history=history)) == [1.0, 1.01, 0.99]
    assert floor_series(SimpleNamespace(plane_history=history[1:2])) == []


def test_write_summary(tmp_path):
    write_summary(tmp_path / "summary.json", {"total": 2, "runs": []})
    assert json.loads((tmp_path / "summary.json").read_text()) == {"total": 2, "runs": []}
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(IoFailure):
        write_summary(blocker / "summary.json", {})


@pytest.mark.slow
def test_ablation_records_both_variants(session, small_cfg):
    summary = experiments.ablation(small_cfg, runs=1, session=session)
    assert summary["total"] == 1
    row = summary["runs"][0]
    assert math.isfinite(row["rmse_on"]) and math.isfinite(row["rmse_off"])
    assert row["improvement"] == pytest.approx(row["rmse_off"] - row["rmse_on"])
    variants = sorted(r.variant for r in session.query(ExperimentRun).all())
    assert variants == ["planes=off", "planes=on"]


@pytest.mark.slow
def test_sigma_sweep_curves_are_monotone(small_cfg):
    summary = experiments.sigma_sweep(small_cfg, sigmas=(11.0,), runs=1, thresholds=(0.001, 1.0, 100.0))
    (row,) = summary["table"]
    fractions = [c["fraction"] for c in row["curve"]]
    assert fractions == sorted(fractions)
    assert fractions[-1] == 1.0


@pytest.mark.slow
def test_stability_reports_both_variants(session, small_cfg):
    summary = experiments.stability(small_cfg, windows=2, session=session)
    assert set(summary) == {"with_prior", "without_prior"}
    for row in summary.values():
        assert math.isfinite(row["rmse"])
        assert len(row["floor_d"]) < 2 or row["std"] >= 0.0
    tags = sorted(r.variant for r in session.query(ExperimentRun).all())
    assert tags == ["with_prior", "without_prior"]
