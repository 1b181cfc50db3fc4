"""SQLAlchemy models: ExperimentRun -> RunMetric."""

from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


def _utcnow():
    return datetime.now(timezone.utc)


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True)
    experiment = Column(String(50), nullable=False)  # ablation, sweep, stability
    seed = Column(Integer, default=0)
    variant = Column(String(100), default="")  # e.g. planes=on, sigma=11
    status = Column(String(20), default="running")  # running, complete, failed
    created_at = Column(DateTime, default=_utcnow)

    metrics = relationship("RunMetric", back_populates="run", cascade="all, delete-orphan",
                           order_by="RunMetric.name")

    def to_dict(self):
        return {
            "id": self.id, "experiment": self.experiment, "seed": self.seed,
            "variant": self.variant, "status": self.status,
            "created_at": self.created_at.isoformat() if self.created_at else None,
            "metrics": {m.name: m.value for m in self.metrics} if self.metrics else {},
        }


class RunMetric(Base):
    __tablename__ = "run_metrics"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False)
    name = Column(String(50), nullable=False)
    value = Column(Float)

    run = relationship("ExperimentRun", back_populates="metrics")

    def to_dict(self):
        return {"id": self.id, "run_id": self.run_id, "name": self.name, "value": self.value}
