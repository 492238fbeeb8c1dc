import hashlib
import json
from datetime import datetime, timezone
from typing import List

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import Session, relationship

from database import Base
from schemas import RadialNetwork, RunConfig


class SimulationRun(Base):
    __tablename__ = "simulation_runs"

    id = Column(Integer, primary_key=True, index=True)
    controller = Column(String, index=True, nullable=False)
    network_digest = Column(String(64), index=True, nullable=False)
    seed = Column(Integer, nullable=False)
    instants = Column(Integer, nullable=False)
    avv_worst_bus = Column(Float, nullable=False)
    worst_bus = Column(Integer, nullable=False)
    max_violation = Column(Float, nullable=False)
    max_capacity_violation = Column(Float, nullable=False, default=0.0)
    mean_iter_time_ms = Column(Float, nullable=False, default=0.0)
    # RunConfig as JSON text
    config_json = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), default=lambda: datetime.now(timezone.utc))

    bus_violations = relationship("BusViolation", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<SimulationRun(id={self.id}, controller='{self.controller}', avv_worst_bus={self.avv_worst_bus:.3e})>"


class BusViolation(Base):
    __tablename__ = "bus_violations"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("simulation_runs.id"), nullable=False)
    bus = Column(Integer, nullable=False)
    avv = Column(Float, nullable=False)

    run = relationship("SimulationRun", back_populates="bus_violations")

    def __repr__(self):
        return f"<BusViolation(run_id={self.run_id}, bus={self.bus}, avv={self.avv:.3e})>"


def network_digest(net: RadialNetwork) -> str:
    payload = json.dumps(net.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def record_run(session: Session, result, net: RadialNetwork, run_cfg: RunConfig) -> SimulationRun:
    """Store one RunResult and its per-bus AVV."""
    m = result.metrics
    run = SimulationRun(
        controller=result.controller,
        network_digest=network_digest(net),
        seed=run_cfg.seed,
        instants=result.instants,
        avv_worst_bus=m.avv_worst_bus,
        worst_bus=m.worst_bus,
        max_violation=m.max_violation,
        max_capacity_violation=m.max_capacity_violation,
        mean_iter_time_ms=m.mean_iter_time,
        config_json=run_cfg.model_dump_json(),
    )
    run.bus_violations = [BusViolation(bus=b, avv=a) for b, a in enumerate(m.avv_per_bus, start=1)]
    session.add(run)
    session.commit()
    session.refresh(run)
    return run


def recent_runs(session: Session, limit: int = 20) -> List[SimulationRun]:
    return (
        session.query(SimulationRun)
        .order_by(SimulationRun.created_at.desc(), SimulationRun.id.desc())
        .limit(limit)
        .all()
    )
