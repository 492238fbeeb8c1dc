"""
Unit tests for the run ledger models.

Uses a throwaway SQLite file per test; the tables are created through
database.session_factory exactly as the CLI does.
"""
import numpy as np
import pytest

from controllers import build_controller
from database import database_url, session_factory
from models import BusViolation, SimulationRun, network_digest, recent_runs, record_run
from scenario import ScenarioTimeSeries, run_dynamic
from schemas import RunConfig


@pytest.fixture
def session(tmp_path):
    Session = session_factory(f"sqlite:///{tmp_path / 'ledger.db'}")
    with Session() as s:
        yield s


@pytest.fixture
def droop_result(feeder10, sens10, peak_injections):
    ts = ScenarioTimeSeries.constant(*peak_injections, samples=3)
    return run_dynamic(feeder10, ts, build_controller("droop", feeder10, sens10), RunConfig(setpoints_per_sample=1))


@pytest.mark.unit
class TestDatabaseUrl:
    """Test cases for database_url."""

    def test_explicit_wins(self, monkeypatch):
        monkeypatch.setenv("VOLTLAB_DB_URL", "sqlite:///env.db")
        assert database_url("sqlite:///explicit.db") == "sqlite:///explicit.db"

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("VOLTLAB_DB_URL", "sqlite:///env.db")
        assert database_url() == "sqlite:///env.db"

    def test_default(self, monkeypatch):
        monkeypatch.delenv("VOLTLAB_DB_URL", raising=False)
        assert database_url().startswith("sqlite:///")


@pytest.mark.integration
class TestRunLedger:
    """Test cases for record_run and recent_runs."""

    def test_record_run(self, session, feeder10, droop_result):
        run = record_run(session, droop_result, feeder10, RunConfig(seed=5))
        assert run.id is not None
        assert run.controller == "droop"
        assert run.seed == 5
        assert run.instants == 3
        assert run.avv_worst_bus == droop_result.metrics.avv_worst_bus
        assert RunConfig.model_validate_json(run.config_json).seed == 5

    def test_bus_violations(self, session, feeder10, droop_result):
        run = record_run(session, droop_result, feeder10, RunConfig())
        rows = session.query(BusViolation).filter_by(run_id=run.id).order_by(BusViolation.bus).all()
        assert [r.bus for r in rows] == list(range(1, 11))
        np.testing.assert_allclose([r.avv for r in rows], droop_result.metrics.avv_per_bus)

    def test_recent_runs_newest_first(self, session, feeder10, droop_result):
        first = record_run(session, droop_result, feeder10, RunConfig(seed=1))
        second = record_run(session, droop_result, feeder10, RunConfig(seed=2))
        runs = recent_runs(session, limit=1)
        assert [r.id for r in runs] == [second.id]
        assert {r.id for r in recent_runs(session)} == {first.id, second.id}

    def test_delete_cascades(self, session, feeder10, droop_result):
        run = record_run(session, droop_result, feeder10, RunConfig())
        session.delete(run)
        session.commit()
        assert session.query(SimulationRun).count() == 0
        assert session.query(BusViolation).count() == 0

    def test_network_digest(self, feeder10, feeder20):
        assert network_digest(feeder10) == network_digest(feeder10.model_copy())
        assert network_digest(feeder10) != network_digest(feeder20)
        assert len(network_digest(feeder10)) == 64
