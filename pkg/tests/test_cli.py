"""
End-to-end tests for the voltlab command line.
"""
import pandas as pd
import pytest

from cli import main


@pytest.fixture(autouse=True)
def no_ledger(monkeypatch):
    monkeypatch.delenv("VOLTLAB_DB_URL", raising=False)


@pytest.fixture
def workspace(tmp_path):
    """A generated 8-bus feeder with a short profile file."""
    net = tmp_path / "feeder.net"
    profiles = tmp_path / "profiles.csv"
    assert main(["gen-network", "--seed", "4", "--buses", "8", "--out", str(net)]) == 0
    assert main(["gen-profiles", "--seed", "4", "--net", str(net), "--hours", "0.01", "--dt", "6",
                 "--out", str(profiles)]) == 0
    return tmp_path, net, profiles


def _io(workspace, *extra):
    root, net, profiles = workspace
    return ["--net", str(net), "--profiles", str(profiles), "--out", str(root / "out"), *extra]


@pytest.mark.integration
class TestGenerate:
    """Test cases for gen-network and gen-profiles."""

    def test_network_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.net", tmp_path / "b.net"
        assert main(["gen-network", "--seed", "9", "--buses", "12", "--out", str(a)]) == 0
        assert main(["gen-network", "--seed", "9", "--buses", "12", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_profiles_header(self, workspace):
        _, _, profiles = workspace
        frame = pd.read_csv(profiles)
        assert list(frame.columns) == ["t", "bus", "p_demand", "q_demand", "p_gen"]
        assert sorted(frame["bus"].unique()) == list(range(1, 8))

    def test_check(self, workspace, capsys):
        _, net, _ = workspace
        assert main(["check", "--net", str(net)]) == 0
        out = capsys.readouterr().out
        assert "radial" in out
        assert "most sensitive bus" in out


@pytest.mark.integration
class TestRun:
    """Test cases for run and compare."""

    def test_run_without_control(self, workspace, capsys):
        assert main(["run", *_io(workspace, "--controller", "none")]) == 0
        out_dir = workspace[0] / "out"
        for name in ("voltages.csv", "setpoints.csv", "duals.csv", "metrics.csv", "trace.csv"):
            assert (out_dir / name).exists()
        assert "AVV worst bus" in capsys.readouterr().out

    def test_run_agents_with_message_log(self, workspace, capsys):
        messages = workspace[0] / "messages.csv"
        code = main(["run", *_io(workspace, "--controller", "nested", "--messages", str(messages),
                                 "--setpoints-per-sample", "6")])
        assert code == 0
        assert "locality:               pass" in capsys.readouterr().out
        assert len(pd.read_csv(messages)) > 0

    def test_run_static(self, workspace):
        assert main(["run", *_io(workspace, "--controller", "centralized", "--static",
                                 "--set", "max_outer=20")]) == 0
        trace = pd.read_csv(workspace[0] / "out" / "trace.csv")
        assert len(trace) <= 20

    def test_compare(self, workspace, capsys):
        code = main(["compare", *_io(workspace, "--controllers", "none", "centralized", "droop")])
        assert code == 0
        table = pd.read_csv(workspace[0] / "out" / "compare.csv")
        assert set(table["controller"]) == {"none", "centralized", "droop"}
        assert "most sensitive bus" in capsys.readouterr().out

    def test_ledger_and_history(self, workspace, capsys):
        url = f"sqlite:///{workspace[0] / 'runs.db'}"
        assert main(["run", *_io(workspace, "--controller", "droop", "--db", url)]) == 0
        assert main(["history", "--db", url]) == 0
        out = capsys.readouterr().out
        assert "Stored run #1" in out
        assert "droop" in out.splitlines()[-1]


@pytest.mark.unit
class TestExitCodes:
    """Usage and input errors map to distinct exit codes."""

    def test_missing_command(self):
        assert main([]) == 2

    def test_unknown_flag(self, workspace):
        assert main(["run", *_io(workspace, "--bogus")]) == 2

    def test_unknown_controller(self, workspace):
        assert main(["run", *_io(workspace, "--controller", "fuzzy")]) == 2

    def test_unknown_config_key(self, workspace, capsys):
        assert main(["run", *_io(workspace, "--set", "gain=3")]) == 2
        assert "gain" in capsys.readouterr().err

    def test_malformed_override(self, workspace):
        assert main(["run", *_io(workspace, "--set", "alpha")]) == 2

    def test_missing_network(self, tmp_path):
        assert main(["check", "--net", str(tmp_path / "absent.net")]) == 3

    def test_missing_profiles(self, workspace):
        root, net, _ = workspace
        args = ["run", "--net", str(net), "--profiles", str(root / "absent.csv"), "--out", str(root / "out")]
        assert main(args) == 3
