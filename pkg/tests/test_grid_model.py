"""
Unit tests for the radial network model.

Covers topology validation, cable paths, the sensitivity matrices and the
sparsity of their inverse, the synthetic feeder generator and the network
file format.
"""
import numpy as np
import pytest

from app.errors import NetworkFormatError, SensitivityError, TopologyError
from grid_model import (
    build_sensitivities,
    cable_vectors,
    electrical_neighbors,
    generate_synthetic_feeder,
    load_network,
    path_cables,
    path_matrix,
    save_network,
    validate_topology,
)
from power_flow import PowerInjection, solve_ac
from schemas import Cable, DerSpec, RadialNetwork
from factories import make_chain, make_star


def _net(cables, n, **kwargs):
    return RadialNetwork(
        buses=list(range(n + 1)),
        cables=[Cable(from_bus=f, to_bus=t, resistance=r, reactance=x) for f, t, r, x in cables],
        ders={b: DerSpec(bus=b) for b in range(1, n + 1)},
        **kwargs,
    )


@pytest.mark.unit
class TestValidateTopology:
    """Test cases for validate_topology."""

    def test_valid_chain(self):
        """A well-formed chain has no violations."""
        net = _net([(0, 1, 0.01, 0.1), (1, 2, 0.02, 0.2)], 2)
        assert validate_topology(net) == []

    def test_cycle_detected(self):
        """A triangle through the substation is reported as a cycle."""
        net = RadialNetwork(
            buses=[0, 1, 2],
            cables=[
                Cable(from_bus=0, to_bus=1, resistance=0.01, reactance=0.1),
                Cable(from_bus=1, to_bus=2, resistance=0.01, reactance=0.1),
                Cable(from_bus=2, to_bus=0, resistance=0.01, reactance=0.1),
            ],
            ders={1: DerSpec(bus=1), 2: DerSpec(bus=2)},
        )
        violations = validate_topology(net)
        assert any(v.startswith("cycle detected") for v in violations)

    def test_zero_resistance(self):
        """Zero resistance is reported with the cable endpoints."""
        net = _net([(0, 1, 0.01, 0.1), (1, 2, 0.0, 0.2)], 2)
        assert "nonpositive resistance at (1,2)" in validate_topology(net)

    def test_negative_reactance(self):
        net = _net([(0, 1, 0.01, -0.1)], 1)
        assert "nonpositive reactance at (0,1)" in validate_topology(net)

    def test_disconnected_bus(self):
        """A bus not reachable from the substation is reported."""
        net = RadialNetwork(
            buses=[0, 1, 2, 3],
            cables=[
                Cable(from_bus=0, to_bus=1, resistance=0.01, reactance=0.1),
                Cable(from_bus=2, to_bus=3, resistance=0.01, reactance=0.1),
                Cable(from_bus=3, to_bus=2, resistance=0.01, reactance=0.1),
            ],
            ders={b: DerSpec(bus=b) for b in (1, 2, 3)},
        )
        violations = validate_topology(net)
        assert "bus 2 disconnected from substation" in violations
        assert "bus 3 disconnected from substation" in violations

    def test_orientation_error(self):
        """Cables must point away from the substation."""
        net = _net([(0, 1, 0.01, 0.1), (2, 1, 0.01, 0.1)], 2)
        assert "cable (2,1) oriented away from substation" in validate_topology(net)

    def test_missing_der(self):
        net = RadialNetwork(
            buses=[0, 1, 2],
            cables=[
                Cable(from_bus=0, to_bus=1, resistance=0.01, reactance=0.1),
                Cable(from_bus=1, to_bus=2, resistance=0.01, reactance=0.1),
            ],
            ders={1: DerSpec(bus=1)},
        )
        assert "bus 2 has no DerSpec" in validate_topology(net)

    def test_wrong_cable_count(self):
        net = RadialNetwork(
            buses=[0, 1, 2],
            cables=[Cable(from_bus=0, to_bus=1, resistance=0.01, reactance=0.1)],
            ders={1: DerSpec(bus=1), 2: DerSpec(bus=2)},
        )
        violations = validate_topology(net)
        assert "expected 2 cables for 3 buses, found 1" in violations
        assert "bus 2 disconnected from substation" in violations

    def test_unknown_endpoint(self):
        net = RadialNetwork(
            buses=[0, 1],
            cables=[Cable(from_bus=0, to_bus=5, resistance=0.01, reactance=0.1)],
            ders={1: DerSpec(bus=1)},
        )
        assert "cable (0,5) references unknown bus 5" in validate_topology(net)

    @pytest.mark.parametrize("seed", range(10))
    def test_generated_feeders_are_valid(self, seed):
        net = generate_synthetic_feeder(seed, 15, branching="random")
        assert validate_topology(net) == []


@pytest.mark.unit
class TestPathCables:
    """Test cases for path_cables and the path matrix."""

    def test_chain_path(self):
        net = make_chain(2)
        assert [(c.from_bus, c.to_bus) for c in path_cables(net, 2)] == [(0, 1), (1, 2)]

    def test_branch_path(self):
        net = make_star(2)
        assert [(c.from_bus, c.to_bus) for c in path_cables(net, 3)] == [(0, 1), (1, 3)]

    def test_depth_one(self):
        net = make_star(3)
        assert [(c.from_bus, c.to_bus) for c in path_cables(net, 1)] == [(0, 1)]

    def test_unknown_bus(self):
        with pytest.raises(TopologyError) as exc_info:
            path_cables(make_chain(2), 7)
        assert "unknown bus id 7" in str(exc_info.value)

    def test_substation_has_no_path(self):
        with pytest.raises(TopologyError):
            path_cables(make_chain(2), 0)

    def test_path_matrix_matches_paths(self):
        net = make_star(3)
        M = path_matrix(net)
        for bus in range(1, net.n + 1):
            expected = {c.to_bus for c in path_cables(net, bus)}
            assert {j + 1 for j in np.flatnonzero(M[bus - 1])} == expected

    def test_neighbors_are_sorted_and_symmetric(self):
        neighbors = electrical_neighbors(make_star(3))
        assert neighbors[1] == [0, 2, 3, 4]
        for i, adj in neighbors.items():
            for j in adj:
                assert i in neighbors[j]


@pytest.mark.unit
class TestBuildSensitivities:
    """Test cases for build_sensitivities."""

    def test_chain_reactance_matrix(self):
        """X entries are reactance sums over shared path cables."""
        net = _net([(0, 1, 0.01, 0.1), (1, 2, 0.02, 0.2)], 2)
        sens = build_sensitivities(net)
        np.testing.assert_allclose(sens.X, [[0.1, 0.1], [0.1, 0.3]])
        np.testing.assert_allclose(sens.R, [[0.01, 0.01], [0.01, 0.03]])

    def test_star_inverse_is_sparse(self):
        """Buses 2 and 3 hang off bus 1, so X_inv couples them with zero."""
        net = _net([(0, 1, 0.01, 0.1), (1, 2, 0.01, 0.2), (1, 3, 0.01, 0.3)], 3)
        sens = build_sensitivities(net)
        assert abs(sens.X_inv[1, 2]) <= 1e-9 * np.abs(sens.X_inv).max()
        assert not sens.adjacency[1, 2]
        assert sens.adjacency[0, 1] and sens.adjacency[0, 2]

    def test_single_cable(self):
        sens = build_sensitivities(_net([(0, 1, 0.01, 0.1)], 1))
        np.testing.assert_allclose(sens.X, [[0.1]])
        np.testing.assert_allclose(sens.X_inv, [[10.0]])

    def test_inverse_rows_follow_adjacency(self):
        sens = build_sensitivities(make_chain(4))
        assert [j for j, _ in sens.inverse_rows[0]] == [0, 1]
        assert [j for j, _ in sens.inverse_rows[2]] == [1, 2, 3]
        for i, row in enumerate(sens.inverse_rows):
            for j, w in row:
                assert w == sens.X_inv[i, j]

    def test_invalid_network_rejected(self):
        net = _net([(0, 1, 0.01, 0.1), (1, 2, 0.0, 0.2)], 2)
        with pytest.raises(TopologyError) as exc_info:
            build_sensitivities(net)
        assert "nonpositive resistance" in str(exc_info.value)

    def test_sensitivity_error_names_matrix(self):
        err = SensitivityError("matrix is not positive definite", matrix="X")
        assert str(err) == "X: matrix is not positive definite"
        assert err.exit_code == 4

    @pytest.mark.parametrize("seed", range(20))
    def test_random_tree_properties(self, seed):
        """Symmetric, positive definite and path-sum dominated diagonal."""
        rng = np.random.default_rng(seed)
        net = generate_synthetic_feeder(seed, int(rng.integers(2, 51)), branching="random")
        sens = build_sensitivities(net)
        np.testing.assert_allclose(sens.X, sens.X.T)
        assert sens.lambda_min > 0
        assert np.all(np.diag(sens.X)[:, None] >= sens.X - 1e-15)
        assert np.linalg.norm(sens.X_inv @ sens.X - np.eye(net.n), 2) <= 1e-9

    def test_inaccurate_inverse_rejected(self, monkeypatch):
        """The identity residual bound is absolute, not scaled by cond(X)."""
        import grid_model

        exact = grid_model.scipy.linalg.cho_solve
        monkeypatch.setattr(grid_model.scipy.linalg, "cho_solve", lambda factor, b: exact(factor, b) * (1 + 1e-8))
        with pytest.raises(SensitivityError) as exc_info:
            build_sensitivities(make_chain(3))
        assert exc_info.value.matrix == "X_inv"
        assert "deviates from identity" in str(exc_info.value)

    def test_reactance_monotonicity(self):
        """Raising one cable's reactance only moves entries whose paths use it."""
        base = make_star(3)
        sens = build_sensitivities(base)
        cables = [c if c.to_bus != 3 else c.model_copy(update={"reactance": c.reactance + 0.05}) for c in base.cables]
        bumped = build_sensitivities(base.model_copy(update={"cables": cables}))
        delta = bumped.X - sens.X
        expected = np.zeros_like(delta)
        expected[2, 2] = 0.05
        np.testing.assert_allclose(delta, expected, atol=1e-15)


@pytest.mark.unit
class TestSyntheticFeeder:
    """Test cases for generate_synthetic_feeder."""

    def test_deterministic(self):
        assert generate_synthetic_feeder(1, 10) == generate_synthetic_feeder(1, 10)

    def test_seed_sensitivity(self):
        a, _ = cable_vectors(generate_synthetic_feeder(1, 10))
        b, _ = cable_vectors(generate_synthetic_feeder(2, 10))
        assert not np.allclose(a, b)

    def test_too_small(self):
        with pytest.raises(TopologyError):
            generate_synthetic_feeder(1, 1)

    def test_unknown_branching(self):
        with pytest.raises(TopologyError):
            generate_synthetic_feeder(1, 5, branching="ring")

    def test_impedance_range(self):
        r, x = cable_vectors(generate_synthetic_feeder(4, 30))
        assert np.all((r >= 0.005) & (r <= 0.05))
        assert np.all((x >= 0.005) & (x <= 0.05))

    def test_der_limits_symmetric(self):
        net = generate_synthetic_feeder(4, 12, q_ratio=0.5)
        for der in net.ders.values():
            assert der.q_min == pytest.approx(-0.5 * der.p_rated)
            assert der.q_max == pytest.approx(0.5 * der.p_rated)

    def test_default_der_limits(self):
        for der in generate_synthetic_feeder(4, 12).ders.values():
            assert der.q_max == pytest.approx(0.2 * der.p_rated)
            assert der.q_min == pytest.approx(-0.2 * der.p_rated)

    def test_fixed_xr_ratio(self):
        r, x = cable_vectors(generate_synthetic_feeder(4, 12, xr_ratio=1.5))
        np.testing.assert_allclose(x, 1.5 * r)
        # topology and resistances are the same draws as without the ratio
        r_free, _ = cable_vectors(generate_synthetic_feeder(4, 12))
        np.testing.assert_array_equal(r, r_free)

    def test_nonpositive_xr_ratio(self):
        with pytest.raises(TopologyError):
            generate_synthetic_feeder(4, 12, xr_ratio=0.0)

    def test_linear_peak_calibrated(self):
        net = generate_synthetic_feeder(5, 20, target_peak_voltage=1.07)
        sens = build_sensitivities(net)
        p_rated = np.array([net.ders[b].p_rated for b in range(1, net.n + 1)])
        assert (net.v0 + sens.R @ p_rated).max() == pytest.approx(1.07)

    @pytest.mark.slow
    def test_96_bus_peak_overvoltage(self):
        """Full PV without control lifts the AC voltage above v_max."""
        net = generate_synthetic_feeder(1, 96, branching="chain-heavy")
        p_rated = np.array([net.ders[b].p_rated for b in range(1, net.n + 1)])
        sol = solve_ac(net, PowerInjection(p=p_rated, q=np.zeros(net.n)))
        assert sol.converged
        assert sol.voltages.v.max() > net.v_max


@pytest.mark.unit
class TestNetworkFile:
    """Test cases for load_network and save_network."""

    def test_round_trip(self, tmp_path):
        net = make_chain(2, r=0.01, x=0.1)
        path = tmp_path / "chain.net"
        save_network(net, path)
        loaded = load_network(path)
        assert loaded.buses == net.buses
        assert loaded.v0 == net.v0
        for a, b in zip(loaded.cables, net.cables):
            assert (a.from_bus, a.to_bus) == (b.from_bus, b.to_bus)
            assert a.resistance == pytest.approx(b.resistance, rel=1e-12)
            assert a.reactance == pytest.approx(b.reactance, rel=1e-12)
        for bus, der in net.ders.items():
            assert loaded.ders[bus].q_max == pytest.approx(der.q_max, rel=1e-12)
            assert loaded.ders[bus].p_rated == pytest.approx(der.p_rated, rel=1e-12)

    def test_si_conversion(self, tmp_path):
        """0.16 ohm at 0.4 kV / 100 kVA is 0.1 pu; 10 kVar is 0.1 pu."""
        path = tmp_path / "si.net"
        path.write_text(
            "s_base = 100\nv_base = 0.4\nv0 = 1.0\n"
            "BUSES\n0\n1\nCABLES\n0,1,0.16,0.16\nDERS\n1,-10,10,1,20\n"
        )
        net = load_network(path)
        assert net.cables[0].resistance == pytest.approx(0.1)
        assert net.ders[1].q_min == pytest.approx(-0.1)
        assert net.ders[1].p_rated == pytest.approx(0.2)

    def test_duplicate_bus_id(self, tmp_path):
        path = tmp_path / "dup.net"
        path.write_text("s_base = 100\nv_base = 0.4\nv0 = 1.0\nBUSES\n0\n1\n1\n")
        with pytest.raises(NetworkFormatError) as exc_info:
            load_network(path)
        assert "duplicate bus id 1" in str(exc_info.value)
        assert exc_info.value.line == 7

    def test_missing_v0(self, tmp_path):
        path = tmp_path / "nov0.net"
        path.write_text("s_base = 100\nv_base = 0.4\nBUSES\n0\n1\nCABLES\n0,1,0.1,0.1\nDERS\n1,-1,1,1,1\n")
        with pytest.raises(NetworkFormatError) as exc_info:
            load_network(path)
        assert "missing slack voltage" in str(exc_info.value)

    def test_bad_number_reports_field(self, tmp_path):
        path = tmp_path / "bad.net"
        path.write_text("s_base = 100\nv_base = 0.4\nv0 = 1.0\nBUSES\n0\n1\nCABLES\n0,1,abc,0.1\n")
        with pytest.raises(NetworkFormatError) as exc_info:
            load_network(path)
        assert exc_info.value.field == "r_ohm"
        assert str(exc_info.value).startswith("line 8:")

    def test_missing_file(self, tmp_path):
        with pytest.raises(NetworkFormatError):
            load_network(tmp_path / "absent.net")
