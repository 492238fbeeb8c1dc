"""
Unit tests for the AC plant, the linear voltage model and measurements.
"""
import numpy as np
import pytest

from app.errors import DimensionError, PowerFlowDivergedError
from factories import make_chain, rated
from grid_model import build_sensitivities
from power_flow import (
    FeederPlant,
    MeasurementConfig,
    PowerFlowSolution,
    PowerInjection,
    VoltageProfile,
    linear_voltage,
    measure,
    solve_ac,
)


@pytest.mark.unit
class TestSolveAc:
    """Test cases for the backward/forward sweep."""

    def test_zero_injection(self, chain3):
        sol = solve_ac(chain3, PowerInjection(p=np.zeros(3), q=np.zeros(3)))
        assert sol.converged
        np.testing.assert_allclose(sol.voltages.v, chain3.v0)

    def test_two_bus_demand(self):
        """r = x = 0.01 pu with 0.1 pu demand gives |v1| close to 0.999."""
        net = make_chain(1, r=0.01, x=0.01)
        sol = solve_ac(net, PowerInjection(p=np.array([-0.1]), q=np.array([0.0])))
        assert sol.converged
        assert sol.voltages.v[0] == pytest.approx(0.99900, abs=1e-4)

    def test_residual_within_tolerance(self, feeder10, peak_injections):
        p_d, q_d, p_g = peak_injections
        sol = solve_ac(feeder10, PowerInjection.from_parts(np.zeros(10), p_d, q_d, p_g), tol=1e-9)
        assert sol.converged
        assert sol.residual <= 1e-9

    def test_deterministic(self, feeder10, peak_injections):
        inj = PowerInjection.from_parts(np.zeros(10), *peak_injections)
        a = solve_ac(feeder10, inj)
        b = solve_ac(feeder10, inj)
        assert np.array_equal(a.voltages.v, b.voltages.v)

    def test_reports_divergence(self):
        """An impossible load is flagged instead of returning silently."""
        net = make_chain(2, r=0.5, x=0.5)
        sol = solve_ac(net, PowerInjection(p=np.array([-5.0, -5.0]), q=np.array([-5.0, -5.0])), max_iter=30)
        assert not sol.converged
        assert sol.residual > 1e-8

    def test_wrong_length(self, chain3):
        with pytest.raises(DimensionError):
            solve_ac(chain3, PowerInjection(p=np.zeros(2), q=np.zeros(2)))

    def test_injection_shapes_must_agree(self):
        with pytest.raises(DimensionError):
            PowerInjection(p=np.zeros(2), q=np.zeros(3))

    def test_nonfinite_injection(self):
        with pytest.raises(ValueError):
            PowerInjection(p=np.array([np.nan]), q=np.array([0.0]))

    def test_linear_model_fidelity(self, feeder20, sens20, rng):
        """Light loading keeps the AC voltages within 0.01 pu of the linear model."""
        for _ in range(10):
            p = rng.uniform(-0.5, 0.5, feeder20.n) * 0.5 / feeder20.n
            q = rng.uniform(-0.5, 0.5, feeder20.n) * 0.5 / feeder20.n
            sol = solve_ac(feeder20, PowerInjection(p=p, q=q))
            zeros = np.zeros(feeder20.n)
            v_lin = linear_voltage(sens20, feeder20, q, zeros, zeros, p)
            assert np.max(np.abs(v_lin.v - sol.voltages.v)) <= 0.01


@pytest.mark.unit
class TestLinearVoltage:
    """Test cases for linear_voltage."""

    def test_zero_injection(self, chain3):
        sens = build_sensitivities(chain3)
        z = np.zeros(3)
        np.testing.assert_allclose(linear_voltage(sens, chain3, z, z, z, z).v, chain3.v0)

    def test_single_cable_reactive_step(self):
        net = make_chain(1, r=0.01, x=0.1)
        sens = build_sensitivities(net)
        z = np.zeros(1)
        v = linear_voltage(sens, net, np.array([0.5]), z, z, z)
        assert v.v[0] == pytest.approx(net.v0 + 0.05)

    def test_superposition(self, chain3, rng):
        sens = build_sensitivities(chain3)
        z = np.zeros(3)
        a_q, b_q = rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.1
        a_p, b_p = rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.1
        va = linear_voltage(sens, chain3, a_q, z, z, a_p).v - chain3.v0
        vb = linear_voltage(sens, chain3, b_q, z, z, b_p).v - chain3.v0
        vab = linear_voltage(sens, chain3, a_q + b_q, z, z, a_p + b_p).v - chain3.v0
        np.testing.assert_allclose(vab, va + vb, atol=1e-15)

    def test_dimension_mismatch(self, chain3):
        sens = build_sensitivities(chain3)
        with pytest.raises(DimensionError):
            linear_voltage(sens, chain3, np.zeros(2), np.zeros(3), np.zeros(3), np.zeros(3))


@pytest.mark.unit
class TestMeasure:
    """Test cases for measurement noise."""

    def _solution(self, v):
        return PowerFlowSolution(voltages=VoltageProfile(v=np.asarray(v, dtype=float)),
                                 iterations=1, residual=0.0, converged=True)

    def test_zero_noise_is_exact(self):
        sol = self._solution([1.01, 1.02])
        assert measure(sol, MeasurementConfig()) is sol.voltages

    def test_seeded_noise_reproducible(self):
        sol = self._solution([1.01, 1.02])
        cfg = MeasurementConfig(noise_std=1e-4, seed=3)
        assert np.array_equal(measure(sol, cfg).v, measure(sol, cfg).v)

    def test_sample_mean(self):
        sol = self._solution([1.03])
        cfg = MeasurementConfig(noise_std=1e-3, seed=0)
        rng = np.random.default_rng(0)
        draws = np.array([measure(sol, cfg, rng).v[0] for _ in range(10_000)])
        assert abs(draws.mean() - 1.03) <= 3 * 1e-3 / 100

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError):
            MeasurementConfig(noise_std=-1.0)


@pytest.mark.unit
class TestFeederPlant:
    """Test cases for the measurement callback."""

    def test_counts_solves(self, feeder10, peak_injections):
        plant = FeederPlant(feeder10)
        plant.set_disturbance(*peak_injections)
        plant(np.zeros(10))
        plant(np.zeros(10))
        assert plant.solves == 2

    def test_peak_overvoltage(self, feeder10, peak_injections):
        plant = FeederPlant(feeder10)
        plant.set_disturbance(*peak_injections)
        assert plant(np.zeros(10)).v.max() > feeder10.v_max

    def test_divergence_raises(self):
        net = make_chain(2, r=0.5, x=0.5)
        plant = FeederPlant(net, max_iter=30)
        plant.set_disturbance(np.array([5.0, 5.0]), np.array([5.0, 5.0]), np.zeros(2))
        with pytest.raises(PowerFlowDivergedError) as exc_info:
            plant(np.zeros(2))
        assert exc_info.value.iterations > 0
        assert exc_info.value.exit_code == 4


@pytest.mark.integration
class TestEmpiricalSensitivity:
    """Finite differences of the AC plant reproduce X."""

    def test_columns_match_x(self, feeder20, sens20):
        p_d = 0.05 * rated(feeder20)
        plant = FeederPlant(feeder20, tol=1e-11, max_iter=200)
        plant.set_disturbance(p_d, 0.3 * p_d, np.zeros(feeder20.n))
        q0 = np.zeros(feeder20.n)
        base = plant.solve(q0).voltages.v
        delta = 1e-4
        for i in range(feeder20.n):
            dq = q0.copy()
            dq[i] += delta
            column = (plant.solve(dq).voltages.v - base) / delta
            np.testing.assert_allclose(column, sens20.X[:, i], rtol=0.05)
