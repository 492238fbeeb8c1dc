"""
The physical plant: backward/forward sweep AC power flow for radial feeders,
the LinDistFlow voltage model, and noisy voltage measurement.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from app.errors import DimensionError, PowerFlowDivergedError
from grid_model import SensitivityMatrices, cable_vectors, path_matrix
from schemas import RadialNetwork

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
# extra sweeps after convergence; keeps finite differences of the plant smooth
POLISH_SWEEPS = 2


@dataclass(frozen=True)
class PowerInjection:
    """Net injections (DER minus demand) at buses 1..N in pu."""
    p: NDArray[np.float64]
    q: NDArray[np.float64]

    def __post_init__(self):
        if self.p.shape != self.q.shape:
            raise DimensionError(f"p has shape {self.p.shape} but q has shape {self.q.shape}")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.q))):
            raise ValueError("power injections must be finite")

    @classmethod
    def from_parts(cls, q_der, p_demand, q_demand, p_generation) -> "PowerInjection":
        return cls(
            p=np.asarray(p_generation, dtype=float) - np.asarray(p_demand, dtype=float),
            q=np.asarray(q_der, dtype=float) - np.asarray(q_demand, dtype=float),
        )


@dataclass(frozen=True)
class VoltageProfile:
    """Voltage magnitudes at buses 1..N in pu (slack excluded)."""
    v: NDArray[np.float64]

    def __post_init__(self):
        if np.any(self.v <= 0):
            raise ValueError("voltage magnitudes must be positive")

    def __len__(self) -> int:
        return len(self.v)


@dataclass(frozen=True)
class PowerFlowSolution:
    voltages: VoltageProfile
    iterations: int
    residual: float
    converged: bool


class MeasurementConfig(BaseModel):
    noise_std: float = Field(0.0, ge=0.0, description="Additive Gaussian noise (pu)")
    seed: int = 0

    model_config = ConfigDict(frozen=True)


class SweepSolver:
    """
    Backward/forward sweep for one network.

    The path incidence matrix M turns both sweeps into two matrix products:
    branch currents are M^T I (leaf-to-root sums) and voltage drops are
    M (z * I_branch) (root-to-leaf sums).
    """

    def __init__(self, net: RadialNetwork):
        self.net = net
        self.n = net.n
        self.M = path_matrix(net)
        r, x = cable_vectors(net)
        self.z = r + 1j * x
        parent = np.zeros(self.n, dtype=int)
        for cable in net.cables:
            parent[cable.to_bus - 1] = cable.from_bus
        self.parent = parent
        self.children = np.zeros((self.n, self.n))
        for b in range(self.n):
            if parent[b] != 0:
                self.children[parent[b] - 1, b] = 1.0

    def _mismatch(self, V: NDArray[np.complex128], s_load: NDArray[np.complex128]) -> float:
        v0 = self.net.v0
        v_parent = np.where(self.parent == 0, v0, V[np.maximum(self.parent - 1, 0)])
        i_branch = (v_parent - V) / self.z
        i_node = i_branch - self.children @ i_branch
        return float(np.max(np.abs(V * np.conj(i_node) - s_load))) if self.n else 0.0

    def solve(self, inj: PowerInjection, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> PowerFlowSolution:
        if len(inj.p) != self.n:
            raise DimensionError(f"injection vector has length {len(inj.p)}, network has {self.n} buses")
        if tol <= 0:
            raise ValueError("tolerance must be positive")
        v0 = self.net.v0
        s_load = -(inj.p + 1j * inj.q)
        V = np.full(self.n, v0, dtype=complex)
        residual = self._mismatch(V, s_load)
        iterations = 0
        while residual > tol and iterations < max_iter:
            V = self._sweep(V, s_load)
            iterations += 1
            if not np.all(np.isfinite(V)) or np.any(np.abs(V) < 1e-3):
                residual = float("inf")
                break
            residual = self._mismatch(V, s_load)

        converged = residual <= tol
        if converged:
            for _ in range(POLISH_SWEEPS if iterations else 0):
                V = self._sweep(V, s_load)
            residual = self._mismatch(V, s_load)
            magnitudes = np.abs(V)
        else:
            logger.warning("⚠️  Power flow did not converge after %d sweeps (residual %.3e)", iterations, residual)
            magnitudes = np.where(np.isfinite(np.abs(V)) & (np.abs(V) > 0), np.abs(V), v0)
        return PowerFlowSolution(
            voltages=VoltageProfile(v=magnitudes),
            iterations=iterations,
            residual=residual,
            converged=converged,
        )

    def _sweep(self, V, s_load):
        i_load = np.conj(s_load / V)
        i_branch = self.M.T @ i_load
        return self.net.v0 - self.M @ (self.z * i_branch)


def solve_ac(net: RadialNetwork, inj: PowerInjection, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER) -> PowerFlowSolution:
    """Constant-power AC power flow; check ``converged`` on the result."""
    return SweepSolver(net).solve(inj, tol=tol, max_iter=max_iter)


def linear_voltage(sens: SensitivityMatrices, net: RadialNetwork, inj_ctrl, p_demand, q_demand, p) -> VoltageProfile:
    """v = v0·1 + R(p − p^d) + X(q − q^d)."""
    vectors = [np.asarray(a, dtype=float) for a in (inj_ctrl, p_demand, q_demand, p)]
    for name, vec in zip(("q", "p_demand", "q_demand", "p"), vectors):
        if vec.shape != (sens.n,):
            raise DimensionError(f"{name} has shape {vec.shape}, expected ({sens.n},)")
    q, pd, qd, pg = vectors
    return VoltageProfile(v=net.v0 + sens.R @ (pg - pd) + sens.X @ (q - qd))


def measure(sol: PowerFlowSolution, cfg: MeasurementConfig,
            rng: Optional[np.random.Generator] = None) -> VoltageProfile:
    """
    Add i.i.d. Gaussian noise to the solved voltages.

    Without ``rng`` a fresh generator seeded from ``cfg.seed`` is used, so
    repeated calls are reproducible; pass a long-lived generator for a stream
    of independent draws.
    """
    if cfg.noise_std == 0:
        return sol.voltages
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, cfg.noise_std, size=len(sol.voltages))
    return VoltageProfile(v=sol.voltages.v + noise)


class FeederPlant:
    """
    Measurement callback q -> measured voltages under the current disturbance.

    Each call is one plant solve; divergence raises PowerFlowDivergedError.
    """

    def __init__(self, net: RadialNetwork, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 measurement: Optional[MeasurementConfig] = None):
        self.net = net
        self.solver = SweepSolver(net)
        self.tol = tol
        self.max_iter = max_iter
        self.measurement = measurement or MeasurementConfig()
        self.rng = np.random.default_rng(self.measurement.seed)
        self.p_demand = np.zeros(net.n)
        self.q_demand = np.zeros(net.n)
        self.p_generation = np.zeros(net.n)
        self.solves = 0
        self.last_solution: Optional[PowerFlowSolution] = None

    def set_disturbance(self, p_demand, q_demand, p_generation) -> None:
        self.p_demand = np.asarray(p_demand, dtype=float)
        self.q_demand = np.asarray(q_demand, dtype=float)
        self.p_generation = np.asarray(p_generation, dtype=float)

    def solve(self, q) -> PowerFlowSolution:
        inj = PowerInjection.from_parts(q, self.p_demand, self.q_demand, self.p_generation)
        sol = self.solver.solve(inj, tol=self.tol, max_iter=self.max_iter)
        self.solves += 1
        if not sol.converged:
            raise PowerFlowDivergedError(
                f"plant diverged after {sol.iterations} sweeps (residual {sol.residual:.3e})",
                iterations=sol.iterations,
                residual=sol.residual,
            )
        self.last_solution = sol
        return sol

    def __call__(self, q) -> VoltageProfile:
        return measure(self.solve(q), self.measurement, self.rng)
