"""
Feedback controllers for reactive-power voltage regulation.

Every controller is a stepwise state machine: ``step(v_meas, box)`` consumes
the voltage measured at the setpoint it returned last time and returns the
next setpoint to implement on the plant. The update rules are also exposed as
plain functions so they can be tested in isolation and shared with the
per-bus agents in ``agent_sim``.

Per-bus arithmetic lives in the ``local_*`` helpers. The monolithic and
agent-based nested controllers both evaluate the neighbour sum through
``local_tentative`` in the same column order, which keeps their trajectories
bitwise identical.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from app.errors import ConfigError, DimensionError, ProjectionError
from grid_model import SensitivityMatrices, cost_vector, der_box, rated_pv
from power_flow import VoltageProfile
from schemas import ControllerConfig, ControllerKind, DroopCurve, RadialNetwork

logger = logging.getLogger(__name__)

Plant = Callable[[NDArray[np.float64]], VoltageProfile]

# PV inverters are sized 20 % above rated active power
INVERTER_OVERSIZE = 1.2
ORACLE_TOL = 1e-10
ORACLE_MAX_ITER = 200_000


# ---------------------------------------------------------------------------
# State types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Per-bus reactive power limits [lower, upper], closed on both ends."""
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise DimensionError(f"box bounds have shapes {self.lower.shape} and {self.upper.shape}")
        if np.any(self.lower > self.upper):
            raise ValueError("empty box: some lower bound exceeds its upper bound")

    def __len__(self) -> int:
        return len(self.lower)

    def clip(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.minimum(np.maximum(q, self.lower), self.upper)

    def contains(self, q: NDArray[np.float64], tol: float = 0.0) -> bool:
        return bool(np.all(q >= self.lower - tol) and np.all(q <= self.upper + tol))

    def deflate(self, fraction: float) -> "Box":
        """Shrink both limits toward zero by ``fraction``."""
        if fraction == 0:
            return self
        return Box(lower=self.lower * (1.0 - fraction), upper=self.upper * (1.0 - fraction))

    def excursion(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        """Absolute distance of each component outside the box (0 inside)."""
        return np.maximum(q - self.upper, 0.0) + np.maximum(self.lower - q, 0.0)

    def relative_excursion(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        """Excursion relative to the larger limit magnitude of each DER."""
        scale = np.maximum(np.abs(self.lower), np.abs(self.upper))
        exc = self.excursion(q)
        return np.divide(exc, scale, out=exc.copy(), where=scale > 0)

    @classmethod
    def from_network(cls, net: RadialNetwork) -> "Box":
        q_min, q_max = der_box(net)
        return cls(lower=q_min, upper=q_max)


def capability_box(net: RadialNetwork, p_generation=None, capability: str = "static",
                   deflation: float = 0.0) -> Box:
    """
    DER reactive limits at one instant.

    ``static`` uses the DerSpec limits. ``headroom`` bounds each inverter by
    sqrt(s_rated^2 - p^2) with s_rated = 1.2 p_rated, so the box shrinks while
    the PV output is high.
    """
    if capability == "static":
        box = Box.from_network(net)
    elif capability == "headroom":
        s_rated = INVERTER_OVERSIZE * rated_pv(net)
        p = np.zeros(net.n) if p_generation is None else np.asarray(p_generation, dtype=float)
        head = np.sqrt(np.maximum(s_rated ** 2 - p ** 2, 0.0))
        box = Box(lower=-head, upper=head)
    else:
        raise ConfigError(f"unknown capability model '{capability}'")
    return box.deflate(deflation)


@dataclass(frozen=True)
class DualState:
    """Upper-limit (lam) and lower-limit (mu) multipliers, one per bus."""
    lam: NDArray[np.float64]
    mu: NDArray[np.float64]

    @classmethod
    def zeros(cls, n: int) -> "DualState":
        return cls(lam=np.zeros(n), mu=np.zeros(n))


@dataclass(frozen=True)
class OuterState:
    q: NDArray[np.float64]
    duals: DualState
    iteration: int = 0

    @classmethod
    def initial(cls, n: int, q0: Optional[NDArray[np.float64]] = None) -> "OuterState":
        q = np.zeros(n) if q0 is None else np.asarray(q0, dtype=float).copy()
        return cls(q=q, duals=DualState.zeros(n), iteration=0)


@dataclass(frozen=True)
class InnerState:
    u: NDArray[np.float64]
    v_target: NDArray[np.float64]
    tau: int = 0


def _check_dims(n: int, **vectors) -> None:
    for name, vec in vectors.items():
        if np.shape(vec) != (n,):
            raise DimensionError(f"{name} has shape {np.shape(vec)}, expected ({n},)")


def _costs(costs, n: int) -> NDArray[np.float64]:
    return np.ones(n) if costs is None else np.asarray(costs, dtype=float)


def _voltages(v: Union[VoltageProfile, NDArray[np.float64]]) -> NDArray[np.float64]:
    return v.v if isinstance(v, VoltageProfile) else np.asarray(v, dtype=float)


# ---------------------------------------------------------------------------
# Per-bus arithmetic shared with the agents
# ---------------------------------------------------------------------------

def local_dual_update(lam: float, mu: float, v: float, v_min: float, v_max: float,
                      alpha_d: float, r_d: float) -> Tuple[float, float]:
    lam_next = max(lam + alpha_d * ((v - v_max) - r_d * lam), 0.0)
    mu_next = max(mu + alpha_d * ((v_min - v) - r_d * mu), 0.0)
    return lam_next, mu_next


def local_tentative(q_i: float, lam_i: float, mu_i: float,
                    row_terms: Iterable[Tuple[float, float, float]], alpha: float, r_p: float) -> float:
    """
    Tentative setpoint of one bus from its row of X^-1.

    ``row_terms`` yields (X_inv[i, j], c_j, q_j) for j in the bus's
    neighbourhood, itself included, in increasing column order.
    """
    s = 0.0
    for w, c_j, q_j in row_terms:
        s += w * (c_j * q_j)
    return q_i - alpha * (((s + lam_i) - mu_i) + r_p * q_i)


def local_exploration(q_i: float, q_dot_i: float, epsilon: float) -> float:
    return q_i + epsilon * (q_dot_i - q_i)


def local_estimate(v_k: float, v_eps: float, epsilon: float) -> float:
    return v_k + (v_eps - v_k) / epsilon


def local_inner_step(u: float, v: float, v_target: float, alpha_u: float, lower: float, upper: float) -> float:
    return min(max(u - alpha_u * (v - v_target), lower), upper)


# ---------------------------------------------------------------------------
# Update rules
# ---------------------------------------------------------------------------

def dual_update(duals: DualState, v_meas, cfg: ControllerConfig) -> DualState:
    """Projected dual ascent on the upper and lower voltage limits."""
    if cfg.alpha_d is None:
        raise ConfigError("alpha_d is unset; resolve step sizes first")
    v = _voltages(v_meas)
    _check_dims(len(duals.lam), v_meas=v, mu=duals.mu)
    lam = np.maximum(duals.lam + cfg.alpha_d * ((v - cfg.v_max) - cfg.r_d * duals.lam), 0.0)
    mu = np.maximum(duals.mu + cfg.alpha_d * ((cfg.v_min - v) - cfg.r_d * duals.mu), 0.0)
    return DualState(lam=lam, mu=mu)


def _primal_step(q, duals: DualState, X, cfg: ControllerConfig, box: Box, costs) -> NDArray[np.float64]:
    if cfg.alpha is None:
        raise ConfigError("alpha is unset; resolve step sizes first")
    n = X.shape[0]
    q = np.asarray(q, dtype=float)
    _check_dims(n, q=q, lam=duals.lam, mu=duals.mu, box=box.lower)
    c = _costs(costs, n)
    grad = c * q + X @ (duals.lam - duals.mu + cfg.r_p * q)
    return box.clip(q - cfg.alpha * grad)


def centralized_primal_update(q, duals: DualState, sens: SensitivityMatrices, cfg: ControllerConfig,
                              box: Box, costs=None) -> NDArray[np.float64]:
    """q <- clip(q - alpha (C q + X (lam - mu + r_p q)))."""
    return _primal_step(q, duals, sens.X, cfg, box, costs)


def truncated_sensitivity_matrix(sens: SensitivityMatrices) -> NDArray[np.float64]:
    """X with every entry outside the electrical neighbourhood set to zero."""
    return np.where(sens.adjacency, sens.X, 0.0)


def truncated_sensitivity_update(q, duals: DualState, sens: SensitivityMatrices, cfg: ControllerConfig,
                                 box: Box, costs=None,
                                 X_trunc: Optional[NDArray[np.float64]] = None) -> NDArray[np.float64]:
    """Centralized primal update with the neighbourhood-truncated X."""
    X_trunc = truncated_sensitivity_matrix(sens) if X_trunc is None else X_trunc
    return _primal_step(q, duals, X_trunc, cfg, box, costs)


def tentative_setpoints(q, duals: DualState, sens: SensitivityMatrices, cfg: ControllerConfig,
                        costs=None) -> NDArray[np.float64]:
    """Scaled-gradient step q - alpha (X^-1 C q + lam - mu + r_p q), not clipped to the box."""
    if cfg.alpha is None:
        raise ConfigError("alpha is unset; resolve step sizes first")
    q = np.asarray(q, dtype=float)
    _check_dims(sens.n, q=q, lam=duals.lam, mu=duals.mu)
    c = _costs(costs, sens.n)
    out = np.empty(sens.n)
    for i, row in enumerate(sens.inverse_rows):
        terms = ((w, float(c[j]), float(q[j])) for j, w in row)
        out[i] = local_tentative(float(q[i]), float(duals.lam[i]), float(duals.mu[i]), terms, cfg.alpha, cfg.r_p)
    return out


def two_metric_update(q, duals: DualState, sens: SensitivityMatrices, cfg: ControllerConfig,
                      box: Box, costs=None) -> NDArray[np.float64]:
    """Scaled-gradient step followed by a Euclidean clip onto the box."""
    _check_dims(sens.n, box=box.lower)
    return box.clip(tentative_setpoints(q, duals, sens, cfg, costs))


def exploration_setpoint(q, q_dot, epsilon: float) -> NDArray[np.float64]:
    q = np.asarray(q, dtype=float)
    return q + epsilon * (np.asarray(q_dot, dtype=float) - q)


def estimate_from_exploration(v_k, v_eps, epsilon: float) -> NDArray[np.float64]:
    v_k = _voltages(v_k)
    return v_k + (_voltages(v_eps) - v_k) / epsilon


def exploration_and_estimate(q, q_dot, v_k: VoltageProfile, plant: Plant, cfg: ControllerConfig) -> VoltageProfile:
    """
    Implement q + eps (q_dot - q), measure, and extrapolate the voltage at q_dot.

    Plant faults propagate unchanged.
    """
    q_eps = exploration_setpoint(q, q_dot, cfg.epsilon)
    v_eps = plant(q_eps)
    return VoltageProfile(v=estimate_from_exploration(v_k, v_eps, cfg.epsilon))


def inner_projection_step(inner: InnerState, v_meas_at_u, cfg: ControllerConfig, box: Box) -> InnerState:
    """u <- clip(u - alpha_u (v(u) - v_target)); purely local per bus."""
    if cfg.alpha_u is None:
        raise ConfigError("alpha_u is unset; resolve step sizes first")
    v = _voltages(v_meas_at_u)
    _check_dims(len(inner.u), v_meas=v, box=box.lower)
    u = np.minimum(np.maximum(inner.u - cfg.alpha_u * (v - inner.v_target), box.lower), box.upper)
    return InnerState(u=u, v_target=inner.v_target, tau=inner.tau + 1)


def inner_start(q, box: Box, cfg: ControllerConfig) -> NDArray[np.float64]:
    """u^0 of the inner loop: the current setpoint, or zero, clipped to the box."""
    if cfg.u0_policy == "zero":
        return box.clip(np.zeros(len(box)))
    return box.clip(np.asarray(q, dtype=float))


def nested_step(state: OuterState, plant: Plant, sens: SensitivityMatrices, cfg: ControllerConfig,
                box: Box, costs=None) -> OuterState:
    """
    One outer iteration of the nested controller.

    Measures at q^k, advances the duals, forms the tentative setpoints,
    explores to estimate the voltage they would produce, then runs T inner
    steps from u^0 and returns q^{k+1} = u^T. Uses 2 + T plant solves. If the
    plant raises, the input state is untouched.
    """
    v_k = plant(state.q)
    duals = dual_update(state.duals, v_k, cfg)
    q_dot = tentative_setpoints(state.q, duals, sens, cfg, costs)
    v_hat = exploration_and_estimate(state.q, q_dot, v_k, plant, cfg)
    inner = InnerState(u=inner_start(state.q, box, cfg), v_target=v_hat.v)
    for _ in range(cfg.inner_iterations):
        inner = inner_projection_step(inner, plant(inner.u), cfg, box)
    return OuterState(q=inner.u, duals=duals, iteration=state.iteration + 1)


def droop_update(curve: DroopCurve, v_local: float, q_lower: float, q_upper: float) -> float:
    """Volt-VAR characteristic evaluated at one bus."""
    if v_local <= curve.v1:
        q = q_upper
    elif v_local < curve.v2:
        q = q_upper * (curve.v2 - v_local) / (curve.v2 - curve.v1)
    elif v_local <= curve.v3:
        q = 0.0
    elif v_local < curve.v4:
        q = q_lower * (v_local - curve.v3) / (curve.v4 - curve.v3)
    else:
        q = q_lower
    return min(max(q, q_lower), q_upper)


def max_inner_step_size(sens: Union[SensitivityMatrices, NDArray[np.float64]]) -> float:
    """Largest alpha_u (exclusive) for which the inner loop converges: 2 / lambda_max(X)."""
    if isinstance(sens, SensitivityMatrices):
        return 2.0 / sens.lambda_max
    X = np.atleast_2d(np.asarray(sens, dtype=float))
    return 2.0 / float(np.linalg.eigvalsh(X)[-1])


# ---------------------------------------------------------------------------
# Reference solvers (global information, used as test oracles)
# ---------------------------------------------------------------------------

def _polish_box_qp(H, g, lower, upper, u, tol):
    """
    Re-solve min 1/2 u'Hu + g'u exactly on the free set guessed from ``u``.

    Returns None when the guessed active set fails the KKT conditions.
    """
    at_lower = u <= lower + 1e-12
    at_upper = u >= upper - 1e-12
    free = ~(at_lower | at_upper)
    x = np.where(at_lower, lower, np.where(at_upper, upper, u))
    if np.any(free):
        fixed = ~free
        rhs = -g[free] - H[np.ix_(free, fixed)] @ x[fixed]
        x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
    grad = H @ x + g
    slack = 10 * tol
    ok = (
        np.all(x[free] >= lower[free] - slack) and np.all(x[free] <= upper[free] + slack)
        and np.all(grad[at_lower & ~at_upper] >= -slack)
        and np.all(grad[at_upper & ~at_lower] <= slack)
    )
    return np.minimum(np.maximum(x, lower), upper) if ok else None


def x_norm_projection_oracle(q_dot, sens: Union[SensitivityMatrices, NDArray[np.float64]], box: Box,
                             tol: float = ORACLE_TOL, max_iter: int = ORACLE_MAX_ITER) -> NDArray[np.float64]:
    """
    argmin over the box of 1/2 (u - q_dot)' X (u - q_dot).

    Accelerated projected gradient with adaptive restart, stopped when the
    projected-gradient fixed-point residual drops below ``tol``, then an exact
    solve on the detected free set. Raises ProjectionError if the tolerance
    is not reached.
    """
    X = sens.X if isinstance(sens, SensitivityMatrices) else np.atleast_2d(np.asarray(sens, dtype=float))
    q_dot = np.asarray(q_dot, dtype=float)
    _check_dims(X.shape[0], q_dot=q_dot, box=box.lower)
    if box.contains(q_dot):
        return q_dot.copy()

    g = -X @ q_dot
    step = 1.0 / float(np.linalg.eigvalsh(X)[-1])
    u = box.clip(q_dot)
    y, t = u.copy(), 1.0
    for it in range(max_iter):
        u_next = box.clip(y - step * (X @ y + g))
        residual = float(np.max(np.abs(u - box.clip(u - step * (X @ u + g)))))
        if residual <= tol:
            break
        if np.dot(y - u_next, u_next - u) > 0:
            t = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = u_next + ((t - 1.0) / t_next) * (u_next - u)
        u, t = u_next, t_next
    else:
        raise ProjectionError(
            f"X-norm projection did not reach tolerance {tol:g} in {max_iter} iterations "
            f"(residual {residual:.3e})"
        )
    polished = _polish_box_qp(X, g, box.lower, box.upper, u, tol)
    logger.debug("X-norm projection converged after %d iterations", it)
    return polished if polished is not None else u


def reference_qp(sens: SensitivityMatrices, v_anchor, q_anchor, box: Box, costs=None,
                 v_min: float = 0.95, v_max: float = 1.05, tol: float = ORACLE_TOL,
                 max_iter: int = ORACLE_MAX_ITER) -> NDArray[np.float64]:
    """
    Minimize 1/2 q'Cq over the box subject to v_min <= v(q) <= v_max, with the
    linear model v(q) = v_anchor + X (q - q_anchor).

    Solved on the dual by accelerated projected gradient. For fixed
    multipliers the box-constrained primal minimizer is clip(-X (lam - mu) / c)
    because C is diagonal.
    """
    X = sens.X
    n = sens.n
    v_anchor = _voltages(v_anchor)
    q_anchor = np.asarray(q_anchor, dtype=float)
    _check_dims(n, v_anchor=v_anchor, q_anchor=q_anchor, box=box.lower)
    c = _costs(costs, n)
    offset = v_anchor - X @ q_anchor

    def primal(lam, mu):
        return box.clip(-(X @ (lam - mu)) / c)

    def ascent(lam, mu, q):
        v = offset + X @ q
        return v - v_max, v_min - v

    step = 1.0 / (2.0 * sens.lambda_max ** 2 / float(np.min(c)))
    lam, mu = np.zeros(n), np.zeros(n)
    y_lam, y_mu, t = lam.copy(), mu.copy(), 1.0
    q = primal(lam, mu)
    for it in range(max_iter):
        q_y = primal(y_lam, y_mu)
        g_lam, g_mu = ascent(y_lam, y_mu, q_y)
        lam_next = np.maximum(y_lam + step * g_lam, 0.0)
        mu_next = np.maximum(y_mu + step * g_mu, 0.0)
        q_next = primal(lam_next, mu_next)
        v = offset + X @ q_next
        violation = float(max(np.max(v - v_max), np.max(v_min - v), 0.0))
        change = float(np.max(np.abs(q_next - q)))
        dual_change = float(max(np.max(np.abs(lam_next - lam)), np.max(np.abs(mu_next - mu))))
        if it > 0 and change <= tol and violation <= np.sqrt(tol) and dual_change * step <= tol:
            q = q_next
            break
        # restart momentum when the dual objective stops increasing along the step
        if np.dot(lam_next - lam, g_lam) + np.dot(mu_next - mu, g_mu) < 0:
            t = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        y_lam = np.maximum(lam_next + beta * (lam_next - lam), 0.0)
        y_mu = np.maximum(mu_next + beta * (mu_next - mu), 0.0)
        lam, mu, q, t = lam_next, mu_next, q_next, t_next
    else:
        raise ProjectionError(
            f"reference QP did not converge in {max_iter} iterations "
            f"(last change {change:.3e}, violation {violation:.3e}); voltage limits may be infeasible"
        )
    logger.debug("reference QP converged after %d iterations", it)
    return q


# ---------------------------------------------------------------------------
# Step sizes
# ---------------------------------------------------------------------------

# alpha_u * lambda_max(X), a quarter of the inner-loop stability bound
INNER_STEP_FRACTION = 0.5


def inner_loop_gain(s, alpha_u: float, inner_iterations: int):
    """
    Fraction of a step towards q_dot that T inner steps realise along an
    eigenvector of X with eigenvalue s: 1 - (1 - alpha_u s)^T.
    """
    return 1.0 - (1.0 - alpha_u * np.asarray(s, dtype=float)) ** inner_iterations


def resolve_step_sizes(sens: SensitivityMatrices, cfg: ControllerConfig, kind: ControllerKind,
                       costs=None) -> ControllerConfig:
    """
    Fill unset step sizes from the spectrum of X. Values already set are kept.

    With c_max = max(c), c_min = min(c) and T inner iterations:

    * nested: alpha_u = INNER_STEP_FRACTION / lambda_max; alpha is the
      largest step whose per-outer gain alpha (c_max / s + r_p) P(s) stays
      at or below 1 for every eigenvalue s of X, where P is
      ``inner_loop_gain``; alpha_d = c_min / lambda_max^2.
    * centralized and truncated: alpha = 1 / c_max, which minimises the
      Lagrangian in one step for uniform costs, and a dual gain per instant
      of 2 / (2 + T) of the nested gain per outer iteration.
    * two-metric: alpha = lambda_min / c_max, alpha_d = 1 / (alpha lambda_max).
    """
    c = _costs(costs, sens.n)
    c_max, c_min = float(np.max(c)), float(np.min(c))
    T = cfg.inner_iterations
    alpha_u = cfg.alpha_u if cfg.alpha_u is not None else INNER_STEP_FRACTION / sens.lambda_max
    if kind == ControllerKind.NESTED:
        s = sens.eigenvalues
        gain = (c_max / s + cfg.r_p) * inner_loop_gain(s, alpha_u, T)
        alpha = cfg.alpha if cfg.alpha is not None else 1.0 / float(np.max(gain))
        alpha_d = cfg.alpha_d if cfg.alpha_d is not None else c_min / sens.lambda_max ** 2
    elif kind == ControllerKind.TWO_METRIC:
        alpha = cfg.alpha if cfg.alpha is not None else sens.lambda_min / c_max
        alpha_d = cfg.alpha_d if cfg.alpha_d is not None else 1.0 / (alpha * sens.lambda_max)
    else:
        alpha = cfg.alpha if cfg.alpha is not None else 1.0 / c_max
        alpha_d = cfg.alpha_d if cfg.alpha_d is not None else 2.0 * c_min / ((2 + T) * sens.lambda_max ** 2)
    if alpha_u >= max_inner_step_size(sens):
        logger.warning(
            "⚠️  alpha_u=%.4g is not below 2/lambda_max(X)=%.4g; the inner loop may diverge",
            alpha_u, max_inner_step_size(sens),
        )
    resolved = cfg.model_copy(update={"alpha": alpha, "alpha_d": alpha_d, "alpha_u": alpha_u})
    logger.debug("step sizes for %s: alpha=%.4g alpha_d=%.4g alpha_u=%.4g", kind.value, alpha, alpha_d, alpha_u)
    return resolved


def with_network_limits(cfg: ControllerConfig, net: RadialNetwork) -> ControllerConfig:
    """
    Take v_min/v_max from the network unless the config sets them explicitly,
    so the controller regulates to the same band the metrics are scored on.
    """
    update = {name: getattr(net, name) for name in ("v_min", "v_max") if name not in cfg.model_fields_set}
    merged = cfg.model_copy(update=update) if update else cfg
    if merged.v_min >= merged.v_max:
        raise ConfigError(f"voltage limits are inverted: v_min={merged.v_min} >= v_max={merged.v_max}")
    if (merged.v_min, merged.v_max) != (net.v_min, net.v_max):
        logger.warning(
            "⚠️  controller regulates to [%.4g, %.4g] pu but the network band is [%.4g, %.4g] pu",
            merged.v_min, merged.v_max, net.v_min, net.v_max,
        )
    return merged


# ---------------------------------------------------------------------------
# State machines
# ---------------------------------------------------------------------------

class FeedbackController(ABC):
    """
    Measurement-driven controller.

    ``reset`` returns the first setpoint to implement; every ``step`` receives
    the voltage measured at the previously returned setpoint together with the
    box of the current instant and returns the next setpoint.
    """

    kind: ControllerKind
    plant_solves_per_outer = 1

    def __init__(self, net: RadialNetwork, sens: SensitivityMatrices, cfg: ControllerConfig):
        self.net = net
        self.sens = sens
        self.costs = cost_vector(net)
        self.cfg = resolve_step_sizes(sens, with_network_limits(cfg, net), self.kind, self.costs)
        self.q = np.zeros(net.n)
        self.duals: Optional[DualState] = None
        self.outer_iteration = 0
        # True when the setpoint returned by the last step is an outer iterate q^{k+1}
        self.completes_outer = True
        # bound on how far the last returned setpoint may leave the box
        self.excursion_allowance = 0.0

    def reset(self, q0: Optional[NDArray[np.float64]] = None) -> NDArray[np.float64]:
        self.q = np.zeros(self.net.n) if q0 is None else np.asarray(q0, dtype=float).copy()
        _check_dims(self.net.n, q0=self.q)
        self.duals = DualState.zeros(self.net.n)
        self.outer_iteration = 0
        self.completes_outer = True
        self.excursion_allowance = 0.0
        return self.q.copy()

    @abstractmethod
    def step(self, v_meas: VoltageProfile, box: Box) -> NDArray[np.float64]:
        raise NotImplementedError


class NoControl(FeedbackController):
    kind = ControllerKind.NONE

    def step(self, v_meas, box):
        self.q = box.clip(np.zeros(self.net.n))
        self.outer_iteration += 1
        return self.q.copy()


class DroopController(FeedbackController):
    kind = ControllerKind.DROOP

    def step(self, v_meas, box):
        v = _voltages(v_meas)
        self.q = np.array([
            droop_update(self.cfg.droop, float(v[i]), float(box.lower[i]), float(box.upper[i]))
            for i in range(self.net.n)
        ])
        self.outer_iteration += 1
        return self.q.copy()


class PrimalDualController(FeedbackController):
    """Centralized, truncated and two-metric controllers: one outer iteration per measurement."""

    def __init__(self, net, sens, cfg, kind: ControllerKind):
        if kind not in (ControllerKind.CENTRALIZED, ControllerKind.TRUNCATED, ControllerKind.TWO_METRIC):
            raise ConfigError(f"{kind.value} is not a primal-dual controller")
        self.kind = kind
        super().__init__(net, sens, cfg)
        self.X_trunc = truncated_sensitivity_matrix(sens) if kind == ControllerKind.TRUNCATED else None

    def step(self, v_meas, box):
        self.duals = dual_update(self.duals, v_meas, self.cfg)
        if self.kind == ControllerKind.CENTRALIZED:
            self.q = centralized_primal_update(self.q, self.duals, self.sens, self.cfg, box, self.costs)
        elif self.kind == ControllerKind.TRUNCATED:
            self.q = truncated_sensitivity_update(self.q, self.duals, self.sens, self.cfg, box, self.costs,
                                                  X_trunc=self.X_trunc)
        else:
            self.q = two_metric_update(self.q, self.duals, self.sens, self.cfg, box, self.costs)
        self.outer_iteration += 1
        return self.q.copy()


class NestedPhase(str, Enum):
    OUTER = "outer"
    EXPLORE = "exploration"
    INNER = "inner"


class NestedController(FeedbackController):
    """
    Nested controller as a state machine over three phases.

    OUTER receives the measurement at q^k and returns the exploration
    setpoint; EXPLORE receives its measurement and returns u^0; INNER runs
    T measured projection steps, the last of which returns q^{k+1}.
    """

    kind = ControllerKind.NESTED

    def __init__(self, net, sens, cfg, noise_std: float = 0.0):
        super().__init__(net, sens, cfg)
        self.plant_solves_per_outer = 2 + self.cfg.inner_iterations
        self.phase = NestedPhase.OUTER
        self.v_k: Optional[NDArray[np.float64]] = None
        self.q_dot: Optional[NDArray[np.float64]] = None
        self.inner: Optional[InnerState] = None
        if noise_std > 0:
            logger.warning(
                "⚠️  Exploration estimate divides measurement differences by epsilon=%.1e: "
                "noise std %.2e pu becomes roughly %.2e pu in the estimate",
                self.cfg.epsilon, noise_std, np.sqrt(2.0) * noise_std / self.cfg.epsilon,
            )

    def reset(self, q0=None):
        q = super().reset(q0)
        self.phase = NestedPhase.OUTER
        self.v_k = self.q_dot = None
        self.inner = None
        return q

    @property
    def state(self) -> OuterState:
        return OuterState(q=self.q.copy(), duals=self.duals, iteration=self.outer_iteration)

    def step(self, v_meas, box):
        v = _voltages(v_meas)
        self.excursion_allowance = 0.0
        self.completes_outer = False
        if self.phase == NestedPhase.OUTER:
            self.v_k = v
            self.duals = dual_update(self.duals, v, self.cfg)
            self.q_dot = tentative_setpoints(self.q, self.duals, self.sens, self.cfg, self.costs)
            q_eps = exploration_setpoint(self.q, self.q_dot, self.cfg.epsilon)
            self.excursion_allowance = self.cfg.epsilon * float(np.max(np.abs(self.q_dot - self.q)))
            self.phase = NestedPhase.EXPLORE
            return q_eps
        if self.phase == NestedPhase.EXPLORE:
            v_hat = estimate_from_exploration(self.v_k, v, self.cfg.epsilon)
            self.inner = InnerState(u=inner_start(self.q, box, self.cfg), v_target=v_hat)
            self.phase = NestedPhase.INNER
            return self.inner.u.copy()
        self.inner = inner_projection_step(self.inner, v, self.cfg, box)
        if self.inner.tau < self.cfg.inner_iterations:
            return self.inner.u.copy()
        self.q = self.inner.u
        self.outer_iteration += 1
        self.phase = NestedPhase.OUTER
        self.completes_outer = True
        return self.q.copy()


def build_controller(kind: Union[ControllerKind, str], net: RadialNetwork, sens: SensitivityMatrices,
                     cfg: Optional[ControllerConfig] = None, noise_std: float = 0.0) -> FeedbackController:
    """Instantiate the monolithic controller of the given kind."""
    try:
        kind = ControllerKind(kind)
    except ValueError:
        raise ConfigError(f"unknown controller '{kind}'") from None
    cfg = cfg or ControllerConfig()
    if kind == ControllerKind.NONE:
        return NoControl(net, sens, cfg)
    if kind == ControllerKind.DROOP:
        return DroopController(net, sens, cfg)
    if kind == ControllerKind.NESTED:
        return NestedController(net, sens, cfg, noise_std=noise_std)
    return PrimalDualController(net, sens, cfg, kind)
