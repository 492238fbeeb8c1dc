"""
Per-bus agents exchanging messages along electrical adjacency only.

Agents run in synchronous super-steps. In each round every agent first emits
its outgoing messages, the barrier delivers them (checking that each one
travels along a cable), and then every agent updates from its own
measurement and its inbox. The nested controller only needs neighbour
setpoints in its outer phase; exploration and inner rounds are silent.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from app.errors import LocalityViolation
from controllers import (
    Box,
    DualState,
    FeedbackController,
    NestedPhase,
    local_dual_update,
    local_estimate,
    local_exploration,
    local_inner_step,
    local_tentative,
)
from grid_model import SensitivityMatrices, cost_vector, electrical_neighbors
from power_flow import VoltageProfile
from schemas import ControllerConfig, ControllerKind, RadialNetwork

logger = logging.getLogger(__name__)

BROADCAST = "broadcast"
MESSAGE_LOG_COLUMNS = ["round", "from", "to", "payload", "value"]


@dataclass(frozen=True)
class CommGraph:
    """Communication graph among controllable buses; mirrors cable adjacency."""
    neighbors: Dict[int, Tuple[int, ...]]

    def __post_init__(self):
        for i, adj in self.neighbors.items():
            for j in adj:
                if i not in self.neighbors.get(j, ()):
                    raise ValueError(f"communication graph is not symmetric at ({i}, {j})")

    def has_edge(self, i: int, j: int) -> bool:
        return j in self.neighbors.get(i, ())

    def directed_edges(self) -> List[Tuple[int, int]]:
        return [(i, j) for i in sorted(self.neighbors) for j in self.neighbors[i]]


def build_comm_graph(net: RadialNetwork) -> CommGraph:
    """Cable adjacency among buses 1..N; the substation is not an agent."""
    adjacency = electrical_neighbors(net)
    return CommGraph(neighbors={
        bus: tuple(j for j in adj if j != 0)
        for bus, adj in adjacency.items() if bus != 0
    })


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    round: int
    payload: Tuple[Tuple[str, float], ...]

    def value(self, name: str) -> float:
        for key, val in self.payload:
            if key == name:
                return val
        raise KeyError(name)


@dataclass(frozen=True)
class AgentState:
    """
    Everything one bus agent knows.

    ``inverse_row`` holds (neighbour bus, X_inv entry, neighbour cost) for the
    bus itself and its electrical neighbours, in increasing bus order.
    """
    bus: int
    inverse_row: Tuple[Tuple[int, float, float], ...]
    cost: float
    q: float = 0.0
    lam: float = 0.0
    mu: float = 0.0
    v_k: float = 0.0
    q_dot: float = 0.0
    u: float = 0.0
    v_target: float = 0.0
    tau: int = 0
    setpoint: float = 0.0
    inbox: Tuple[Message, ...] = ()
    # dense X row, only provisioned for the centralized broadcast program
    x_row: Optional[Tuple[float, ...]] = field(default=None, repr=False)


def provision_agents(net: RadialNetwork, sens: SensitivityMatrices,
                     q0: Optional[NDArray[np.float64]] = None) -> Dict[int, AgentState]:
    """Commission one agent per controllable bus with its own row of X^-1."""
    costs = cost_vector(net)
    q0 = np.zeros(net.n) if q0 is None else np.asarray(q0, dtype=float)
    agents = {}
    for i, row in enumerate(sens.inverse_rows):
        bus = i + 1
        agents[bus] = AgentState(
            bus=bus,
            inverse_row=tuple((j + 1, w, float(costs[j])) for j, w in row),
            cost=float(costs[i]),
            q=float(q0[i]),
            setpoint=float(q0[i]),
        )
    return agents


def _outgoing(agent: AgentState, graph: CommGraph, phase: str, round_no: int) -> List[Message]:
    if phase == NestedPhase.OUTER.value:
        payload = (("q", agent.q),)
        return [Message(agent.bus, j, round_no, payload) for j in graph.neighbors.get(agent.bus, ())]
    if phase == BROADCAST:
        payload = (("q", agent.q), ("lam", agent.lam), ("mu", agent.mu))
        return [Message(agent.bus, j, round_no, payload) for j in sorted(graph.neighbors) if j != agent.bus]
    return []


def _deliver(agents: Dict[int, AgentState], messages: List[Message], graph: CommGraph,
             strict: bool) -> Dict[int, AgentState]:
    offending = [m for m in messages if not graph.has_edge(m.sender, m.receiver)]
    if offending:
        logger.error("❌ %d message(s) addressed to non-neighbours, first %s", len(offending), offending[0])
        if strict:
            raise LocalityViolation(
                f"{len(offending)} message(s) addressed to non-neighbours", messages=offending
            )
    inboxes: Dict[int, List[Message]] = {bus: [] for bus in agents}
    for m in messages:
        inboxes[m.receiver].append(m)
    return {bus: replace(a, inbox=tuple(inboxes[bus])) for bus, a in agents.items()}


def _nested_update(agent: AgentState, phase: str, v: float, lower: float, upper: float,
                   cfg: ControllerConfig) -> AgentState:
    if phase == NestedPhase.OUTER.value:
        lam, mu = local_dual_update(agent.lam, agent.mu, v, cfg.v_min, cfg.v_max, cfg.alpha_d, cfg.r_d)
        received = {m.sender: m.value("q") for m in agent.inbox}
        received[agent.bus] = agent.q
        terms = ((w, c_j, received[j]) for j, w, c_j in agent.inverse_row)
        q_dot = local_tentative(agent.q, lam, mu, terms, cfg.alpha, cfg.r_p)
        return replace(agent, lam=lam, mu=mu, v_k=v, q_dot=q_dot,
                       setpoint=local_exploration(agent.q, q_dot, cfg.epsilon))
    if phase == NestedPhase.EXPLORE.value:
        start = 0.0 if cfg.u0_policy == "zero" else agent.q
        u = min(max(start, lower), upper)
        return replace(agent, v_target=local_estimate(agent.v_k, v, cfg.epsilon), u=u, tau=0, setpoint=u)
    if phase == NestedPhase.INNER.value:
        u = local_inner_step(agent.u, v, agent.v_target, cfg.alpha_u, lower, upper)
        tau = agent.tau + 1
        if tau == cfg.inner_iterations:
            return replace(agent, u=u, tau=tau, q=u, setpoint=u)
        return replace(agent, u=u, tau=tau, setpoint=u)
    raise ValueError(f"unknown phase '{phase}'")


def _broadcast_dual(agent: AgentState, v: float, cfg: ControllerConfig) -> AgentState:
    lam, mu = local_dual_update(agent.lam, agent.mu, v, cfg.v_min, cfg.v_max, cfg.alpha_d, cfg.r_d)
    return replace(agent, lam=lam, mu=mu)


def _broadcast_primal(agent: AgentState, lower: float, upper: float, cfg: ControllerConfig) -> AgentState:
    """Primal step from every bus's already advanced multipliers."""
    others = {m.sender: m for m in agent.inbox}
    total = 0.0
    for j, x_ij in enumerate(agent.x_row, start=1):
        if j == agent.bus:
            total += x_ij * (agent.lam - agent.mu + cfg.r_p * agent.q)
        else:
            m = others[j]
            total += x_ij * (m.value("lam") - m.value("mu") + cfg.r_p * m.value("q"))
    q = min(max(agent.q - cfg.alpha * (agent.cost * agent.q + total), lower), upper)
    return replace(agent, q=q, setpoint=q)


def run_round(agents: Dict[int, AgentState], graph: CommGraph, phase: str, v_meas: VoltageProfile,
              box: Box, cfg: ControllerConfig, round_no: int,
              strict: bool = True) -> Tuple[Dict[int, AgentState], List[Message]]:
    """
    One synchronous super-step.

    ``v_meas`` holds each agent's own measurement at the setpoints implemented
    since the previous round; agent ``i`` only reads entry ``i - 1`` of it and
    of the box. Non-neighbour messages raise LocalityViolation when
    ``strict``; otherwise they are delivered and left for assert_locality.

    A broadcast round has two sub-rounds: every agent first advances its own
    multipliers from its measurement, then broadcasts them so the primal step
    uses the multipliers of iteration k+1 at every bus.
    """
    if phase == BROADCAST:
        agents = {bus: _broadcast_dual(agents[bus], float(v_meas.v[bus - 1]), cfg) for bus in sorted(agents)}
    messages = [m for bus in sorted(agents) for m in _outgoing(agents[bus], graph, phase, round_no)]
    agents = _deliver(agents, messages, graph, strict)
    updated = {}
    for bus in sorted(agents):
        k = bus - 1
        v, lower, upper = float(v_meas.v[k]), float(box.lower[k]), float(box.upper[k])
        if phase == BROADCAST:
            updated[bus] = _broadcast_primal(agents[bus], lower, upper, cfg)
        else:
            updated[bus] = _nested_update(agents[bus], phase, v, lower, upper, cfg)
    return updated, messages


@dataclass(frozen=True)
class LocalityReport:
    passed: bool
    offending: Tuple[Message, ...] = ()

    def __bool__(self) -> bool:
        return self.passed


def assert_locality(log: Iterable[Message], graph: CommGraph) -> LocalityReport:
    """Pass iff every logged message travels along an edge of ``graph``."""
    offending = tuple(m for m in log if not graph.has_edge(m.sender, m.receiver))
    return LocalityReport(passed=not offending, offending=offending)


def setpoints(agents: Dict[int, AgentState]) -> NDArray[np.float64]:
    return np.array([agents[bus].setpoint for bus in sorted(agents)])


class AgentNestedController(FeedbackController):
    """
    The nested controller executed by per-bus agents.

    Exposes the same reset/step protocol as controllers.NestedController and
    produces the same setpoint sequence; all messages are kept in
    ``message_log``.
    """

    kind = ControllerKind.NESTED

    def __init__(self, net: RadialNetwork, sens: SensitivityMatrices, cfg: ControllerConfig):
        super().__init__(net, sens, cfg)
        self.graph = build_comm_graph(net)
        self.plant_solves_per_outer = 2 + self.cfg.inner_iterations
        self.phase = NestedPhase.OUTER
        self.round = 0
        self.agents: Dict[int, AgentState] = provision_agents(net, sens)
        self.message_log: List[Message] = []

    def reset(self, q0=None):
        q = super().reset(q0)
        self.agents = provision_agents(self.net, self.sens, q)
        self.phase = NestedPhase.OUTER
        self.round = 0
        self.message_log = []
        return q

    @property
    def duals_vector(self) -> DualState:
        order = sorted(self.agents)
        return DualState(lam=np.array([self.agents[b].lam for b in order]),
                         mu=np.array([self.agents[b].mu for b in order]))

    def step(self, v_meas, box):
        phase = self.phase
        self.agents, messages = run_round(self.agents, self.graph, phase.value, v_meas, box, self.cfg, self.round)
        self.message_log.extend(messages)
        self.round += 1
        self.duals = self.duals_vector
        self.completes_outer = False
        self.excursion_allowance = 0.0
        if phase == NestedPhase.OUTER:
            q_dot = np.array([self.agents[b].q_dot for b in sorted(self.agents)])
            self.excursion_allowance = self.cfg.epsilon * float(np.max(np.abs(q_dot - self.q)))
            self.phase = NestedPhase.EXPLORE
        elif phase == NestedPhase.EXPLORE:
            self.phase = NestedPhase.INNER
        elif next(iter(self.agents.values())).tau == self.cfg.inner_iterations:
            self.q = setpoints(self.agents)
            self.outer_iteration += 1
            self.completes_outer = True
            self.phase = NestedPhase.OUTER
        return setpoints(self.agents)


class BroadcastCentralizedProgram(FeedbackController):
    """
    Centralized primal-dual controller run through the agent harness.

    Every agent needs every other bus's multipliers, so each round is a
    broadcast; messages are delivered without the locality check and the
    resulting log fails assert_locality.
    """

    kind = ControllerKind.CENTRALIZED

    def __init__(self, net: RadialNetwork, sens: SensitivityMatrices, cfg: ControllerConfig):
        super().__init__(net, sens, cfg)
        self.graph = build_comm_graph(net)
        self.round = 0
        self.agents = self._provision(np.zeros(net.n))
        self.message_log: List[Message] = []

    def _provision(self, q0) -> Dict[int, AgentState]:
        agents = provision_agents(self.net, self.sens, q0)
        return {bus: replace(a, x_row=tuple(float(x) for x in self.sens.X[bus - 1])) for bus, a in agents.items()}

    def reset(self, q0=None):
        q = super().reset(q0)
        self.agents = self._provision(q)
        self.round = 0
        self.message_log = []
        return q

    def step(self, v_meas, box):
        self.agents, messages = run_round(self.agents, self.graph, BROADCAST, v_meas, box, self.cfg,
                                          self.round, strict=False)
        self.message_log.extend(messages)
        self.round += 1
        self.q = setpoints(self.agents)
        self.outer_iteration += 1
        return self.q.copy()


def message_log_frame(log: Sequence[Message]) -> pd.DataFrame:
    rows = [
        {"round": m.round, "from": m.sender, "to": m.receiver, "payload": name, "value": value}
        for m in log for name, value in m.payload
    ]
    return pd.DataFrame(rows, columns=MESSAGE_LOG_COLUMNS)


def export_message_log(log: Sequence[Message], path: Union[str, Path]) -> Path:
    """Write one CSV row per payload entry: round, from, to, payload, value."""
    path = Path(path)
    message_log_frame(log).to_csv(path, index=False, float_format="%.17g")
    logger.info("📝 Wrote %d messages to %s", len(log), path)
    return path
