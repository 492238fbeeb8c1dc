"""
Radial distribution network model.

This module validates balanced radial feeders, builds the LinDistFlow
sensitivity matrices R and X together with the adjacency-sparse inverse of X,
generates seeded synthetic feeders, and reads/writes the line-oriented network
file format (SI units on disk, per-unit in memory).
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import networkx as nx
import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from app.errors import NetworkFormatError, SensitivityError, TopologyError
from schemas import Cable, DerSpec, RadialNetwork

logger = logging.getLogger(__name__)

SPARSITY_RTOL = 1e-9
INVERSE_RTOL = 1e-9

BranchingPolicy = Literal["chain", "chain-heavy", "random"]


@dataclass(frozen=True)
class SensitivityMatrices:
    """
    Voltage sensitivities of a radial network (non-slack buses only).

    Row/column ``k`` refers to bus ``k + 1``.
    """
    R: NDArray[np.float64]
    X: NDArray[np.float64]
    X_inv: NDArray[np.float64]
    adjacency: NDArray[np.bool_]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @cached_property
    def inverse_rows(self) -> Tuple[Tuple[Tuple[int, float], ...], ...]:
        """Per-bus (column, X_inv entry) pairs restricted to the sparsity pattern, sorted by column."""
        rows = []
        for i in range(self.n):
            cols = np.flatnonzero(self.adjacency[i])
            rows.append(tuple((int(j), float(self.X_inv[i, j])) for j in cols))
        return tuple(rows)

    @cached_property
    def eigenvalues(self) -> NDArray[np.float64]:
        """Spectrum of X, ascending."""
        return np.linalg.eigvalsh(self.X)

    @cached_property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    @cached_property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])


def _graph(net: RadialNetwork) -> nx.Graph:
    graph = nx.Graph()
    graph.add_nodes_from(net.buses)
    for cable in net.cables:
        graph.add_edge(cable.from_bus, cable.to_bus)
    return graph


def validate_topology(net: RadialNetwork) -> List[str]:
    """
    Check every RadialNetwork invariant.

    Returns one human-readable entry per violation; an empty list means the
    network is a well-formed tree rooted at bus 0.
    """
    violations: List[str] = []
    buses = list(net.buses)
    seen = set()
    for bus in buses:
        if bus in seen:
            violations.append(f"duplicate bus id {bus}")
        seen.add(bus)
    if 0 not in seen:
        violations.append("slack bus 0 missing")
    if sorted(seen) != list(range(len(seen))):
        violations.append(f"bus ids must be contiguous 0..{len(seen) - 1}")

    n = len(seen) - 1
    if len(net.cables) != n:
        violations.append(f"expected {n} cables for {n + 1} buses, found {len(net.cables)}")

    endpoints_ok = True
    for cable in net.cables:
        key = f"({cable.from_bus},{cable.to_bus})"
        for end in (cable.from_bus, cable.to_bus):
            if end not in seen:
                violations.append(f"cable {key} references unknown bus {end}")
                endpoints_ok = False
        if cable.from_bus == cable.to_bus:
            violations.append(f"self-loop cable {key}")
        if not cable.resistance > 0:
            violations.append(f"nonpositive resistance at {key}")
        if not cable.reactance > 0:
            violations.append(f"nonpositive reactance at {key}")

    if endpoints_ok and 0 in seen:
        graph = _graph(net)
        multi = nx.MultiGraph()
        multi.add_nodes_from(seen)
        multi.add_edges_from((c.from_bus, c.to_bus) for c in net.cables)
        try:
            cycle = nx.find_cycle(multi)
            violations.append("cycle detected: " + "-".join(str(edge[0]) for edge in cycle))
        except nx.NetworkXNoCycle:
            cycle = None
        reachable = nx.node_connected_component(graph, 0)
        for bus in sorted(seen - reachable):
            violations.append(f"bus {bus} disconnected from substation")
        if cycle is None:
            depth = nx.single_source_shortest_path_length(graph, 0)
            for cable in net.cables:
                if cable.from_bus in depth and cable.to_bus in depth:
                    if depth[cable.from_bus] >= depth[cable.to_bus]:
                        violations.append(
                            f"cable ({cable.from_bus},{cable.to_bus}) oriented away from substation"
                        )

    for bus in sorted(seen - {0}):
        if bus not in net.ders:
            violations.append(f"bus {bus} has no DerSpec")
    for key, der in net.ders.items():
        if key != der.bus:
            violations.append(f"DerSpec keyed {key} describes bus {der.bus}")
        if key not in seen or key == 0:
            violations.append(f"DerSpec for invalid bus {key}")
    return violations


def _require_valid(net: RadialNetwork) -> None:
    violations = validate_topology(net)
    if violations:
        raise TopologyError(f"invalid network: {violations[0]}", violations)


def path_cables(net: RadialNetwork, i: int) -> List[Cable]:
    """Cables on the unique path from bus 0 to bus ``i``, ordered from the substation."""
    if i not in set(net.buses) or i == 0:
        raise TopologyError(f"unknown bus id {i}" if i != 0 else "bus 0 has no path cables")
    graph = _graph(net)
    by_edge = {frozenset((c.from_bus, c.to_bus)): c for c in net.cables}
    try:
        nodes = nx.shortest_path(graph, 0, i)
    except nx.NetworkXNoPath:
        raise TopologyError(f"bus {i} is not connected to the substation")
    return [by_edge[frozenset(pair)] for pair in zip(nodes[:-1], nodes[1:])]


def path_matrix(net: RadialNetwork) -> NDArray[np.float64]:
    """
    Bus-to-cable path incidence M: M[i-1, j-1] = 1 iff the cable feeding bus j
    lies on the path from bus 0 to bus i.
    """
    n = net.n
    parent = {c.to_bus: c.from_bus for c in net.cables}
    M = np.zeros((n, n))
    for bus in range(1, n + 1):
        node = bus
        while node != 0:
            M[bus - 1, node - 1] = 1.0
            node = parent[node]
    return M


def cable_vectors(net: RadialNetwork) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Resistance and reactance of the cable feeding each non-slack bus."""
    r = np.zeros(net.n)
    x = np.zeros(net.n)
    for cable in net.cables:
        r[cable.to_bus - 1] = cable.resistance
        x[cable.to_bus - 1] = cable.reactance
    return r, x


def electrical_neighbors(net: RadialNetwork) -> Dict[int, List[int]]:
    """Cable adjacency among all buses, neighbor lists sorted."""
    neighbors: Dict[int, List[int]] = {bus: [] for bus in net.buses}
    for cable in net.cables:
        neighbors[cable.from_bus].append(cable.to_bus)
        neighbors[cable.to_bus].append(cable.from_bus)
    return {bus: sorted(adj) for bus, adj in neighbors.items()}


def der_box(net: RadialNetwork) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Reactive power limits (q_min, q_max) ordered by bus 1..N."""
    q_min = np.array([net.ders[b].q_min for b in range(1, net.n + 1)])
    q_max = np.array([net.ders[b].q_max for b in range(1, net.n + 1)])
    return q_min, q_max


def cost_vector(net: RadialNetwork) -> NDArray[np.float64]:
    return np.array([net.ders[b].cost for b in range(1, net.n + 1)])


def rated_pv(net: RadialNetwork) -> NDArray[np.float64]:
    return np.array([net.ders[b].p_rated for b in range(1, net.n + 1)])


def build_sensitivities(net: RadialNetwork) -> SensitivityMatrices:
    """
    Assemble R and X from shared path sums and invert X.

    The inverse is computed densely and then checked against the electrical
    adjacency pattern: any entry between non-adjacent buses larger than
    ``SPARSITY_RTOL * max|X_inv|`` raises SensitivityError.
    """
    _require_valid(net)
    M = path_matrix(net)
    r, x = cable_vectors(net)
    R = (M * r) @ M.T
    X = (M * x) @ M.T

    for name, matrix in (("R", R), ("X", X)):
        try:
            scipy.linalg.cholesky(matrix, lower=True)
        except np.linalg.LinAlgError:
            raise SensitivityError("matrix is not positive definite", matrix=name)

    factor = scipy.linalg.cho_factor(X)
    X_inv = scipy.linalg.cho_solve(factor, np.eye(net.n))
    X_inv = 0.5 * (X_inv + X_inv.T)

    # spectral norm of the residual, relative to ||I||_2 = 1
    identity_error = np.linalg.norm(X_inv @ X - np.eye(net.n), 2)
    if identity_error > INVERSE_RTOL:
        raise SensitivityError(f"X_inv @ X deviates from identity by {identity_error:.3e}", matrix="X_inv")

    adjacency = np.eye(net.n, dtype=bool)
    for cable in net.cables:
        if cable.from_bus != 0:
            i, j = cable.from_bus - 1, cable.to_bus - 1
            adjacency[i, j] = adjacency[j, i] = True

    scale = np.max(np.abs(X_inv))
    leak = np.abs(np.where(adjacency, 0.0, X_inv))
    if leak.size and leak.max() > SPARSITY_RTOL * scale:
        i, j = np.unravel_index(np.argmax(leak), leak.shape)
        raise SensitivityError(
            f"non-adjacent entry ({i + 1},{j + 1}) = {X_inv[i, j]:.3e} breaks the tree sparsity pattern",
            matrix="X_inv",
        )
    logger.debug("Built sensitivities for %d buses (lambda_max(X)=%.4g)", net.n, np.linalg.eigvalsh(X)[-1])
    return SensitivityMatrices(R=R, X=X, X_inv=X_inv, adjacency=adjacency)


def generate_synthetic_feeder(
    seed: int,
    n_buses: int,
    branching: BranchingPolicy = "chain-heavy",
    r_range: Tuple[float, float] = (0.005, 0.05),
    x_range: Tuple[float, float] = (0.005, 0.05),
    q_ratio: float = 0.2,
    target_peak_voltage: float = 1.07,
    xr_ratio: Optional[float] = None,
    v0: float = 1.0,
    v_min: float = 0.95,
    v_max: float = 1.05,
    s_base: float = 100.0,
    v_base: float = 0.4,
) -> RadialNetwork:
    """
    Seed-reproducible radial feeder with one PV inverter per non-slack bus.

    PV sizes are drawn from 3-10 kW-like relative sizes and then scaled so that
    peak generation alone lifts the linear-model voltage of the most sensitive
    bus to ``target_peak_voltage``; DER reactive limits are ±q_ratio·p_rated.
    With ``xr_ratio`` set every cable gets x = xr_ratio·r instead of an
    independent reactance draw.
    """
    if xr_ratio is not None and xr_ratio <= 0:
        raise TopologyError(f"xr_ratio must be positive, got {xr_ratio}")
    if n_buses < 2:
        raise TopologyError(f"a feeder needs at least 2 buses, got {n_buses}")
    rng = np.random.default_rng(seed)
    n = n_buses - 1

    parents = [0]
    for bus in range(2, n + 1):
        if branching == "chain":
            parent = bus - 1
        elif branching == "chain-heavy":
            parent = bus - 1 if rng.random() < 0.8 else int(rng.integers(0, bus - 1))
        elif branching == "random":
            parent = int(rng.integers(0, bus))
        else:
            raise TopologyError(f"unknown branching policy '{branching}'")
        parents.append(parent)

    resistances = rng.uniform(*r_range, size=n)
    reactances = rng.uniform(*x_range, size=n)
    if xr_ratio is not None:
        reactances = xr_ratio * resistances
    cables = [
        Cable(from_bus=parents[k], to_bus=k + 1, resistance=float(resistances[k]), reactance=float(reactances[k]))
        for k in range(n)
    ]
    shape = rng.uniform(3.0, 10.0, size=n) / 10.0

    draft = RadialNetwork(
        buses=list(range(n + 1)),
        cables=cables,
        ders={b: DerSpec(bus=b) for b in range(1, n + 1)},
        v0=v0, v_min=v_min, v_max=v_max, s_base=s_base, v_base=v_base,
    )
    M = path_matrix(draft)
    R = (M * resistances) @ M.T
    rise = R @ shape
    scale = (target_peak_voltage - v0) / float(rise.max())
    p_rated = scale * shape

    ders = {
        b: DerSpec(
            bus=b,
            q_min=-q_ratio * float(p_rated[b - 1]),
            q_max=q_ratio * float(p_rated[b - 1]),
            cost=1.0,
            p_rated=float(p_rated[b - 1]),
        )
        for b in range(1, n + 1)
    }
    logger.info("Generated %d-bus feeder (seed=%d, branching=%s)", n_buses, seed, branching)
    return draft.model_copy(update={"ders": ders})


# Network file -----------------------------------------------------------------

_HEADER_KEYS = ("s_base", "v_base", "v0", "v_min", "v_max")
_SECTIONS = ("BUSES", "CABLES", "DERS")


def _z_base(s_base_kva: float, v_base_kv: float) -> float:
    return (v_base_kv ** 2) * 1000.0 / s_base_kva


def save_network(net: RadialNetwork, path: Union[str, Path]) -> None:
    """Write ``net`` in SI units (ohm, kW, kVar) with the header fields first."""
    z_base = _z_base(net.s_base, net.v_base)
    lines = [
        "# voltlab network file",
        f"s_base = {net.s_base!r}  # kVA",
        f"v_base = {net.v_base!r}  # kV",
        f"v0 = {net.v0!r}  # pu",
        f"v_min = {net.v_min!r}  # pu",
        f"v_max = {net.v_max!r}  # pu",
        "BUSES",
        "# id",
    ]
    lines += [str(bus) for bus in net.buses]
    lines += ["CABLES", "# from,to,r_ohm,x_ohm"]
    lines += [
        f"{c.from_bus},{c.to_bus},{c.resistance * z_base!r},{c.reactance * z_base!r}" for c in net.cables
    ]
    lines += ["DERS", "# bus,q_min_kvar,q_max_kvar,cost,p_rated_kw"]
    lines += [
        f"{d.bus},{d.q_min * net.s_base!r},{d.q_max * net.s_base!r},{d.cost!r},{d.p_rated * net.s_base!r}"
        for _, d in sorted(net.ders.items())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_floats(parts: List[str], names: Tuple[str, ...], lineno: int) -> List[float]:
    if len(parts) != len(names):
        raise NetworkFormatError(f"expected {len(names)} fields ({','.join(names)}), got {len(parts)}", line=lineno)
    values = []
    for name, raw in zip(names, parts):
        try:
            values.append(float(raw))
        except ValueError:
            raise NetworkFormatError(f"field '{name}' is not a number: {raw!r}", line=lineno, field=name)
    return values


def load_network(path: Union[str, Path]) -> RadialNetwork:
    """
    Parse a network file and convert it to per-unit.

    Raises NetworkFormatError with line context on malformed input. Topology
    invariants are not enforced here; run validate_topology on the result.
    """
    header: Dict[str, float] = {}
    section: Optional[str] = None
    buses: List[int] = []
    raw_cables: List[Tuple[int, int, float, float]] = []
    raw_ders: Dict[int, Tuple[float, float, float, float]] = {}

    try:
        text = Path(path).read_text()
    except OSError as e:
        raise NetworkFormatError(f"cannot read network file {path}: {e.strerror or e}")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line in _SECTIONS:
            section = line
            continue
        if section is None:
            if "=" not in line:
                raise NetworkFormatError(f"expected 'key = value' header, got {line!r}", line=lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _HEADER_KEYS:
                raise NetworkFormatError(f"unknown header field '{key}'", line=lineno, field=key)
            header[key] = _parse_floats([value], (key,), lineno)[0]
            continue
        parts = [part.strip() for part in line.split(",")]
        if section == "BUSES":
            try:
                bus = int(parts[0])
            except ValueError:
                raise NetworkFormatError(f"bus id is not an integer: {parts[0]!r}", line=lineno, field="id")
            if len(parts) != 1:
                raise NetworkFormatError("BUSES rows hold a single id", line=lineno)
            if bus in buses:
                raise NetworkFormatError(f"duplicate bus id {bus}", line=lineno, field="id")
            buses.append(bus)
        elif section == "CABLES":
            f, t, r, x = _parse_floats(parts, ("from", "to", "r_ohm", "x_ohm"), lineno)
            raw_cables.append((int(f), int(t), r, x))
        else:
            bus, q_lo, q_hi, cost, p_rated = _parse_floats(
                parts, ("bus", "q_min_kvar", "q_max_kvar", "cost", "p_rated_kw"), lineno
            )
            if int(bus) in raw_ders:
                raise NetworkFormatError(f"duplicate DER for bus {int(bus)}", line=lineno, field="bus")
            raw_ders[int(bus)] = (q_lo, q_hi, cost, p_rated)

    if "v0" not in header:
        raise NetworkFormatError("missing slack voltage (v0)", field="v0")
    for key in ("s_base", "v_base"):
        if key not in header:
            raise NetworkFormatError(f"missing {key}", field=key)

    s_base, v_base = header["s_base"], header["v_base"]
    if s_base <= 0 or v_base <= 0:
        raise NetworkFormatError("s_base and v_base must be positive", field="s_base" if s_base <= 0 else "v_base")
    z_base = _z_base(s_base, v_base)
    try:
        cables = [
            Cable(from_bus=f, to_bus=t, resistance=r / z_base, reactance=x / z_base) for f, t, r, x in raw_cables
        ]
        ders = {
            b: DerSpec(bus=b, q_min=lo / s_base, q_max=hi / s_base, cost=c, p_rated=p / s_base)
            for b, (lo, hi, c, p) in raw_ders.items()
        }
        return RadialNetwork(
            buses=buses,
            cables=cables,
            ders=ders,
            v0=header["v0"],
            v_min=header.get("v_min", 0.95),
            v_max=header.get("v_max", 1.05),
            s_base=s_base,
            v_base=v_base,
        )
    except ValueError as e:
        raise NetworkFormatError(f"invalid network values: {e}")
