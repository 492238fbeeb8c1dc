"""
Experiment orchestration: load/PV profiles, the plant-controller feedback
loop for static and time-varying disturbances, metrics and CSV export.

One simulated instant means: apply the disturbance of the current sample,
implement the controller's pending setpoint, solve the plant, measure, and
hand the measurement to the controller for its next setpoint.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from agent_sim import AgentNestedController
from app.errors import PowerFlowDivergedError, ProfileFormatError, VoltLabError
from controllers import Box, FeedbackController, build_controller, capability_box
from grid_model import SensitivityMatrices, build_sensitivities, rated_pv
from power_flow import FeederPlant, MeasurementConfig
from schemas import ControllerKind, Metrics, RadialNetwork, RunConfig

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = ["t", "bus", "p_demand", "q_demand", "p_gen"]
Units = Literal["pu", "si"]

# synthetic profile shape
PV_PEAK_HOUR = 12.0
PV_SIGMA_HOURS = 2.5
CLOUD_DEPTH = 0.15
CLOUD_PERSISTENCE = 0.95
LOAD_FRACTION = 0.15
LOAD_NOISE = 0.1
LOAD_POWER_FACTOR_RATIO = 0.3


@dataclass(frozen=True)
class ScenarioTimeSeries:
    """Per-bus disturbance samples on a uniform timeline; arrays are (K, N) in pu."""
    timestamps: NDArray[np.float64]
    p_demand: NDArray[np.float64]
    q_demand: NDArray[np.float64]
    p_generation: NDArray[np.float64]

    def __post_init__(self):
        k = len(self.timestamps)
        if k == 0:
            raise ProfileFormatError("time series has no samples")
        shapes = {self.p_demand.shape, self.q_demand.shape, self.p_generation.shape}
        if len(shapes) != 1 or self.p_demand.shape[0] != k or self.p_demand.ndim != 2:
            raise ProfileFormatError(f"profile arrays must all be ({k}, N), got {sorted(shapes)}")
        if k > 1:
            steps = np.diff(self.timestamps)
            if steps[0] <= 0 or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-9):
                raise ProfileFormatError("timestamps must be increasing and uniformly spaced")
        for name in ("timestamps", "p_demand", "q_demand", "p_generation"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ProfileFormatError(f"{name} contains non-finite values")

    @property
    def samples(self) -> int:
        return len(self.timestamps)

    @property
    def n(self) -> int:
        return self.p_demand.shape[1]

    @property
    def dt(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0]) if self.samples > 1 else 1.0

    @classmethod
    def constant(cls, p_demand, q_demand, p_generation, samples: int, dt: float = 1.0) -> "ScenarioTimeSeries":
        rows = lambda a: np.tile(np.asarray(a, dtype=float), (samples, 1))
        return cls(
            timestamps=np.arange(samples) * dt,
            p_demand=rows(p_demand),
            q_demand=rows(q_demand),
            p_generation=rows(p_generation),
        )


@dataclass
class RunResult:
    """Per-instant trace of one run plus its summary metrics."""
    controller: str
    timestamps: NDArray[np.float64]
    voltages: NDArray[np.float64]
    setpoints: NDArray[np.float64]
    lam: Optional[NDArray[np.float64]]
    mu: Optional[NDArray[np.float64]]
    iter_time_ms: NDArray[np.float64]
    plant_solves: NDArray[np.int64]
    outer_marker: NDArray[np.bool_]
    excursion_abs: NDArray[np.float64]
    excursion_rel: NDArray[np.float64]
    excursion_allowance: NDArray[np.float64]
    metrics: Metrics
    outer_iterations: int = 0
    converged_iteration: Optional[int] = None
    error: Optional[str] = None

    @property
    def instants(self) -> int:
        return len(self.timestamps)

    @property
    def final_setpoint(self) -> NDArray[np.float64]:
        return self.setpoints[-1]


def compute_avv(v_trace, v_min: float, v_max: float) -> NDArray[np.float64]:
    """Average voltage violation per bus: mean over samples of [v - v_max]+ + [v_min - v]+."""
    v = np.asarray([getattr(s, "v", s) for s in v_trace], dtype=float)
    if v.size == 0:
        raise ValueError("voltage trace is empty")
    v = np.atleast_2d(v)
    violation = np.maximum(v - v_max, 0.0) + np.maximum(v_min - v, 0.0)
    return violation.mean(axis=0)


def most_sensitive_bus(sens: SensitivityMatrices) -> int:
    """Bus whose voltage reacts most to its own reactive injection."""
    return int(np.argmax(np.diag(sens.X))) + 1


def make_controller(kind: Union[ControllerKind, str], net: RadialNetwork, sens: SensitivityMatrices,
                    run_cfg: RunConfig) -> FeedbackController:
    kind = ControllerKind(kind)
    if run_cfg.use_agents and kind == ControllerKind.NESTED:
        return AgentNestedController(net, sens, run_cfg.controller_config)
    return build_controller(kind, net, sens, run_cfg.controller_config, noise_std=run_cfg.noise_std)


def _plant(net: RadialNetwork, run_cfg: RunConfig) -> FeederPlant:
    return FeederPlant(
        net,
        tol=run_cfg.plant_tol,
        max_iter=run_cfg.plant_max_iter,
        measurement=MeasurementConfig(noise_std=run_cfg.noise_std, seed=run_cfg.seed),
    )


class _Recorder:
    def __init__(self):
        self.t: List[float] = []
        self.v: List[NDArray] = []
        self.q: List[NDArray] = []
        self.lam: List[Optional[NDArray]] = []
        self.mu: List[Optional[NDArray]] = []
        self.ms: List[float] = []
        self.solves: List[int] = []
        self.outer: List[bool] = []
        self.exc_abs: List[float] = []
        self.exc_rel: List[float] = []
        self.allowance: List[float] = []

    def result(self, controller: FeedbackController, net: RadialNetwork, converged_iteration=None,
               error=None) -> RunResult:
        n = net.n
        voltages = np.array(self.v).reshape(-1, n)
        has_duals = bool(self.lam) and all(l is not None for l in self.lam)
        result = RunResult(
            controller=controller.kind.value,
            timestamps=np.array(self.t, dtype=float),
            voltages=voltages,
            setpoints=np.array(self.q).reshape(-1, n),
            lam=np.array(self.lam).reshape(-1, n) if has_duals else None,
            mu=np.array(self.mu).reshape(-1, n) if has_duals else None,
            iter_time_ms=np.array(self.ms, dtype=float),
            plant_solves=np.array(self.solves, dtype=np.int64),
            outer_marker=np.array(self.outer, dtype=bool),
            excursion_abs=np.array(self.exc_abs, dtype=float),
            excursion_rel=np.array(self.exc_rel, dtype=float),
            excursion_allowance=np.array(self.allowance, dtype=float),
            metrics=_metrics(voltages, net, self.ms, self.exc_rel),
            outer_iterations=controller.outer_iteration,
            converged_iteration=converged_iteration,
            error=error,
        )
        return result


def _metrics(voltages, net: RadialNetwork, ms, exc_rel) -> Metrics:
    if len(voltages) == 0:
        return Metrics(avv_per_bus=[0.0] * net.n, avv_worst_bus=0.0, worst_bus=1, max_violation=0.0)
    avv = compute_avv(voltages, net.v_min, net.v_max)
    worst = int(np.argmax(avv))
    violation = np.maximum(voltages - net.v_max, 0.0) + np.maximum(net.v_min - voltages, 0.0)
    return Metrics(
        avv_per_bus=[float(a) for a in avv],
        avv_worst_bus=float(avv[worst]),
        worst_bus=worst + 1,
        max_violation=float(violation.max()),
        mean_iter_time=float(np.mean(ms)) if len(ms) else 0.0,
        max_capacity_violation=float(np.max(exc_rel)) if len(exc_rel) else 0.0,
    )


def _instant(plant: FeederPlant, controller: FeedbackController, q: NDArray, box: Box, t: float,
             rec: _Recorder, allowance: float) -> NDArray:
    """Implement ``q``, measure, and return the controller's next setpoint."""
    solves_before = plant.solves
    v = plant(q)
    exc = box.excursion(q)
    rel = box.relative_excursion(q)
    if exc.max() > 0:
        logger.debug("setpoint leaves the box by %.3e pu (allowance %.3e) at t=%.1f", exc.max(), allowance, t)
    started = time.perf_counter()
    q_next = controller.step(v, box)
    elapsed_ms = (time.perf_counter() - started) * 1000.0
    rec.t.append(t)
    rec.v.append(v.v)
    rec.q.append(np.asarray(q, dtype=float).copy())
    rec.lam.append(None if controller.duals is None else controller.duals.lam.copy())
    rec.mu.append(None if controller.duals is None else controller.duals.mu.copy())
    rec.ms.append(elapsed_ms)
    rec.solves.append(plant.solves - solves_before)
    rec.outer.append(controller.completes_outer)
    rec.exc_abs.append(float(exc.max()))
    rec.exc_rel.append(float(rel.max()))
    rec.allowance.append(allowance)
    return q_next


def _log_summary(result: RunResult) -> None:
    logger.info(
        "✅ %s: %d instants, %d outer iterations, worst AVV %.3e at bus %d, max box excursion %.2e",
        result.controller, result.instants, result.outer_iterations, result.metrics.avv_worst_bus,
        result.metrics.worst_bus, float(result.excursion_abs.max()) if result.instants else 0.0,
    )


def run_static(net: RadialNetwork, injections: Tuple, controller: FeedbackController, run_cfg: RunConfig,
               max_outer: Optional[int] = None, q0=None) -> RunResult:
    """
    Iterate ``controller`` against the AC plant at a frozen disturbance.

    ``injections`` is (p_demand, q_demand, p_generation). Stops after
    ``max_outer`` outer iterations or once an outer iteration moves the
    setpoints by at most ``run_cfg.static_tol``. A plant fault ends the run
    with a partial trace and ``error`` set.
    """
    p_demand, q_demand, p_generation = (np.asarray(a, dtype=float) for a in injections)
    max_outer = run_cfg.max_outer if max_outer is None else max_outer
    cfg = controller.cfg
    plant = _plant(net, run_cfg)
    plant.set_disturbance(p_demand, q_demand, p_generation)
    box = capability_box(net, p_generation, cfg.capability, cfg.deflation)
    rec = _Recorder()
    q = controller.reset(q0)
    q_outer = q.copy()
    allowance = 0.0
    converged_iteration = None
    instant = 0
    logger.info("🚀 Static run: %s on %d buses, up to %d outer iterations", controller.kind.value, net.n, max_outer)
    try:
        while controller.outer_iteration < max_outer:
            q = _instant(plant, controller, q, box, float(instant), rec, allowance)
            allowance = controller.excursion_allowance
            instant += 1
            if controller.completes_outer:
                if np.max(np.abs(q - q_outer), initial=0.0) <= run_cfg.static_tol:
                    converged_iteration = controller.outer_iteration - 1
                    break
                q_outer = q.copy()
    except PowerFlowDivergedError as exc:
        logger.error("❌ Plant fault after %d instants: %s", instant, exc)
        return rec.result(controller, net, error=str(exc))
    result = rec.result(controller, net, converged_iteration=converged_iteration)
    _log_summary(result)
    return result


def run_dynamic(net: RadialNetwork, ts: ScenarioTimeSeries, controller: FeedbackController,
                run_cfg: RunConfig, q0=None) -> RunResult:
    """
    Track a time-varying disturbance with one implemented setpoint per instant.

    Each profile sample spans ``setpoints_per_sample`` instants of
    ``dt / setpoints_per_sample`` seconds. A new sample reaches the plant only
    when the controller is about to implement an outer iterate, so the
    measurements of one outer iteration (base point, exploration and inner
    steps) always share a disturbance; for nested runs whose 2 + T instants
    do not divide a sample, the switch waits for the next outer boundary.
    """
    if ts.n != net.n:
        raise ProfileFormatError(f"profiles cover {ts.n} buses, network has {net.n}")
    cfg = controller.cfg
    spp = run_cfg.setpoints_per_sample
    plant = _plant(net, run_cfg)
    rec = _Recorder()
    q = controller.reset(q0)
    allowance = 0.0
    applied = -1
    box = None
    logger.info("🚀 Dynamic run: %s over %d samples x %d setpoints", controller.kind.value, ts.samples, spp)
    try:
        for m in range(ts.samples * spp):
            due = m // spp
            if due != applied and controller.completes_outer:
                applied = due
                plant.set_disturbance(ts.p_demand[due], ts.q_demand[due], ts.p_generation[due])
                box = capability_box(net, ts.p_generation[due], cfg.capability, cfg.deflation)
            t = float(ts.timestamps[0] + m * ts.dt / spp)
            q = _instant(plant, controller, q, box, t, rec, allowance)
            allowance = controller.excursion_allowance
    except PowerFlowDivergedError as exc:
        logger.error("❌ Plant fault after %d instants: %s", len(rec.t), exc)
        return rec.result(controller, net, error=str(exc))
    result = rec.result(controller, net)
    _log_summary(result)
    return result


def setpoint_deviation(result: RunResult, reference: RunResult) -> float:
    """Mean of (q - q_reference) over the common instants and all buses."""
    k = min(result.instants, reference.instants)
    return float(np.mean(result.setpoints[:k] - reference.setpoints[:k]))


# Profiles -----------------------------------------------------------------------

def generate_profiles(seed: int, net: RadialNetwork, duration: float, dt: float,
                      start: Optional[float] = None) -> ScenarioTimeSeries:
    """
    Synthetic midday PV and load profiles.

    PV follows a bell curve peaking at noon scaled by each bus's rated power,
    dimmed by a seeded cloud process; loads fluctuate around a fraction of
    the rated PV. ``start`` is seconds after midnight and defaults to a window
    centred on the PV peak.
    """
    if duration <= 0 or dt <= 0:
        raise ValueError("duration and dt must be positive")
    rng = np.random.default_rng(seed)
    samples = max(int(round(duration / dt)), 1)
    start = PV_PEAK_HOUR * 3600.0 - duration / 2.0 if start is None else start
    t = start + np.arange(samples) * dt
    hours = t / 3600.0
    bell = np.exp(-0.5 * ((hours - PV_PEAK_HOUR) / PV_SIGMA_HOURS) ** 2)

    p_rated = rated_pv(net)
    cloud = np.empty((samples, net.n))
    state = rng.random(net.n)
    for k in range(samples):
        state = CLOUD_PERSISTENCE * state + (1 - CLOUD_PERSISTENCE) * rng.random(net.n)
        cloud[k] = state
    p_gen = p_rated * bell[:, None] * (1.0 - CLOUD_DEPTH * cloud)

    base = LOAD_FRACTION * p_rated
    p_demand = np.maximum(base * (1.0 + LOAD_NOISE * rng.standard_normal((samples, net.n))), 0.0)
    q_demand = LOAD_POWER_FACTOR_RATIO * p_demand
    logger.info("Generated %d profile samples (dt=%gs, seed=%d)", samples, dt, seed)
    return ScenarioTimeSeries(timestamps=t, p_demand=p_demand, q_demand=q_demand, p_generation=p_gen)


def profiles_frame(ts: ScenarioTimeSeries) -> pd.DataFrame:
    k, n = ts.p_demand.shape
    return pd.DataFrame({
        "t": np.repeat(ts.timestamps, n),
        "bus": np.tile(np.arange(1, n + 1), k),
        "p_demand": ts.p_demand.ravel(),
        "q_demand": ts.q_demand.ravel(),
        "p_gen": ts.p_generation.ravel(),
    }, columns=PROFILE_COLUMNS)


def save_profiles(ts: ScenarioTimeSeries, path: Union[str, Path], units: Units = "pu",
                  s_base: Optional[float] = None) -> Path:
    """Write the long-format profile CSV; ``si`` writes kW/kVar using ``s_base`` (kVA)."""
    frame = profiles_frame(ts)
    if units == "si":
        if s_base is None:
            raise ValueError("s_base is required to write SI profiles")
        frame[["p_demand", "q_demand", "p_gen"]] *= s_base
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def load_profiles(path: Union[str, Path], units: Units = "pu", s_base: Optional[float] = None) -> ScenarioTimeSeries:
    """
    Read a profile CSV with header t,bus,p_demand,q_demand,p_gen.

    Every timestamp must list buses 1..N exactly once. SI files are in kW and
    kVar and are divided by ``s_base`` (kVA).
    """
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ProfileFormatError(f"cannot parse {path}: {exc}") from exc
    missing = [c for c in PROFILE_COLUMNS if c not in frame.columns]
    if missing:
        raise ProfileFormatError(f"missing column(s) {', '.join(missing)}; expected header {','.join(PROFILE_COLUMNS)}")
    for column in PROFILE_COLUMNS:
        numeric = pd.to_numeric(frame[column], errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric.fillna(0.0))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
            raise ProfileFormatError(f"non-numeric or missing {column} value '{frame[column].iloc[row - 1]}'", row=row)
        frame[column] = numeric

    frame["bus"] = frame["bus"].astype(int)
    buses = sorted(frame["bus"].unique())
    n = len(buses)
    if buses != list(range(1, n + 1)):
        raise ProfileFormatError(f"bus ids must be 1..{n}, got {buses[:5]}...")
    duplicated = frame.duplicated(subset=["t", "bus"])
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0]) + 1
        raise ProfileFormatError("duplicate (t, bus) entry", row=row)
    counts = frame.groupby("t")["bus"].count()
    if (counts != n).any():
        t_bad = counts[counts != n].index[0]
        row = int(np.flatnonzero((frame["t"] == t_bad).to_numpy())[0]) + 1
        raise ProfileFormatError(f"timestamp {t_bad:g} lists {counts[t_bad]} of {n} buses", row=row)

    scale = 1.0
    if units == "si":
        if s_base is None:
            raise ProfileFormatError("SI profiles need the network's s_base")
        scale = 1.0 / s_base
    wide = {
        name: frame.pivot(index="t", columns="bus", values=name).sort_index().to_numpy() * scale
        for name in ("p_demand", "q_demand", "p_gen")
    }
    timestamps = np.sort(frame["t"].unique()).astype(float)
    return ScenarioTimeSeries(
        timestamps=timestamps,
        p_demand=wide["p_demand"],
        q_demand=wide["q_demand"],
        p_generation=wide["p_gen"],
    )


# Export -------------------------------------------------------------------------

def _wide(t, values, prefix: str, n: int) -> pd.DataFrame:
    frame = pd.DataFrame(values, columns=[f"{prefix}_{b}" for b in range(1, n + 1)])
    frame.insert(0, "t", t)
    return frame


def metrics_frame(result: RunResult) -> pd.DataFrame:
    m = result.metrics
    rows = [(f"avv_{b}", v) for b, v in enumerate(m.avv_per_bus, start=1)]
    rows += [
        ("avv_worst_bus", m.avv_worst_bus),
        ("worst_bus", m.worst_bus),
        ("max_violation", m.max_violation),
        ("mean_setpoint_deviation_vs_reference", m.mean_setpoint_deviation_vs_reference),
        ("mean_iter_time_ms", m.mean_iter_time),
        ("max_capacity_violation", m.max_capacity_violation),
    ]
    return pd.DataFrame(rows, columns=["metric", "value"])


def export_results(result: RunResult, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write voltages.csv (t, v_1..v_N), setpoints.csv (t, q_1..q_N),
    duals.csv (t, lam_1..lam_N, mu_1..mu_N), metrics.csv (metric, value) and
    trace.csv (per-instant plant solves, outer markers, box excursions).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = result.voltages.shape[1]
    t = result.timestamps
    frames = {
        "voltages.csv": _wide(t, result.voltages, "v", n),
        "setpoints.csv": _wide(t, result.setpoints, "q", n),
    }
    if result.lam is not None:
        duals = _wide(t, result.lam, "lam", n)
        for b in range(1, n + 1):
            duals[f"mu_{b}"] = result.mu[:, b - 1]
    else:
        duals = pd.DataFrame({"t": t})
    frames["duals.csv"] = duals
    frames["metrics.csv"] = metrics_frame(result)
    frames["trace.csv"] = pd.DataFrame({
        "t": t,
        "plant_solves": result.plant_solves,
        "outer": result.outer_marker.astype(int),
        "excursion_abs": result.excursion_abs,
        "excursion_rel": result.excursion_rel,
        "excursion_allowance": result.excursion_allowance,
    })
    paths = {}
    for name, frame in frames.items():
        paths[name] = out / name
        frame.to_csv(paths[name], index=False, float_format="%.17g")
    logger.info("📝 Exported %d instants to %s", result.instants, out)
    return paths


# Comparison ---------------------------------------------------------------------

def _avv_ratio(avv: float, reference_avv: float) -> float:
    """AVV relative to the reference run; 1 when both are zero."""
    if reference_avv > 0:
        return avv / reference_avv
    return float("inf") if avv > 0 else 1.0


@dataclass
class Comparison:
    table: pd.DataFrame
    results: Dict[str, RunResult] = field(default_factory=dict)
    sensitive_bus: int = 1


def compare(net: RadialNetwork, ts: ScenarioTimeSeries, kinds: Sequence[Union[ControllerKind, str]],
            run_cfg: RunConfig, jobs: int = 1) -> Comparison:
    """
    Run several controllers on the same scenario and tabulate AVV at the most
    sensitive bus, sorted ascending, with the ratio to the centralized run.
    """
    kinds = [ControllerKind(k) for k in kinds]
    sens = build_sensitivities(net)
    bus = most_sensitive_bus(sens)

    def one(kind: ControllerKind) -> RunResult:
        return run_dynamic(net, ts, make_controller(kind, net, sens, run_cfg), run_cfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(zip((k.value for k in kinds), pool.map(one, kinds)))
    else:
        results = {k.value: one(k) for k in kinds}

    failed = {name: r.error for name, r in results.items() if r.error}
    if failed:
        name, reason = next(iter(failed.items()))
        raise VoltLabError(f"{name} run aborted: {reason}")

    reference = results.get(ControllerKind.CENTRALIZED.value)
    rows = []
    for name, r in results.items():
        avv = r.metrics.avv_per_bus[bus - 1]
        deviation = setpoint_deviation(r, reference) if reference is not None and name != reference.controller else None
        r.metrics = r.metrics.model_copy(update={"mean_setpoint_deviation_vs_reference": deviation})
        ratio = _avv_ratio(avv, reference.metrics.avv_per_bus[bus - 1]) if reference is not None else None
        rows.append({
            "controller": name,
            "avv_sensitive_bus": avv,
            "ratio_vs_centralized": ratio,
            "avv_worst_bus": r.metrics.avv_worst_bus,
            "max_violation": r.metrics.max_violation,
            "max_capacity_violation": r.metrics.max_capacity_violation,
            "mean_setpoint_deviation": deviation,
            "mean_iter_time_ms": r.metrics.mean_iter_time,
        })
    table = pd.DataFrame(rows).sort_values(["avv_sensitive_bus", "controller"], kind="mergesort").reset_index(drop=True)
    return Comparison(table=table, results=results, sensitive_bus=bus)
