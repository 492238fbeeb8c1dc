"""
voltlab command-line entry point.

    python -m cli gen-network --seed 1 --buses 20 --out feeder.net
    python -m cli gen-profiles --seed 1 --net feeder.net --hours 0.5 --dt 6 --out profiles.csv
    python -m cli run --net feeder.net --profiles profiles.csv --controller nested --out results/
    python -m cli compare --net feeder.net --profiles profiles.csv --out results/
    python -m cli check --net feeder.net
    python -m cli history
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from app.errors import (
    EXIT_INPUT,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_UNEXPECTED,
    ConfigError,
    TopologyError,
    VoltLabError,
)
from app.settings import build_run_config, load_config_file
from controllers import max_inner_step_size
from grid_model import (
    SPARSITY_RTOL,
    build_sensitivities,
    generate_synthetic_feeder,
    load_network,
    save_network,
    validate_topology,
)
from scenario import (
    compare,
    export_results,
    generate_profiles,
    load_profiles,
    make_controller,
    most_sensitive_bus,
    run_dynamic,
    run_static,
    save_profiles,
)
from schemas import ControllerKind

logger = logging.getLogger("voltlab")

LOG_FORMAT = "%(asctime)s [%(levelname)8s] %(name)s: %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
ALL_CONTROLLERS = [k.value for k in ControllerKind]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voltlab",
        description="Online feedback optimization lab for distribution-grid voltage regulation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-network", help="generate a seeded synthetic radial feeder")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--buses", type=int, required=True, help="number of buses including the substation")
    p.add_argument("--branching", choices=["chain", "chain-heavy", "random"], default="chain-heavy",
                   help="tree shape policy")
    p.add_argument("--target-peak", type=float, default=1.07,
                   help="linear-model peak voltage under full PV and no load (pu)")
    p.add_argument("--q-ratio", type=float, default=0.2, help="DER reactive limit as a fraction of rated PV")
    p.add_argument("--xr-ratio", type=float, default=None,
                   help="fixed reactance-to-resistance ratio for every cable (default: independent draws)")
    p.add_argument("--out", type=Path, required=True, help="network file to write")

    p = sub.add_parser("gen-profiles", help="generate seeded PV and load profiles for a network")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--net", type=Path, required=True, help="network file")
    p.add_argument("--hours", type=float, default=0.5, help="duration in hours")
    p.add_argument("--dt", type=float, default=6.0, help="sample spacing in seconds")
    p.add_argument("--start-hour", type=float, default=None,
                   help="start time in hours after midnight (default: centred on the PV peak)")
    p.add_argument("--units", choices=["pu", "si"], default="pu", help="units of the written CSV")
    p.add_argument("--out", type=Path, required=True, help="profile CSV to write")

    for name, help_text in (("run", "simulate one controller"), ("compare", "simulate several controllers")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--net", type=Path, required=True, help="network file")
        p.add_argument("--profiles", type=Path, required=True, help="profile CSV (t,bus,p_demand,q_demand,p_gen)")
        p.add_argument("--units", choices=["pu", "si"], default="pu", help="units of the profile CSV")
        p.add_argument("--config", type=Path, default=None, help="key = value configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--physical-units", action="store_true",
                       help="use the published physical-unit step sizes (networks in kW/kVar)")
        p.add_argument("--seed", type=int, default=None, help="measurement noise seed")
        p.add_argument("--noise", type=float, default=None, help="measurement noise std (pu)")
        p.add_argument("--setpoints-per-sample", type=int, default=None,
                       help="implemented setpoints per profile sample")
        p.add_argument("--db", default=None, metavar="URL",
                       help="store run summaries in this database (or set VOLTLAB_DB_URL)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "run":
            p.add_argument("--controller", choices=ALL_CONTROLLERS, default=None, help="controller kind")
            p.add_argument("--static", action="store_true",
                           help="freeze the first profile sample and iterate to convergence")
            p.add_argument("--agents", action="store_true", help="run the nested controller as per-bus agents")
            p.add_argument("--messages", type=Path, default=None,
                           help="write the agent message log to this CSV (implies --agents)")
        else:
            p.add_argument("--controllers", nargs="+", choices=ALL_CONTROLLERS, default=ALL_CONTROLLERS,
                           help="controllers to compare")
            p.add_argument("--jobs", type=int, default=1, help="parallel runs")

    p = sub.add_parser("check", help="validate a network and report sensitivity diagnostics")
    p.add_argument("--net", type=Path, required=True, help="network file")

    p = sub.add_parser("history", help="list runs stored in the run ledger")
    p.add_argument("--db", default=None, metavar="URL", help="database URL (or set VOLTLAB_DB_URL)")
    p.add_argument("--limit", type=int, default=20, help="number of runs to show")
    return parser


def _run_config(args, controller: Optional[str] = None, use_agents: bool = False):
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key, value in (("controller", controller), ("seed", args.seed), ("noise_std", args.noise),
                       ("setpoints_per_sample", args.setpoints_per_sample)):
        if value is not None:
            overrides[key] = value
    if use_agents:
        overrides["use_agents"] = True
    return build_run_config(file_values, overrides, physical_units=args.physical_units)


def _load_inputs(args):
    net = load_network(args.net)
    violations = validate_topology(net)
    if violations:
        raise TopologyError(f"invalid network: {violations[0]}", violations)
    ts = load_profiles(args.profiles, units=args.units, s_base=net.s_base)
    return net, ts


def _record(args, results, net, run_cfg) -> None:
    if not (args.db or os.getenv("VOLTLAB_DB_URL")):
        return
    from database import session_factory
    from models import record_run

    Session = session_factory(args.db)
    with Session() as session:
        for result in results:
            run = record_run(session, result, net, run_cfg)
            print(f"💾 Stored run #{run.id} ({run.controller})")


def _print_metrics(result) -> None:
    m = result.metrics
    print(f"controller:             {result.controller}")
    print(f"instants:               {result.instants}")
    print(f"outer iterations:       {result.outer_iterations}")
    print(f"AVV worst bus:          {m.avv_worst_bus:.6e} (bus {m.worst_bus})")
    print(f"max voltage violation:  {m.max_violation:.6e} pu")
    print(f"max capacity violation: {m.max_capacity_violation:.3%}")
    print(f"mean controller time:   {m.mean_iter_time:.4f} ms")


def cmd_gen_network(args) -> int:
    net = generate_synthetic_feeder(args.seed, args.buses, branching=args.branching,
                                    q_ratio=args.q_ratio, target_peak_voltage=args.target_peak,
                                    xr_ratio=args.xr_ratio)
    save_network(net, args.out)
    print(f"✅ Wrote {args.buses}-bus feeder to {args.out}")
    return EXIT_OK


def cmd_gen_profiles(args) -> int:
    net = load_network(args.net)
    start = None if args.start_hour is None else args.start_hour * 3600.0
    ts = generate_profiles(args.seed, net, duration=args.hours * 3600.0, dt=args.dt, start=start)
    save_profiles(ts, args.out, units=args.units, s_base=net.s_base)
    print(f"✅ Wrote {ts.samples} samples for {ts.n} buses to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    use_agents = args.agents or args.messages is not None
    run_cfg = _run_config(args, controller=args.controller, use_agents=use_agents)
    net, ts = _load_inputs(args)
    sens = build_sensitivities(net)
    controller = make_controller(run_cfg.controller, net, sens, run_cfg)
    if args.static:
        injections = (ts.p_demand[0], ts.q_demand[0], ts.p_generation[0])
        result = run_static(net, injections, controller, run_cfg)
    else:
        result = run_dynamic(net, ts, controller, run_cfg)
    export_results(result, args.out)
    if args.messages is not None:
        from agent_sim import assert_locality, export_message_log

        log = getattr(controller, "message_log", None)
        if log is None:
            raise ConfigError(f"--messages needs the nested controller, got {run_cfg.controller.value}")
        export_message_log(log, args.messages)
        report = assert_locality(log, controller.graph)
        print(f"locality:               {'pass' if report else f'FAIL ({len(report.offending)} messages)'}")
    _print_metrics(result)
    _record(args, [result], net, run_cfg)
    if result.error:
        print(f"❌ run aborted: {result.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_compare(args) -> int:
    run_cfg = _run_config(args)
    net, ts = _load_inputs(args)
    comparison = compare(net, ts, args.controllers, run_cfg, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    comparison.table.to_csv(args.out / "compare.csv", index=False, float_format="%.17g")
    print(f"Average voltage violation at the most sensitive bus ({comparison.sensitive_bus}):")
    print(comparison.table[["controller", "avv_sensitive_bus", "ratio_vs_centralized"]].to_string(
        index=False, float_format=lambda x: f"{x:.4e}"))
    _record(args, comparison.results.values(), net, run_cfg)
    return EXIT_OK


def cmd_check(args) -> int:
    net = load_network(args.net)
    violations = validate_topology(net)
    if violations:
        for v in violations:
            print(f"❌ {v}")
        raise TopologyError(f"invalid network: {len(violations)} violation(s)", violations)
    sens = build_sensitivities(net)
    off_pattern = np.abs(np.where(sens.adjacency, 0.0, sens.X_inv))
    leak = float(off_pattern.max() / np.abs(sens.X_inv).max()) if net.n > 1 else 0.0
    print(f"✅ {net.n + 1} buses, {len(net.cables)} cables, radial")
    print(f"lambda_max(X):          {sens.lambda_max:.6g}")
    print(f"lambda_min(X):          {sens.lambda_min:.6g}")
    print(f"max inner step size:    {max_inner_step_size(sens):.6g}")
    print(f"X^-1 sparsity leak:     {leak:.3e} (tolerance {SPARSITY_RTOL:g})")
    print(f"most sensitive bus:     {most_sensitive_bus(sens)}")
    return EXIT_OK


def cmd_history(args) -> int:
    from database import session_factory
    from models import recent_runs

    Session = session_factory(args.db)
    with Session() as session:
        runs = recent_runs(session, args.limit)
        if not runs:
            print("no stored runs")
        for run in runs:
            print(f"#{run.id:<4} {run.created_at:%Y-%m-%d %H:%M:%S}  {run.controller:<12} "
                  f"AVV {run.avv_worst_bus:.4e} (bus {run.worst_bus})  seed {run.seed}  "
                  f"net {run.network_digest[:10]}")
    return EXIT_OK


COMMANDS = {
    "gen-network": cmd_gen_network,
    "gen-profiles": cmd_gen_profiles,
    "run": cmd_run,
    "compare": cmd_compare,
    "check": cmd_check,
    "history": cmd_history,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format=LOG_FORMAT,
        datefmt=LOG_DATE_FORMAT,
    )
    try:
        return COMMANDS[args.command](args)
    except VoltLabError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"❌ unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
