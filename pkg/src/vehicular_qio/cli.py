"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 solver did not
converge or diverged, 1 anything else.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .energy import CostBundle, FeasibleSet
from .exceptions import ConfigError, Diverged, NotConverged, UnknownScenario, VehicularQIOError
from .qio import QioConfig, QioTrace, optimize
from .sim import SCALES, SCENARIOS, VARIANTS, scenario, simulate
from .sim.ablation import ablate
from .sim.output import ablation_to_csv, atomic_write, csv_text, write_reports
from .transport import SinkhornTransport

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SCENARIO_COLUMNS = ("name", "vehicles", "rsus", "fog_nodes", "duration_s", "beacon_hz", "payload_bytes",
                    "demand_multiplier", "nr_fraction", "rsu_outage_frac", "incident_rate", "fog_cpu_frac")


def _names(raw, valid, what, exc=ConfigError):
    names = [s.strip() for s in raw.split(",") if s.strip()]
    bad = [s for s in names if s not in valid]
    if bad or not names:
        raise exc(f"unknown {what} {', '.join(map(repr, bad)) or repr(raw)}; valid options: {', '.join(valid)}")
    return names


def _scenario_configs(args, names):
    text = None
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"{args.config}: cannot read config: {exc.strerror}") from exc
    out = []
    for name in names:
        if text is None:
            out.append(scenario(name, args.scale, seed=0 if args.seed is None else args.seed))
        else:
            out.append(C.load_config(text, args.config, name if args.scenario else None, args.scale, args.seed))
    return out


def summary_line(report, rep):
    def f(x):
        return "NA" if x is None else f"{x:.3f}"

    return (f"{report.scenario} {report.variant} rep{rep} seed={report.seed} latency_ms={f(report.mean_latency_ms)} "
            f"pdr_pct={f(report.pdr_pct)} reliability_pct={f(report.reliability_pct)} att_min={f(report.att_min)} "
            f"nci_pct={f(report.nci_pct)}")


def cmd_run(args):
    names = _names(args.scenario or "S1", SCENARIOS, "scenario", UnknownScenario)
    variants = _names(args.variants, VARIANTS, "variant")
    if args.reps < 1:
        raise ConfigError("--reps must be >= 1")
    entries = []
    for cfg in _scenario_configs(args, names):
        for v in variants:
            for i in range(args.reps):
                rep = simulate(cfg.replace(variant=v, seed=int(cfg.seed) + i))
                entries.append((rep, i))
                print(summary_line(rep, i), flush=True)
    write_reports(args.out, entries, args.format)
    return EXIT_OK


def cmd_ablate(args):
    names = _names(args.scenario or ",".join(SCENARIOS), SCENARIOS, "scenario", UnknownScenario)
    variants = _names(args.variants, VARIANTS, "variant")
    if args.reps < 1:
        raise ConfigError("--reps must be >= 1")
    configs = _scenario_configs(args, names)
    table = ablate(configs[0], variants, args.reps, scenarios=configs, scale=args.scale, n_jobs=args.jobs)
    entries = []
    for s in table.scenarios:
        for v in table.variants:
            for i, rep in enumerate(table.reports[(s, v)]):
                entries.append((rep, i))
                print(summary_line(rep, i), flush=True)
    write_reports(args.out, entries, args.format)
    atomic_write(Path(args.out) / "ablation.csv", ablation_to_csv(table))
    if "full" in variants:
        for v in variants:
            if v != "full":
                k, n, p = table.sign_test("full", v)
                print(f"sign test full < {v}: {k}/{n} pairs, p={p:.3g}")
    return EXIT_OK


def _read(path):
    if not path:
        raise ConfigError("--config is required for this subcommand")
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read problem file: {exc.strerror}") from exc


def cmd_optimize(args):
    p = C.load_optimize_problem(_read(args.config), args.config)
    costs = p["costs"]
    K = next(iter(costs.values())).size
    weights = p.get("weights") or {q: 1.0 / len(costs) for q in costs}
    try:
        bundle = CostBundle(costs, weights)
        fs = FeasibleSet(p.get("caps", np.ones(K)), frozenset(p.get("forbidden", ())))
        settings = {k: p[k] for k in ("eta", "rho", "beta", "T0", "max_iters", "tol_energy", "project") if k in p}
        seed = args.seed if args.seed is not None else p.get("seed", 0)
        cfg = QioConfig(K=K, seed=seed, **settings)
    except ValueError as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    result = optimize(None, bundle, fs, cfg, psi0=np.ones(K))
    out = Path(args.out)
    if args.format == "json":
        body = {
            "plan": result.plan,
            "probs": result.probs.tolist(),
            "psi": result.psi.tolist(),
            "converged": result.converged,
            "n_iter": result.n_iter,
            "weights": result.weights,
            "final_energy": result.trace.energy[-1] if len(result.trace) else None,
        }
        atomic_write(out / "optimize.json", json.dumps(body, indent=1) + "\n")
    else:
        atomic_write(out / "optimize.csv", csv_text(QioTrace.COLUMNS, result.trace.rows()))
    print(f"optimize plan={result.plan} prob={result.probs[result.plan]:.6f} iterations={result.n_iter} "
          f"converged={str(result.converged).lower()}")
    return EXIT_OK


def cmd_transport(args):
    p = C.load_transport_problem(_read(args.config), args.config)
    est = SinkhornTransport(epsilon=p.get("epsilon", 1e-2), max_iters=p.get("max_iters", 10_000), tol=p.get("tol", 1e-6),
                            method=p.get("method", "sinkhorn"))
    try:
        est.fit(p["cost"], p["mu"], p["nu"])
    except ValueError as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    P = est.coupling_
    out = Path(args.out)
    if args.format == "json":
        body = {
            "coupling": P.tolist(),
            "objective": est.objective_,
            "transport_cost": float(np.sum(P * p["cost"])),
            "marginal_error": est.marginal_error_,
            "iterations": est.n_iter_,
        }
        atomic_write(out / "transport.json", json.dumps(body, indent=1) + "\n")
    else:
        header = [f"nu{j}" for j in range(P.shape[1])]
        atomic_write(out / "transport.csv", csv_text(header, P.tolist()))
    print(f"transport cost={float(np.sum(P * p['cost'])):.6g} marginal_error={est.marginal_error_:.3g} "
          f"iterations={est.n_iter_}")
    return EXIT_OK


def cmd_scenarios(args):
    rows = []
    for name in SCENARIOS:
        cfg = scenario(name, args.scale)
        rows.append([getattr(cfg, c) for c in SCENARIO_COLUMNS])
        print(" ".join(f"{c}={v}" for c, v in zip(SCENARIO_COLUMNS, rows[-1])))
    if args.out:
        out = Path(args.out)
        if args.format == "json":
            atomic_write(out / "scenarios.json", json.dumps([dict(zip(SCENARIO_COLUMNS, r)) for r in rows], indent=1) + "\n")
        else:
            atomic_write(out / "scenarios.csv", csv_text(SCENARIO_COLUMNS, rows))
    return EXIT_OK


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="vqio", description="Quantum-inspired vehicular network optimization.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="{run,optimize,transport,ablate,scenarios}")
    sub.required = True

    def common(p, out_default="results", config_help="scenario config file (key = value)"):
        p.add_argument("--config", default=None, help=config_help)
        p.add_argument("--seed", type=int, default=None, help="seed; overrides the config file, which overrides 0")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="per-run output format")

    p = sub.add_parser("run", help="simulate scenarios", formatter_class=fmt)
    p.add_argument("--scenario", default=None, help=f"comma list of {','.join(SCENARIOS)}; S1 or the config name if unset")
    p.add_argument("--scale", choices=SCALES, default="desk", help="scenario scale")
    common(p)
    p.add_argument("--variants", default="full", help=f"comma list of {','.join(VARIANTS)}")
    p.add_argument("--reps", type=int, default=1, help="replications; rep i uses seed + i")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="variant x scenario x replication matrix", formatter_class=fmt)
    p.add_argument("--scenario", default=None, help="comma list of scenarios; all six if unset")
    p.add_argument("--scale", choices=SCALES, default="desk", help="scenario scale")
    common(p)
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma list of variants")
    p.add_argument("--reps", type=int, default=30, help="replications; rep i uses seed + i")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("optimize", help="solve a plan-selection problem file", formatter_class=fmt)
    common(p, config_help="problem file (key = value)")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("transport", help="solve a transport problem file", formatter_class=fmt)
    common(p, config_help="problem file (key = value)")
    p.set_defaults(func=cmd_transport)

    p = sub.add_parser("scenarios", help="list the canonical scenarios", formatter_class=fmt)
    p.add_argument("--scale", choices=SCALES, default="desk", help="scenario scale")
    p.add_argument("--out", default=None, help="also write the table to this directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    p.set_defaults(func=cmd_scenarios)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotConverged, Diverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VehicularQIOError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
