"""``qsdfv <subcommand> --config <path> [--out <dir>] [--threads k] [--seed s]``.

Each invocation writes ``results.csv`` (deterministic), ``meta.json``
(resolved config, seed, checks, timestamps) and possibly ``plotdata/*.csv``
into its output directory.  Exit status: 0 when every check passes, 1 when a
check fails, 2 for configuration errors, 3 when the run aborts (the metadata
is then left flagged incomplete).
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__, experiments as ex
from .config import SUBCOMMANDS, ConfigError, ExperimentSpec, load_config
from .stats import json_dump

SCHEMA_VERSION = 1
log = logging.getLogger("qsdfv")


def dispatch(spec: ExperimentSpec, threads: int = 1) -> ex.Outcome:
    p, law, seed = spec.params, spec.law, spec.seed
    name = spec.subcommand
    if name == "qsd":
        out = ex.run_qsd(law, p["L"], p["z"], p["tol"], p["geometric_tol"])
        if p["yaglom"] is not None:
            y = p["yaglom"]
            u = ex.run_uniform_yaglom(law, y["alpha"], y["times"], y["sites"], y["L"], y["tol"])
            out.checks.update({f"yaglom_{k}": v for k, v in u.checks.items()})
            out.extra_tables["uniform_yaglom"] = u.rows
        return out
    if name == "simulate":
        out = ex.run_simulate(law, p["N"], p["horizon"], p["burn_in"], seed, p["rho"], p["batches"])
        if p["lyapunov"] is not None:
            q = p["lyapunov"]
            ly = ex.run_lyapunov(law, q["configs"], q["N"], q["max_position"], seed)
            out.checks.update(ly.checks)
            out.extra_tables["lyapunov"] = ly.rows
        if p["generator"] is not None:
            q = p["generator"]
            go = ex.run_generator_oracle(law, q["configs"], q["N"], q["max_position"], q["h"],
                                         q["replicas"], seed, threads)
            out.checks.update({f"generator_{k}": v for k, v in go.checks.items()})
            out.extra_tables["generator"] = go.rows
        return out
    if name == "sweep":
        return ex.run_sweep(law, p["N"], p["horizon"], p["burn_in"], p["runs"], seed,
                            p["selection_N"], p["trend_N"], p["rho"], p["tv_max"], threads)
    if name == "couple":
        out = ex.run_coupling(law, p["N"], p["seeds"], p["horizon"], seed)
        if p["growth"] is not None:
            g = p["growth"]
            gr = ex.run_growth(law, g["initial"], g["t"], g["replicas"], seed)
            out.checks.update(gr.checks)
            out.extra_tables["growth"] = gr.rows
        if p["rightmost"] is not None:
            r = p["rightmost"]
            rm = ex.run_rightmost_moment(law, r["N"], r["t"], r["replicas"], seed, r["rho"])
            out.checks.update(rm.checks)
            out.extra_tables["rightmost"] = rm.rows
        return out
    if name == "ld":
        q = p["large_deviation"] or {"x0": 40, "T": 1.0, "deltas": [10, 20, 30], "replicas": 10**5}
        return ex.run_reflected(law, p["rho"], p["x0"], p["t"], p["replicas"], seed, q["x0"],
                                q["T"], q["deltas"], q["replicas"])
    if name == "chaos":
        return ex.run_chaos(law, p["N"], p["t"], [tuple(x) for x in p["pairs"]], p["replicas"],
                            seed, threads)
    if name == "semigroup":
        return ex.run_semigroup(law, p["N"], p["t"], p["replicas"], seed, p["grid"], p["method"],
                                p["L"], p["K"], p["factor"], threads)
    raise ConfigError(f"unknown subcommand {name!r}")


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path: Path, rows: list[dict], header: str) -> None:
    cols: list[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with path.open("w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in cols])


def run(spec: ExperimentSpec, out_dir: Path, threads: int = 1) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = spec.resolved()
    meta = {"schema_version": SCHEMA_VERSION, "package_version": __version__,
            "subcommand": spec.subcommand, "seed": spec.seed, "spec": resolved,
            "config_path": spec.source, "threads": threads, "complete": False,
            "started": dt.datetime.now(dt.timezone.utc).isoformat()}
    json_dump(meta, out_dir / "meta.json")
    tic = time.perf_counter()
    try:
        outcome = dispatch(spec, threads)
    except Exception as exc:  # keep the incomplete flag and report
        meta.update(error=f"{type(exc).__name__}: {exc}",
                    finished=dt.datetime.now(dt.timezone.utc).isoformat())
        json_dump(meta, out_dir / "meta.json")
        log.error("run aborted: %s", meta["error"])
        return 3
    header = "spec=" + json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    write_table(out_dir / "results.csv", outcome.rows, header)
    if outcome.extra_tables:
        (out_dir / "plotdata").mkdir(exist_ok=True)
        for name, rows in outcome.extra_tables.items():
            write_table(out_dir / "plotdata" / f"{name}.csv", rows, header)
    meta.update(complete=True, checks=outcome.checks, passed=outcome.passed, info=outcome.info,
                seconds=time.perf_counter() - tic,
                finished=dt.datetime.now(dt.timezone.utc).isoformat())
    json_dump(meta, out_dir / "meta.json")
    for k, v in outcome.checks.items():
        print(f"{'PASS' if v else 'FAIL'}  {spec.subcommand}.{k}")
    return 0 if outcome.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qsdfv", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    helps = {"qsd": "minimal QSD table and generating-function cross-check",
             "simulate": "one stationary Fleming-Viot run",
             "sweep": "stationary N-sweep: TV, chaos, psi and exp-moment trends",
             "couple": "branching coupling: domination and growth checks",
             "ld": "reflected Galton-Watson moment and large-deviation checks",
             "chaos": "fixed-time correlation bound grid",
             "semigroup": "gap to the conditioned semigroup grid"}
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default: runs/<subcommand>)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("qsdfv: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        spec = load_config(args.config, args.subcommand, args.seed)
    except ConfigError as exc:
        print(f"qsdfv: config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path("runs") / args.subcommand
    return run(spec, out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
