"""Command-line entry point: calibrate, validate, export, report, minion.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
Log verbosity comes from the ``RRLCAL_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import socket
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, maps
from .config import ConfigError, from_dict, load_toml, to_dict
from .cycles import load_cycle
from .distrib import MinionEndpoint, SocketTransport, parse_endpoint, serve_socket
from .io import atomic_write_text, csv_text
from .pipeline import (
    EpisodeRunner,
    LocalDispatcher,
    MinionDispatcher,
    PipelineConfig,
    RoundAborted,
    calibrate,
    run_config_toml,
)
from .rl.networks import load_snapshot

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("rrlcal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration --------------------------------------------------------------------

def reference_map() -> maps.LookupMap2D:
    from importlib import resources

    return maps.deserialize(resources.files("rrlcal.data").joinpath("air_setpoint_reference.txt").read_bytes())


def load_run_config(path: str | None) -> tuple[PipelineConfig, dict]:
    """Returns (pipeline config, [run] table). No path -> defaults."""
    if path is None:
        return PipelineConfig(), {}
    data = load_toml(path)
    unknown = set(data) - {"pipeline", "run"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level table")
    cfg = from_dict(PipelineConfig, data.get("pipeline", {}), "pipeline")
    run = data.get("run", {})
    bad = set(run) - {"map", "detune"}
    if bad:
        raise ConfigError(f"run.{sorted(bad)[0]}", "unknown field")
    return cfg, run


def initial_map(run: dict, base_dir: Path | None = None) -> maps.LookupMap2D:
    src = run.get("map", "reference")
    if src == "reference":
        m = reference_map()
    else:
        p = Path(src)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        m = maps.load(p)
    k = float(run.get("detune", 1.0))
    if k <= 0:
        raise ConfigError("run.detune", "must be positive")
    if k != 1.0:
        m = m.with_values(m.values * k, version=f"{m.version}*{k!r}")
    return m


# -- minions ----------------------------------------------------------------------------

def _spawn_local_minions(n: int, timeout: float = 30.0):
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    procs = [subprocess.Popen([sys.executable, "-m", "rrlcal", "minion", "--connect", f"127.0.0.1:{port}"])
             for _ in range(n)]
    srv.settimeout(timeout)
    eps = []
    try:
        for k in range(n):
            conn, _ = srv.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(None)
            eps.append(MinionEndpoint(SocketTransport(conn), f"local-{k}"))
    finally:
        srv.close()
    return eps, procs


def make_dispatcher(spec: str | None, timeout: float):
    """``None``/``0`` -> in-process; ``n`` -> n spawned minions; ``h:p,h:p`` -> remote minions."""
    if not spec or spec == "0":
        return LocalDispatcher(), []
    if spec.isdigit():
        eps, procs = _spawn_local_minions(int(spec))
        return MinionDispatcher(eps, timeout), procs
    eps = []
    for k, ep in enumerate(spec.split(",")):
        host, port = parse_endpoint(ep.strip())
        eps.append(MinionEndpoint(SocketTransport.connect(host, port), f"{host}:{port}"))
    return MinionDispatcher(eps, timeout), []


# -- commands -----------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    cfg, run = load_run_config(args.config)
    if args.rounds is not None:
        cfg = replace(cfg, rounds=args.rounds)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    base_dir = Path(args.config).parent if args.config else None
    m = initial_map(run, base_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dispatcher, procs = make_dispatcher(args.minions, cfg.dispatch_timeout)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        rounds = calibrate(cfg, m, out, dispatcher=dispatcher,
                           on_round=lambda ci: log.info("round %d: best %.3f, distilled %.3f",
                                                        ci.round_index, ci.best.ret, ci.distilled.ret))
    except RoundAborted as exc:
        log.error("calibration aborted: %s", exc)
        _write_manifest(out, cfg, run, args, started, status=f"aborted: {exc}")
        return EXIT_RUNTIME
    finally:
        dispatcher.close()
        for p in procs:
            p.wait(timeout=10)
    atomic_write_text(out / "run.toml", run_config_toml(cfg, {"run": {**run, "map": "map_initial.txt",
                                                                        "detune": 1.0}}))
    _write_manifest(out, cfg, run, args, started, status="ok", rounds=len(rounds))
    print(out)
    return EXIT_OK


def _write_manifest(out: Path, cfg, run, args, started, status, rounds=0):
    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "status": status,
        "command": "calibrate",
        "config": to_dict(cfg),
        "run": run,
        "seeds": {"pipeline": cfg.seed},
        "rounds_completed": rounds,
        "artifacts": artifacts,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "versions": {"rrlcal": __version__, "numpy": np.__version__, "python": sys.version.split()[0]},
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


SUMMARY_HEADER = ("strategy", "return", "nox_g", "soot_g", "speed_rmse", "mean_hp_egr", "mean_lp_egr",
                  "d_return", "d_nox_g", "d_soot_g")


def cmd_validate(args) -> int:
    cfg, run = load_run_config(args.config)
    base_dir = Path(args.config).parent if args.config else None
    cycle = load_cycle(args.cycle or cfg.val_cycle, cfg.setup.plant.dt)
    strategies = []
    baseline = maps.load(args.baseline) if args.baseline else initial_map(run, base_dir)
    strategies.append(("baseline", baseline, None))
    if args.map:
        m = maps.load(args.map)
        if m.x_axis != baseline.x_axis or m.y_axis != baseline.y_axis:
            raise maps.MapError("map axes differ from the baseline map axes")
        strategies.append(("map", m, None))
    if args.policy:
        strategies.append(("agent", baseline, load_snapshot(args.policy)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    ref = None
    for name, m, pol in strategies:
        res = EpisodeRunner(cfg.setup, m, {cycle.id: cycle}).run(pol, cycle.id, False, cfg.seed)
        if res.fault:
            log.error("validation of %s faulted: %s", name, res.fault)
            return EXIT_RUNTIME
        atomic_write_text(out / f"validate_{name}.csv", res.log_csv())
        vals = tuple(float(v) for v in (res.total_return, res.cum_nox_g, res.cum_soot_g))
        ref = ref or vals
        rows.append((name, *map(repr, vals), repr(float(res.speed_rmse)),
                     repr(float(res.mean_hp_egr)), repr(float(res.mean_lp_egr)),
                     *(repr(v - r) for v, r in zip(vals, ref))))
    atomic_write_text(out / "summary.csv", csv_text(SUMMARY_HEADER, rows))
    print(out / "summary.csv")
    return EXIT_OK


def cmd_export(args) -> int:
    m = maps.load(args.map)
    fmt = args.format
    if fmt == "text":
        data = maps.serialize(m).decode()
    elif fmt == "csv":
        header = ("x\\y", *[repr(v) for v in m.y_axis.breakpoints])
        data = csv_text(header, [(repr(x), *[repr(float(v)) for v in row])
                                 for x, row in zip(m.x_axis.breakpoints, m.values)])
    elif fmt == "json":
        data = json.dumps({"name": m.name, "units": m.units, "version": m.version,
                           "x_axis": list(m.x_axis.breakpoints), "y_axis": list(m.y_axis.breakpoints),
                           "values": m.values.tolist()}, indent=2) + "\n"
    else:
        raise UsageError(f"unknown export format '{fmt}' (choose text, csv, json)")
    if args.out:
        atomic_write_text(args.out, data)
    else:
        sys.stdout.write(data)
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    run = Path(args.run)
    rounds = sorted((p for p in run.glob("round_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
    if not rounds:
        log.error("no round directories under %s", run)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    pareto, curve = [], []
    offset = 0
    for rd in rounds:
        k = int(rd.name.split("_")[1])
        for r in _read_csv(rd / "pareto.csv"):
            pareto.append((k, r["label"], r["nox_g"], r["soot_g"], r["return"], r["on_frontier"]))
        vals = {int(r["iteration"]): r for r in _read_csv(rd / "validation.csv") if r["label"] == "agent"}
        for r in _read_csv(rd / "training.csv"):
            it = int(r["iteration"])
            v = vals.get(it)
            curve.append((k, offset + it, r["train_return"], v["return"] if v else "", r["entropy"]))
        offset += len(_read_csv(rd / "training.csv"))
        before = maps.load(rd / "map_before.txt")
        after = maps.load(rd / "map_after.txt")
        delta = after.values - before.values
        rows = [(repr(x), repr(y), repr(float(before.values[i, j])), repr(float(after.values[i, j])),
                 repr(float(delta[i, j])))
                for i, x in enumerate(before.x_axis.breakpoints) for j, y in enumerate(before.y_axis.breakpoints)]
        atomic_write_text(out / f"map_evolution_round_{k}.csv",
                          csv_text(("n_eng", "m_inj_tot", "before", "after", "delta"), rows))
    atomic_write_text(out / "pareto.csv",
                      csv_text(("round", "label", "nox_g", "soot_g", "return", "on_frontier"), pareto))
    atomic_write_text(out / "learning_curve.csv",
                      csv_text(("round", "iteration", "train_return", "val_return", "entropy"), curve))
    print(out)
    return EXIT_OK


def cmd_minion(args) -> int:
    runner_factory = EpisodeRunner.from_spec
    if args.connect:
        host, port = parse_endpoint(args.connect)
        from .distrib import Minion

        Minion(SocketTransport.connect(host, port), runner_factory).serve()
        return EXIT_OK
    host, port = parse_endpoint(args.listen)
    serve_socket(host, port, runner_factory, once=not args.forever,
                 ready=lambda p: print(f"minion listening on {host}:{p}", flush=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rrlcal", description="Residual-RL calibration of a virtual ECU air path.")
    p.add_argument("--version", action="version", version=f"rrlcal {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("calibrate", help="run calibration rounds")
    c.add_argument("--config")
    c.add_argument("--rounds", type=int)
    c.add_argument("--iterations", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--minions", help="n (spawn local minions) or host:port[,host:port...]")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    v = sub.add_parser("validate", help="deterministic validation episodes per strategy")
    v.add_argument("--config")
    v.add_argument("--map", help="calibrated map to compare against the baseline")
    v.add_argument("--baseline", help="baseline map (default: the config's initial map)")
    v.add_argument("--policy", help="agent snapshot, evaluated on top of the baseline map")
    v.add_argument("--cycle")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_validate)

    e = sub.add_parser("export", help="export a map")
    e.add_argument("--map", required=True)
    e.add_argument("--format", default="text")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)

    r = sub.add_parser("report", help="CSV data products of a run directory")
    r.add_argument("--run", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    m = sub.add_parser("minion", help="serve episodes for a master")
    g = m.add_mutually_exclusive_group(required=True)
    g.add_argument("--listen", help="host:port to accept a master on")
    g.add_argument("--connect", help="host:port of a master to connect to")
    m.add_argument("--forever", action="store_true", help="keep accepting masters")
    m.set_defaults(func=cmd_minion)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RRLCAL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a command is required (calibrate, validate, export, report, minion)")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (maps.MapError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, maps.MapParseError) else EXIT_RUNTIME
    except Exception as exc:  # runtime failure
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
