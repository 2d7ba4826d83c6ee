"""Command-line interface: ``dualbell {run,scan,oracle,analyze}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The default output root is ``$DUALBELL_OUTPUT_ROOT`` if set, otherwise the
config's ``[output] output_dir``.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import sys
import time
from typing import List, Optional

import numpy as np

from . import __version__
from .config import GridSpec, RunConfig, load_config, parse_number
from .errors import ConfigError, DualBellError

log = logging.getLogger("dualbell")

OUTPUT_ROOT_ENV = "DUALBELL_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _number(text: str) -> float:
    try:
        return parse_number(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _number_list(text: str) -> List[float]:
    if not text.strip():
        return []
    parts = text.replace(";", ",").split(",")
    if any(not p.strip() for p in parts):
        raise argparse.ArgumentTypeError(f"empty item in list {text!r}")
    try:
        return [parse_number(p) for p in parts]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="configuration file (INI, SI units)")
    p.add_argument("--output-dir", help="output directory (default: <root>/<command>-<config hash>)")
    p.add_argument("--points", type=int, help="override points per dimension (keeps the momentum step)")
    p.add_argument("--dt", type=_number, help="override the time step in seconds")
    p.add_argument("--phi-a", type=_number, help="mixing phase of species A (rad)")
    p.add_argument("--phi-b", type=_number, help="mixing phase of species B (rad)")
    p.add_argument("--checkpoint-every", type=int, help="collision checkpoint interval (steps); enables stage snapshots")
    p.add_argument("--workers", type=int, help="FFT worker threads")
    p.add_argument("--format", choices=("csv", "json-lines"), default="csv", help="table format")
    p.add_argument("--dry-run", action="store_true", help="report memory estimate and schedule, then stop")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualbell", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dualbell {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one full sequence")
    _add_common(run)
    run.add_argument("--theta-a", type=_number, help="mixing area of species A (rad)")
    run.add_argument("--theta-b", type=_number, help="mixing area of species B (rad)")

    scan = sub.add_parser("scan", help="scan the mixing areas and fit V cos(theta_A + theta_B)")
    _add_common(scan)
    scan.add_argument("--thetas-a", type=_number_list, help="comma-separated theta_A values (rad)")
    scan.add_argument("--thetas-b", type=_number_list, help="comma-separated theta_B values (rad)")
    scan.add_argument("--grid", type=int, default=5, help="n x n grid over [0, pi] when lists are not given")
    scan.add_argument("--no-chsh", action="store_true", help="skip the four CHSH settings")

    orc = sub.add_parser("oracle", help="closed-form four-mode model")
    orc.add_argument("action", nargs="?", choices=("correlator", "chsh"), default="correlator")
    orc.add_argument("--theta-a", type=_number, default=0.0)
    orc.add_argument("--theta-b", type=_number, default=0.0)
    orc.add_argument("--phi-a", type=_number, default=0.0)
    orc.add_argument("--phi-b", type=_number, default=0.0)
    orc.add_argument("--optimal-phases", action="store_true",
                     help="CHSH at phase sums pi/4, 3pi/4, 7pi/4, 9pi/4 with theta = pi/2")
    orc.add_argument("--theta-sum", action="store_true", help="CHSH at the optimal theta settings, phi = 0")
    orc.add_argument("--settings", type=_number_list,
                     help="CHSH settings as 8 numbers: theta,phi for a, a', b, b'")
    orc.add_argument("--format", choices=("text", "csv", "json-lines"), default="text")

    ana = sub.add_parser("analyze", help="observables from a saved BWF4 snapshot")
    ana.add_argument("snapshot")
    ana.add_argument("--config", required=True)
    ana.add_argument("--output-dir")
    ana.add_argument("--radius-cells", type=_number, help="mode-region radius in momentum steps")
    ana.add_argument("--format", choices=("csv", "json-lines"), default="csv")
    ana.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load(args) -> RunConfig:
    if not os.path.isfile(args.config):
        raise ConfigError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "points", None) is not None or getattr(args, "dt", None) is not None:
        g = cfg.grid
        cells = cfg.p_k / g.momentum_step
        n = args.points if args.points is not None else g.points_per_dim
        dt = args.dt if args.dt is not None else g.time_step
        if abs(cells - round(cells)) < 1e-6:
            grid = GridSpec.commensurate(n, int(round(cells)), cfg.p_k, dt)
        else:
            grid = GridSpec(n, g.spatial_step, dt)
        changes["grid"] = grid
    for attr, key in (("theta_a", "theta_A"), ("theta_b", "theta_B"), ("phi_a", "phi_A"),
                      ("phi_b", "phi_B"), ("workers", "workers")):
        v = getattr(args, attr, None)
        if v is not None:
            changes[key] = v
    if getattr(args, "checkpoint_every", None) is not None:
        changes["checkpoint_interval"] = args.checkpoint_every
    return cfg.replace(**changes) if changes else cfg


def output_directory(args, cfg: RunConfig, command: str) -> str:
    if getattr(args, "output_dir", None):
        return os.path.abspath(args.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir
    return os.path.abspath(os.path.join(root, f"{command}-{cfg.config_hash()}"))


def memory_estimate(cfg: RunConfig, calibrating: Optional[bool] = None) -> dict:
    """Bytes per field and for the working set of a run (fields held at once)."""
    per = cfg.grid.field_bytes()
    calibrating = cfg.interaction_strength is None if calibrating is None else calibrating
    fields = 4 if calibrating else 2
    return {"points_per_dim": cfg.grid.points_per_dim, "field_bytes": per,
            "working_fields": fields, "working_bytes": per * fields,
            "cap_bytes": int(cfg.memory_cap_bytes), "available_bytes": available_memory()}


def available_memory() -> Optional[int]:
    """Currently available physical memory in bytes (None where unsupported)."""
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def _gb(b: float) -> str:
    return f"{b / 1e9:.2f} GB"


def _check_memory(cfg: RunConfig, out=print, enforce: bool = True) -> dict:
    est = memory_estimate(cfg)
    out(f"memory estimate: {_gb(est['field_bytes'])} per field at {est['points_per_dim']} points/dim; "
        f"working set {est['working_fields']} fields = {_gb(est['working_bytes'])} "
        f"(cap {_gb(est['cap_bytes'])}, available "
        f"{_gb(est['available_bytes']) if est['available_bytes'] else 'unknown'})")
    if est["working_bytes"] > est["cap_bytes"]:
        if not enforce:
            out("note: the working set exceeds the memory cap; a real run would be refused")
            return est
        raise MemoryError(f"required {_gb(est['working_bytes'])} exceeds the memory cap "
                          f"{_gb(est['cap_bytes'])}; raise [numerics] memory_cap_bytes or reduce points")
    return est


class Manifest:
    """Run manifest: config hash, version, timestamps, stages, output inventory."""

    def __init__(self, directory: str, cfg: RunConfig, command: str, argv: List[str]):
        self.dir = directory
        self.data = {"tool": "dualbell", "version": __version__, "command": command, "argv": argv,
                     "config_hash": cfg.config_hash(), "started": _now(), "finished": None,
                     "status": "running", "stages": [], "outputs": []}
        self.path = os.path.join(directory, "manifest.json")

    def add(self, *paths):
        for p in paths:
            if p:
                rel = os.path.relpath(p, self.dir)
                if rel not in self.data["outputs"]:
                    self.data["outputs"].append(rel)

    def write(self, status: str):
        self.data["finished"] = _now()
        self.data["status"] = status
        self.data["outputs"] = [p for p in self.data["outputs"] if os.path.exists(os.path.join(self.dir, p))]
        tmp = self.path + ".part"
        with open(tmp, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=_json_default)
        os.replace(tmp, self.path)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_run(args, argv) -> int:
    from .analysis import TABLE_COLUMNS, default_mode_regions, joint_weights, table_record, write_records
    from .grid.snapshot import save_snapshot
    from .sequence import build_schedule, run_sequence

    cfg = _load(args)
    _check_memory(cfg, enforce=not args.dry_run)
    schedule = build_schedule(cfg)
    if args.dry_run:
        print(schedule.to_text(), end="")
        return EXIT_OK
    out = output_directory(args, cfg, "run")
    os.makedirs(out, exist_ok=True)
    man = Manifest(out, cfg, "run", argv)
    sched_path = os.path.join(out, "schedule.txt")
    with open(sched_path, "w") as fh:
        fh.write(schedule.to_text())
    man.add(sched_path)
    t0 = time.time()
    checkpoint = cfg.checkpoint_interval > 0
    try:
        res = run_sequence(cfg, out if checkpoint else None, checkpoint, progress=log.info)
    except DualBellError as exc:
        man.data["error"] = str(exc)
        man.write("failed")
        raise
    final = save_snapshot(res.psi, os.path.join(out, "final.bwf4"))
    regions = default_mode_regions(cfg.geometry, cfg.grid, cfg.region_radius_cells * cfg.grid.momentum_step)
    settings = {"theta_A": cfg.theta_A, "theta_B": cfg.theta_B, "phi_A": cfg.phi_A, "phi_B": cfg.phi_B}
    table = joint_weights(res.psi, regions, settings)
    ext = "csv" if args.format == "csv" else "jsonl"
    corr = write_records(os.path.join(out, f"correlation.{ext}"), [table_record(table)], TABLE_COLUMNS, args.format)
    summary = {"E": table.E, "region_radius": table.radius,
               "region_radius_cells": table.radius / cfg.grid.momentum_step,
               "weight_in_regions": table.normalization,
               "interaction_strength_j": res.interaction_strength,
               "scattered_fraction": res.scattered_fraction, "runtime_s": time.time() - t0}
    summ = write_records(os.path.join(out, f"summary.{ext}"), [{**settings, **summary}],
                         list(settings) + list(summary), args.format)
    man.data["stages"] = [{"name": s.name, "start_s": s.start, "duration_s": s.duration,
                           "snapshot": s.snapshot} for s in res.schedule.stages]
    man.add(final, corr, summ, *res.snapshots)
    if checkpoint:
        man.add(os.path.join(out, "progress.json"))
    man.write("ok")
    print(f"E = {table.E:+.4f}  (region radius {summary['region_radius_cells']:.2f} momentum steps, "
          f"scattered fraction {res.scattered_fraction:.4f})")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_scan(args, argv) -> int:
    from .analysis import scan_correlator, write_records

    cfg = _load(args)
    ths_a = args.thetas_a if args.thetas_a is not None else list(np.linspace(0, math.pi, args.grid))
    ths_b = args.thetas_b if args.thetas_b is not None else list(np.linspace(0, math.pi, args.grid))
    if not ths_a or not ths_b or args.grid < 1:
        raise UsageError("scan: theta lists must not be empty")
    _check_memory(cfg, enforce=not args.dry_run)
    if args.dry_run:
        print(f"{len(ths_a)} x {len(ths_b)} settings")
        return EXIT_OK
    out = output_directory(args, cfg, "scan")
    os.makedirs(out, exist_ok=True)
    man = Manifest(out, cfg, "scan", argv)
    checkpoint = cfg.checkpoint_interval > 0
    res = scan_correlator(cfg, ths_a, ths_b, cfg.phi_A, cfg.phi_B, include_chsh=not args.no_chsh,
                          output_dir=out if checkpoint else None, checkpoint=checkpoint, progress=log.info)
    ext = "csv" if args.format == "csv" else "jsonl"
    cols = ["theta_A", "theta_B", "phi_A", "phi_B", "W_uu", "W_ud", "W_du", "W_dd", "E", "status"]
    surf = write_records(os.path.join(out, f"e_surface.{ext}"), [r.as_dict() for r in res.rows], cols, args.format)
    fit = write_records(os.path.join(out, f"fit.{ext}"),
                        [{"visibility": res.visibility, "rms_residual": res.rms_residual,
                          "premix_E": res.premix_E, "interaction_strength_j": res.interaction_strength,
                          "scattered_fraction": res.scattered_fraction,
                          "failed_points": sum(r.status != "ok" for r in res.rows)}],
                        ["visibility", "rms_residual", "premix_E", "interaction_strength_j",
                         "scattered_fraction", "failed_points"], args.format)
    man.add(surf, fit)
    if res.chsh_rows:
        chsh_path = write_records(os.path.join(out, f"chsh.{ext}"),
                                  [r.as_dict() for r in res.chsh_rows] +
                                  [{"theta_A": "S", "E": res.chsh if res.chsh is not None else float("nan"),
                                    "status": "ok" if res.chsh is not None else "failed"}],
                                  cols, args.format)
        man.add(chsh_path)
    man.write("ok" if all(r.status == "ok" for r in res.rows) else "partial")
    print(f"V = {res.visibility:.4f}  RMS residual = {res.rms_residual:.4f}  pre-mixing E = {res.premix_E:.4f}")
    if res.chsh is not None:
        print(f"S = {res.chsh:+.4f}  |S| = {abs(res.chsh):.4f}")
    print(f"outputs in {out}")
    return EXIT_OK if all(r.status == "ok" for r in res.rows) else EXIT_RUNTIME


def cmd_oracle(args, argv) -> int:
    from . import oracle

    if args.action == "chsh" or args.optimal_phases or args.theta_sum or args.settings:
        if args.optimal_phases:
            a, ap, b, bp = oracle.optimal_phase_settings()
            label = "optimal-phases"
        elif args.settings:
            if len(args.settings) != 8:
                raise UsageError("oracle chsh --settings needs 8 numbers")
            s = args.settings
            a, ap, b, bp = (s[0], s[1]), (s[2], s[3]), (s[4], s[5]), (s[6], s[7])
            label = "custom"
        else:
            ta, tap, tb, tbp = oracle.theta_sum_settings()
            a, ap, b, bp = (ta, 0.0), (tap, 0.0), (tb, 0.0), (tbp, 0.0)
            label = "theta-sum"
        S = oracle.chsh(a, ap, b, bp)
        rec = {"settings": label, "S": S, "abs_S": abs(S), "tsirelson": oracle.TSIRELSON}
        _emit(rec, args.format, f"S = {S:+.6f}\n|S| = {abs(S):.6f}  (classical bound 2, Tsirelson {oracle.TSIRELSON:.6f})")
        return EXIT_OK
    res = oracle.bell_result(args.theta_a, args.theta_b, args.phi_a, args.phi_b)
    p = res.joint_probabilities
    rec = {"theta_A": args.theta_a, "theta_B": args.theta_b, "phi_A": args.phi_a, "phi_B": args.phi_b,
           "P_uu": p[0], "P_ud": p[1], "P_du": p[2], "P_dd": p[3], "E": res.correlator_E}
    text = ("P(up,up) = {:.4f}  P(up,down) = {:.4f}  P(down,up) = {:.4f}  P(down,down) = {:.4f}\n"
            "E = {:+.4f}").format(*p, res.correlator_E)
    _emit(rec, args.format, text)
    return EXIT_OK


def _emit(rec: dict, fmt: str, text: str):
    if fmt == "text":
        print(text)
    elif fmt == "csv":
        print(",".join(rec))
        print(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in rec.values()))
    else:
        print(json.dumps(rec, default=_json_default))


def cmd_analyze(args, argv) -> int:
    from .analysis import (TABLE_COLUMNS, default_mode_regions, joint_weights, radius_convergence,
                           ridge_positions, ring_fit, slice_joint_density, table_record, write_records,
                           write_slice)
    from .grid.snapshot import load_snapshot
    from .grid.wavefunction import momentum_density, to_momentum_space

    cfg = _load(args)
    if not os.path.isfile(args.snapshot):
        raise ConfigError(f"snapshot not found: {args.snapshot}")
    psi = load_snapshot(args.snapshot, time_step=cfg.grid.time_step)
    phi = to_momentum_space(psi)
    dp = phi.grid.momentum_step
    geo = cfg.geometry
    cells = args.radius_cells if args.radius_cells is not None else cfg.region_radius_cells
    regions = default_mode_regions(geo, phi.grid, cells * dp)
    out = args.output_dir or os.path.join(os.path.dirname(os.path.abspath(args.snapshot)), "analysis")
    os.makedirs(out, exist_ok=True)
    ext = "csv" if args.format == "csv" else "jsonl"
    table = joint_weights(phi, regions, {"theta_A": cfg.theta_A, "theta_B": cfg.theta_B,
                                         "phi_A": cfg.phi_A, "phi_B": cfg.phi_B})
    files = [write_records(os.path.join(out, f"correlation.{ext}"), [table_record(table)], TABLE_COLUMNS, args.format)]
    # discs of partner modes sit p_k apart; larger radii would overlap
    radii = [r for r in (cells * dp / 2, cells * dp, 2 * cells * dp) if 2 * r < cfg.p_k]
    conv = radius_convergence(phi, geo, radii)
    files.append(write_records(os.path.join(out, f"radius_convergence.{ext}"),
                               [{"radius_cells": r / dp, "E": e} for r, e in conv], ["radius_cells", "E"],
                               args.format))
    dens_a = momentum_density(phi, "A")
    cx, cz, rad = ring_fit(dens_a, phi.grid)
    files.append(write_records(os.path.join(out, f"ring_fit.{ext}"),
                               [{"center_z_over_pk": cz / cfg.p_k, "radius_over_pk": rad / cfg.p_k,
                                 "expected_center_over_pk": geo.halo_center_A / cfg.p_k,
                                 "expected_radius_over_pk": geo.halo_radius / cfg.p_k}],
                               ["center_z_over_pk", "radius_over_pk", "expected_center_over_pk",
                                "expected_radius_over_pk"], args.format))
    px = geo.mode_points()["B_up"][0]
    sl = slice_joint_density(phi, -px, px)
    files += write_slice(os.path.join(out, "joint_slice.csv"), sl, phi.grid)
    files += write_slice(os.path.join(out, "momentum_density_A.csv"), dens_a, phi.grid,
                         axes=("p_x_A", "p_z_A"))
    ridges = ridge_positions(sl, phi.grid, cfg.p_k)
    print(f"E = {table.E:+.4f} at radius {cells:.2f} momentum steps; "
          f"halving the radius gives {conv[0][1]:+.4f}")
    print(f"A ring: center {cz / cfg.p_k:.4f} p_k, radius {rad / cfg.p_k:.4f} p_k "
          f"(expected {geo.halo_center_A / cfg.p_k:.4f})")
    print(f"back-to-back ridges at p_z^A + p_z^B = {ridges['plus'] / cfg.p_k:+.4f}, "
          f"{ridges['minus'] / cfg.p_k:+.4f} p_k")
    print(f"outputs in {out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "scan": cmd_scan, "oracle": cmd_oracle, "analyze": cmd_analyze}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(getattr(args, "verbose", False))
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MemoryError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except DualBellError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        stage = getattr(exc, "stage", None)
        if stage:
            print(f"  failed stage: {stage}; last snapshot: {getattr(exc, 'last_snapshot', None)}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
