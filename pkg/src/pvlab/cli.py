"""Command-line interface: ``pvlab <command> [options]``.

Exit codes: 0 success, 1 failed verdict or non-converged optimization,
2 usage or configuration error, 3 solver failure.  Errors go to standard
error as ``error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (Field, InvalidArgument, ModelViolation, SolverFailure, SpatialField,
                   StructuralError)
from .io import (Config, ConfigError, FormatError, RunManifest, config_hash,
                 load_config, load_field, load_report, parse_config_text, save_field,
                 save_report, write_json)
from .optim import (CONDITIONAL_GRADIENT, METHODS, PROJECTED_GRADIENT, ControlBlocks, minimize,
                    oracle_enumerate, value)
from .pde import solve_state
from .verify import (EXPERIMENTS, VERIFY_OPTIONS, ExperimentConfig, marginal_consistency,
                     rejudge, resolve_id, run_experiment)

ORACLE_SLACK = 1e-9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error[usage]: {message}", file=sys.stderr)
        raise SystemExit(2)


def _out_dir(args) -> Path:
    d = Path(args.out or os.environ.get("PVLAB_OUT") or "pvlab_out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config(args) -> Config:
    if args.config:
        return load_config(args.config)
    return parse_config_text("")


def _seeded(cfg: Config, seed):
    return cfg.optimize if seed is None else cfg.optimize.with_(seed=seed)


def _manifest(cfg: Config, command: str, seed: int) -> RunManifest:
    return RunManifest(config_hash=config_hash(cfg.raw), seed=seed, command=command)


def cmd_solve(args) -> int:
    cfg = _config(args)
    spec = cfg.spec
    if args.control:
        u = load_field(args.control, spec.grid)
        if not isinstance(u, Field):
            raise FormatError(f"{args.control} holds a spatial field, not a control")
    else:
        u = Field(spec.grid, 0.5 * (spec.ua.values + spec.ub.values))
    st = solve_state(spec, u)
    out = _out_dir(args)
    man = _manifest(cfg, "solve", 0)
    man.add(save_field(st.y, out / "state.pvlf"))
    trace = out / "solve_trace.csv"
    with open(trace, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "iterations", "residual"])
        w.writerows((s, it, repr(r)) for s, it, r in st.trace())
    man.add(trace)
    man.add(write_json({"newton_iters": st.newton_iters.tolist(),
                        "max_residual": float(np.max(st.residuals)),
                        "bound_ratio": st.bound_ratio}, out / "solve.json"))
    man.write(out)
    print(f"solved {spec.grid.nt} steps, max Newton residual {np.max(st.residuals):.3e}")
    return 0


def cmd_optimize(args) -> int:
    cfg = _config(args)
    opts = _seeded(cfg, args.seed)
    if args.method:
        opts = opts.with_(method=args.method)
    rep = minimize(cfg.spec, None, opts)
    out = _out_dir(args)
    man = _manifest(cfg, "optimize", opts.seed)
    man.add(write_json(rep.to_dict(), out / "report.json"))
    for name in ("ubar", "ybar", "pbar"):
        man.add(save_field(getattr(rep, name), out / f"{name}.pvlf"))
    man.write(out)
    print(f"J = {rep.J:.15g}  gap = {rep.gap:.3e}  converged = {rep.converged}")
    return 0 if rep.converged else 1


def cmd_value(args) -> int:
    cfg = _config(args)
    spec = cfg.spec
    opts = _seeded(cfg, args.seed)
    eta = spec.y0
    if args.eta:
        eta = load_field(args.eta)
        if not isinstance(eta, SpatialField):
            raise FormatError(f"{args.eta} holds a space-time field, not a state")
        eta = SpatialField(spec.grid, eta.values)
    smp = value(spec, args.tau, eta, opts)
    out = _out_dir(args)
    man = _manifest(cfg, "value", opts.seed)
    data = {"tau_index": args.tau, "tau": float(spec.grid.times[args.tau]), "v": smp.v,
            "report": smp.report.to_dict() if smp.report else None}
    man.add(write_json(data, out / "value.json"))
    man.write(out)
    print(f"v = {smp.v:.15g}")
    return 0 if smp.report is None or smp.report.converged else 1


def _experiment_list(cfg: Config, names: str | None, seed) -> list:
    by_id = {e.experiment_id: e for e in cfg.experiments}
    ids = [resolve_id(n.strip()) for n in names.split(",") if n.strip()] if names \
        else (list(by_id) or list(EXPERIMENTS))
    out = []
    for eid in ids:
        base = by_id.get(eid) or ExperimentConfig(eid, cfg.spec)
        s = base.seed if seed is None else seed
        out.append(ExperimentConfig(eid, cfg.spec, base.sample_count, base.perturbation_scales,
                                    s, VERIFY_OPTIONS.with_(seed=s), base.refine))
    return out


def cmd_verify(args) -> int:
    cfg = _config(args)
    experiments = _experiment_list(cfg, args.experiments, args.seed)
    out = _out_dir(args)
    seed = experiments[0].seed if experiments else 0
    man = _manifest(cfg, "verify", seed)
    progress = _print_json if args.progress == "json" else None
    reports, verdicts = {}, {}
    for ec in experiments:
        rep = run_experiment(ec, jobs=args.jobs, progress=progress)
        reports[ec.experiment_id] = rep
        verdicts[ec.experiment_id] = rep.verdict
        for p in save_report(rep, out):
            man.add(p)
        _emit_verdict(args, ec.experiment_id, rep.verdict, rep.checks)
    consistency = marginal_consistency(reports)
    summary = {"verdicts": verdicts, "marginal_consistency": consistency,
               "all_passed": all(verdicts.values()) and all(consistency.values())}
    man.add(write_json(summary, out / "summary.json"))
    man.write(out)
    return 0 if summary["all_passed"] else 1


def _print_json(event):
    print(json.dumps(event, sort_keys=True), flush=True)


def _emit_verdict(args, eid, verdict, checks):
    if getattr(args, "progress", None) == "json":
        print(json.dumps({"experiment": eid, "verdict": bool(verdict)}, sort_keys=True),
              flush=True)
    else:
        failed = [k for k, v in checks.items() if not v]
        tail = f"  (failed: {', '.join(failed)})" if failed else ""
        print(f"{eid:<16} {'PASS' if verdict else 'FAIL'}{tail}")


def _parse_blocks(text: str) -> ControlBlocks:
    try:
        tb, sb = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--blocks expects TIMExSPACE block sizes such as 2x2, got {text!r}")
    if tb < 1 or sb < 1:
        raise UsageError("block sizes must be positive")
    return ControlBlocks(tb, sb)


def cmd_oracle(args) -> int:
    cfg = _config(args)
    blocks = _parse_blocks(args.blocks)
    orc = oracle_enumerate(cfg.spec, None, blocks)
    opts = _seeded(cfg, args.seed)
    methods = {}
    for m in (CONDITIONAL_GRADIENT, PROJECTED_GRADIENT):
        rep = minimize(cfg.spec, None, opts.with_(method=m), blocks=blocks)
        methods[m] = {"J": rep.J, "gap": rep.gap, "starts": rep.starts,
                      "attains_oracle": bool(rep.J <= orc.J + ORACLE_SLACK)}
        print(f"{m:<20} J = {rep.J:.12g}  oracle = {orc.J:.12g}  "
              f"{'PASS' if methods[m]['attains_oracle'] else 'FAIL'}")
    out = _out_dir(args)
    man = _manifest(cfg, "oracle", opts.seed)
    man.add(write_json({"blocks": [blocks.time_block, blocks.space_block],
                        "block_count": blocks.count(cfg.spec.grid), "oracle_J": orc.J,
                        "evaluations": orc.evaluations, "methods": methods,
                        "slack": ORACLE_SLACK}, out / "oracle.json"))
    man.add(save_field(orc.control, out / "oracle_control.pvlf"))
    man.write(out)
    return 0 if all(v["attains_oracle"] for v in methods.values()) else 1


def cmd_report(args) -> int:
    d = Path(args.input)
    paths = sorted(p for p in d.glob("E*.json"))
    if not paths:
        raise UsageError(f"no experiment reports in {d}")
    ok = True
    for p in paths:
        rep = load_report(p)
        stored = rep.verdict
        rejudge(rep)
        _emit_verdict(args, rep.experiment_id, rep.verdict, rep.checks)
        if rep.verdict != stored:
            print(f"error[report]: {rep.experiment_id} stored verdict {stored} differs from "
                  f"recomputed {rep.verdict}", file=sys.stderr)
            ok = False
        ok &= rep.verdict
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pvlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pvlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="TOML configuration (default instance if omitted)")
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", help="output directory (default $PVLAB_OUT or ./pvlab_out)")

    sp = sub.add_parser("solve", help="forward state solve")
    common(sp)
    sp.add_argument("--control", help="control field file (default: box midpoint)")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("optimize", help="minimize the tracking objective")
    common(sp)
    sp.add_argument("--method", choices=METHODS)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("value", help="evaluate the value function")
    common(sp)
    sp.add_argument("--tau", type=int, required=True, help="time index of the window start")
    sp.add_argument("--eta", help="spatial field file of the initial state (default: y0)")
    sp.set_defaults(func=cmd_value)

    sp = sub.add_parser("verify", help="run verification experiments")
    common(sp)
    sp.add_argument("--experiments", help="comma separated list such as E1,E2 (default: all)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--progress", choices=("none", "json"), default="none")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("oracle", help="exhaustive bang-bang enumeration on blocks")
    common(sp)
    sp.add_argument("--blocks", default="2x2", help="TIMExSPACE block sizes (default 2x2)")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("report", help="re-judge stored experiment tables")
    sp.add_argument("--in", dest="input", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error[usage]: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
    except FormatError as exc:
        print(f"error[format]: {exc}", file=sys.stderr)
    except ModelViolation as exc:
        print(f"error[model]: {exc}", file=sys.stderr)
    except (InvalidArgument, StructuralError) as exc:
        print(f"error[invalid]: {exc}", file=sys.stderr)
    except SolverFailure as exc:
        print(f"error[solver]: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
    return 2
