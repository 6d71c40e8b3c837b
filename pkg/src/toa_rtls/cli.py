"""Command-line front end.

Subcommands ``run``, ``sweep``, ``bench`` and ``verify``. Settings resolve as
command-line flags over a YAML config file over the built-in defaults.
"""

import argparse
import csv
import datetime
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import yaml

from . import __version__
from .errors import InvalidInputError
from .sim import (
    ScenarioConfig,
    default_workers,
    run_monte_carlo,
    runtime_comparison,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# config-file / flag aliases for ScenarioConfig fields
ALIASES = {"lambda": "lam", "anchors": "m", "mode": "selection_mode", "tmax": "t_max"}
FLAG_FIELDS = {
    "seed": "seed",
    "trials": "trials",
    "sigma": "sigma",
    "anchors": "m",
    "mode": "selection_mode",
    "lambda": "lam",
    "alpha": "alpha",
    "tmax": "t_max",
}
SWEEP_PARAMS = {"sigma": "sigma", "anchors": "m"}


class ConfigError(Exception):
    """Bad config file or flag value; maps to exit code 2."""


def _flatten(d, prefix=""):
    """Nested mappings are allowed for grouping; only leaf keys matter."""
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def load_config_file(path):
    """Read a YAML mapping of ScenarioConfig fields (nesting allowed)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    known = set(ScenarioConfig.field_names())
    values = {}
    for key, v in _flatten(raw).items():
        leaf = key.rsplit(".", 1)[-1]
        name = ALIASES.get(leaf, leaf)
        if name not in known:
            raise ConfigError(f"{path}: unknown field {key!r}")
        values[name] = v
    return values


def resolve_config(config_path=None, overrides=None):
    """Defaults < config file < overrides. Raises ConfigError."""
    values = load_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ScenarioConfig(**values)
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _overrides(args):
    return {field: getattr(args, flag, None) for flag, field in FLAG_FIELDS.items()}


def _workers(args):
    return args.threads if args.threads else default_workers()


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _manifest(cfg, command, outputs, extra=None):
    m = {
        "artifact": "toa_rtls",
        "version": __version__,
        "command": command,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        "seed": {"base": cfg.seed, "trial_seed": "numpy SeedSequence([seed, trial_index])"},
        "outputs": sorted(outputs),
    }
    if extra:
        m.update(extra)
    return m


def _publish(out_dir, files, manifest):
    """Write all outputs into a scratch dir first, then move them in, so a
    failure leaves no partial results behind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        for name, writer in files.items():
            writer(Path(tmp) / name)
        Path(tmp, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for name in [*files, "manifest.json"]:
            os.replace(Path(tmp) / name, out / name)


def cmd_run(args):
    cfg = resolve_config(args.config, _overrides(args))
    ms = run_monte_carlo(cfg, _workers(args))
    rows = [
        (t, _fmt(c), _fmt(p), _fmt(f))
        for t, (c, p, f) in enumerate(zip(ms.clock_rmse, ms.pos_rmse, ms.full_branch_frac), start=1)
    ]
    name = "rmse_vs_t.csv"
    files = {name: lambda p: _write_csv(p, ["t", "clock_rmse_ns", "pos_rmse_m", "full_branch_frac"], rows)}
    acc = None if math.isnan(ms.nlos_accuracy) else ms.nlos_accuracy
    extra = {"nlos_accuracy": acc, "branch_counts": ms.branch_counts, "max_growth": ms.max_growth}
    _publish(args.out, files, _manifest(cfg, "run", files, extra))
    print(f"wrote {Path(args.out) / name} ({len(rows)} rows), nlos_accuracy={ms.nlos_accuracy:.4f}")
    return EXIT_OK


def _parse_values(param, text):
    parts = [v for v in (text or "").replace(",", " ").split() if v]
    if not parts:
        raise ConfigError("--values must list at least one value")
    try:
        vals = [float(v) for v in parts]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value: {exc}") from exc
    if param == "anchors":
        for v in vals:
            if v != int(v) or math.isqrt(int(v)) ** 2 != int(v) or v < 4:
                raise ConfigError(f"anchor values must be perfect squares >= 4, got {v:g}")
        return [int(v) for v in vals]
    return vals


def cmd_sweep(args):
    values = _parse_values(args.param, args.values)
    base = resolve_config(args.config, _overrides(args))
    field = SWEEP_PARAMS[args.param]
    modes = [args.mode] if args.mode else ["rlsr", "all", "oracle"]
    t0 = args.average_after
    configs = []
    for v in values:
        for mode in modes:
            try:
                configs.append((v, mode, ScenarioConfig(**{**base.to_dict(), field: v, "selection_mode": mode})))
            except InvalidInputError as exc:
                raise ConfigError(f"invalid sweep value {v}: {exc}") from exc
    rows = []
    for v, mode, cfg in configs:
        ms = run_monte_carlo(cfg, _workers(args))
        t_start = min(t0, cfg.t_max - 1)
        rows.append(
            (
                v if isinstance(v, int) else _fmt(v),
                mode,
                _fmt(ms.mean_after(t_start, "clock_rmse")),
                _fmt(ms.mean_after(t_start, "pos_rmse")),
                _fmt(ms.nlos_accuracy),
            )
        )
        print(f"{args.param}={v} mode={mode}: pos={rows[-1][3]} nlos={rows[-1][4]}", flush=True)
    name = f"sweep_{args.param}.csv"
    header = ["param_value", "mode", "avg_clock_rmse_ns", "avg_pos_rmse_m", "nlos_accuracy"]
    files = {name: lambda p: _write_csv(p, header, rows)}
    extra = {"sweep": {"param": args.param, "values": values, "modes": modes, "average_after_t": t0}}
    _publish(args.out, files, _manifest(base, "sweep", files, extra))
    print(f"wrote {Path(args.out) / name} ({len(rows)} rows)")
    return EXIT_OK


def cmd_bench(args):
    cfg = resolve_config(args.config, _overrides(args))
    rt = runtime_comparison(cfg, repeats=args.repeats)
    rows = [(t, _fmt(b), _fmt(d)) for t, (b, d) in enumerate(zip(rt.brmp_step_s, rt.direct_step_s), start=1)]
    name = "runtime_vs_t.csv"
    files = {name: lambda p: _write_csv(p, ["t", "brmp_step_s", "direct_step_s"], rows)}
    ratio = float(rt.direct_step_s[-1] / rt.brmp_step_s[-1])
    extra = {
        "repeats": args.repeats,
        "brmp_slope_drift": rt.slope_drift(),
        "final_ratio": ratio,
        "max_delta_gap": rt.max_delta_gap,
    }
    _publish(args.out, files, _manifest(cfg, "bench", files, extra))
    print(f"wrote {Path(args.out) / name} ({len(rows)} rows), direct/brmp at t={cfg.t_max}: {ratio:.2f}")
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_batteries

    reports = run_batteries(seed=args.seed if args.seed is not None else 0, lam_fault=args.inject_fault)
    lines = []
    ok = True
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        line = f"{status} {rep.name}: cases={rep.cases} max_error={rep.max_error:.3e} tol={rep.tol:.1e}"
        if not rep.passed:
            line += f" failing_seeds={list(rep.failing_seeds)[:20]}"
        lines.append(line)
        print(line)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify_report.txt").write_text("\n".join(lines) + "\n")
    (out / "verify_report.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    )
    return EXIT_OK if ok else EXIT_FAIL


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--trials", type=int, metavar="N")
    common.add_argument("--threads", type=int, metavar="N", help="worker processes (default: $TOA_RTLS_THREADS or CPU count)")
    common.add_argument("--sigma", type=float, metavar="F", help="ToA noise STD in ns")
    common.add_argument("--anchors", type=int, metavar="N", help="anchor count (perfect square)")
    common.add_argument("--mode", choices=["rlsr", "all", "oracle"])
    common.add_argument("--lambda", dest="lambda", type=float, metavar="F", help="forgetting factor")
    common.add_argument("--alpha", type=float, metavar="F", help="LoS proportion kept by RLSR")
    common.add_argument("--tmax", type=int, metavar="N", help="time instances per trial")

    parser = argparse.ArgumentParser(prog="toa-rtls", description="ToA joint localization and clock synchronization")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="Monte-Carlo run, writes rmse_vs_t.csv")
    sw = sub.add_parser("sweep", parents=[common], help="sweep sigma or anchors, writes sweep_<param>.csv")
    sw.add_argument("param", choices=sorted(SWEEP_PARAMS))
    sw.add_argument("--values", required=True, help="comma or space separated values")
    sw.add_argument("--average-after", type=int, default=100, metavar="T", help="average RMSE over t > T (default 100)")
    bn = sub.add_parser("bench", parents=[common], help="runtime per step, writes runtime_vs_t.csv")
    bn.add_argument("--repeats", type=int, default=3, help="trials per t to take the median over")
    vf = sub.add_parser("verify", parents=[common], help="run the self-verification batteries")
    vf.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "bench": cmd_bench, "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main_exit():
    sys.exit(main())
