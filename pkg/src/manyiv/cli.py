"""Command-line interface.

Exit codes: 0 strong, 1 weak, 2 error, 3 non-inferential.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import diagnostics as dg
from . import distributions as dist
from . import kernels
from .dataset import load_csv, validate
from .errors import ManyIVError

EXIT_STRONG, EXIT_WEAK, EXIT_ERROR, EXIT_NONINFERENTIAL = 0, 1, 2, 3
_EXIT = {"strong": EXIT_STRONG, "weak": EXIT_WEAK, "non-inferential": EXIT_NONINFERENTIAL}


class _UsageError(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _render(report: dict, fmt: str, text_lines) -> str:
    if fmt == "json":
        return _dumps(report)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        for k in sorted(report):
            v = report[k]
            w.writerow([k, "; ".join(v) if isinstance(v, list) else ("" if v is None else v)])
        return buf.getvalue()
    return "\n".join(text_lines(report)) + "\n"


def _report_text(r):
    lines = [f"n = {r['n']}, K = {r['K']}, p = {r['p']}, K/n = {r['alpha_hat']:.4f}, "
             f"mean squared leverage = {r['omega_hat']:.4f}"]
    for key in ("F", "Fc", "Fl", "trace", "CDc"):
        if r.get(key) is not None:
            lines.append(f"{key:>6} = {r[key]:.4f}")
    if r.get("C") is not None:
        lines.append(f"     C = {r['C']:.4f} ({r['C_source']})")
    if r["decision"] == "non-inferential":
        lines.append("decision: non-inferential (no test for p >= 3)")
    else:
        rel = ">" if r["decision"] == "strong" else "<="
        lines.append(f"decision: {r['decision']} instruments "
                     f"({r['statistic']} = {r[r['statistic']]:.4f} {rel} {r['critical_value']:.4f})")
    lines += [f"warning: {w}" for w in r["warnings"]]
    lines += [f"note: {x}" for x in r.get("notes", [])]
    return lines


def _sy_text(r):
    rel = ">" if r["decision"] == "strong" else "<="
    lines = [f"n = {r['n']}, K = {r['K']}, K/n = {r['alpha_hat']:.4f}",
             f"F = {r['F']:.4f} {rel} critical value {r['critical_value_sy']:.4f} "
             f"(mu0^2 = {r['mu0_sq']:g}, tau = {r['tau']:g})",
             f"decision: {r['decision']} instruments"]
    lines += [f"warning: {w}" for w in r["warnings"]]
    return lines


def _check_levels(tau, T):
    if not 0 < tau < 1:
        raise _UsageError(f"--tau must lie in (0, 1), got {tau}")
    if not tau < T <= 1:
        raise _UsageError(f"need tau < T <= 1, got tau={tau}, T={T}")


def _write_manifest(path, payload, started):
    doc = dict(payload)
    doc.update(
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        wall_time_s=round(time.perf_counter() - started, 3),
        backend=kernels.BACKEND,
    )
    Path(path).write_text(_dumps(doc))


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_diagnose(args) -> int:
    started = time.perf_counter()
    _check_levels(args.tau, args.T)
    ds = load_csv(args.data, p=args.p)
    C, source = dg.resolve_cutoff(ds.K, ds.n, C=args.C, C0=args.C0, T=args.T, tau=args.tau,
                                  use_cache=not args.no_cache)
    report = dg.build_report(ds, C, source, tau=args.tau, T=args.T).to_dict()
    _emit(_render(report, args.format, _report_text), args.out)
    if args.manifest:
        _write_manifest(args.manifest, {"command": "diagnose", "data": str(args.data)}, started)
    return _EXIT[report["decision"]]


def cmd_sy_test(args) -> int:
    if args.mu0sq < 0:
        raise _UsageError(f"--mu0sq must be >= 0, got {args.mu0sq}")
    if not 0 < args.tau < 1:
        raise _UsageError(f"--tau must lie in (0, 1), got {args.tau}")
    ds = load_csv(args.data, p=args.p)
    meta = validate(ds)
    if meta.p != 1:
        raise _UsageError("sy-test needs a single endogenous variable (p = 1)")
    from .projection import decompose, summarize

    s = summarize(decompose(ds), ds)
    F = dg.first_stage_F(s)
    res = dg.classical_sy_test(F, ds.K, ds.n, args.mu0sq, args.tau)
    report = {
        "n": ds.n, "K": ds.K, "p": 1, "alpha_hat": meta.alpha_hat, "omega_hat": s.omega_hat,
        "F": F, "Fc": None, "Fl": None, "C": None, "C_source": "none", "tau": args.tau,
        "T": args.T, "decision": "strong" if res.reject else "weak",
        "warnings": list(res.warnings), "mu0_sq": args.mu0sq,
        "critical_value_sy": res.critical_value, "predicted_size": res.predicted_size,
    }
    _emit(_render(report, args.format, _sy_text), args.out)
    return _EXIT[report["decision"]]


def cmd_calibrate(args) -> int:
    _check_levels(args.tau, args.T)
    if not 0 < args.alpha < 1:
        raise _UsageError(f"--alpha must lie in (0, 1), got {args.alpha}")
    result = dist.calibrate_C(args.T, args.tau, args.alpha, reps=args.reps, seed=args.seed)
    if not args.no_save:
        path = dist.save_calibration(result)
        print(f"saved {path}", file=sys.stderr)
    _emit(result.to_json() + "\n", args.out)
    return 0


def cmd_simulate(args) -> int:
    import jsonschema

    from . import montecarlo as mc

    started = time.perf_counter()
    text = Path(args.config).read_text()
    doc = json.loads(text)
    validator = jsonschema.Draft202012Validator(mc.config_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        for e in errors:
            key = "/".join(str(p) for p in e.absolute_path) or "<root>"
            print(f"error: config key {key}: {e.message}", file=sys.stderr)
        return EXIT_ERROR
    paths = mc.run_config(doc, args.out, threads=args.threads)
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": "simulate",
        "config": str(args.config),
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": doc.get("seed", 0),
        "outputs": sorted(p.name for p in paths),
    }
    _write_manifest(Path(args.out) / "manifest.json", manifest, started)
    for p in paths:
        print(p)
    return 0


def _nonneg(x):
    v = float(x)
    if not (math.isfinite(v) and v >= 0):
        raise argparse.ArgumentTypeError(f"expected a finite number >= 0, got {x}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manyiv", description="Weak-instrument diagnostics with many instruments."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("diagnose", help="test instrument strength on a CSV dataset")
    d.add_argument("--data", required=True, type=Path, help="CSV with columns y, Y1..Yp, Z1..ZK")
    d.add_argument("--p", type=int, default=None, help="number of endogenous columns (checked)")
    d.add_argument("--tau", type=float, default=0.05, help="significance level")
    d.add_argument("--T", type=float, default=0.10, help="tolerated Wald rejection rate")
    g = d.add_mutually_exclusive_group()
    g.add_argument("--C", type=_nonneg, default=None, help="cutoff override")
    g.add_argument("--C0", type=_nonneg, default=None, help="use c_from_c0 with this C0")
    d.add_argument("--no-cache", action="store_true", help="ignore cached calibrations")
    d.add_argument("--format", choices=("json", "csv", "text"), default="text")
    d.add_argument("--out", default=None, help="write the report here instead of stdout")
    d.add_argument("--manifest", default=None, help="write run metadata to this file")
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("calibrate", help="calibrate the cutoff C by simulation")
    c.add_argument("--alpha", type=float, required=True, help="K/n")
    c.add_argument("--T", type=float, default=0.10)
    c.add_argument("--tau", type=float, default=0.05)
    c.add_argument("--reps", type=int, default=dist.DEFAULT_CALIBRATION_REPS)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--no-save", action="store_true", help="do not write to the cache")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment from a JSON config")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("sy-test", help="classical F test of mu^2 <= mu0^2")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--p", type=int, default=None)
    t.add_argument("--mu0sq", type=float, required=True)
    t.add_argument("--tau", type=float, default=0.05)
    t.add_argument("--T", type=float, default=0.10)
    t.add_argument("--format", choices=("json", "csv", "text"), default="text")
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_sy_test)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ManyIVError, _UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
