"""Command-line front end: ``gridsplit run | eig | compare``.

Exit codes: 0 success, 1 comparison failed, 2 convergence failure, 3 input error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import devices as dev
from .decomp import PartitionError, RelaxationDivergence
from .engine import (ScenarioError, SteadyStateError, bundled, load_scenario, run, summary,
                     write_csv, write_summary)
from .integrate import IntegratorKind, NonFiniteDerivative
from .netcore import CaseParseError, CaseValidationError, SingularMatrixError, load_case

EXIT_OK, EXIT_COMPARE, EXIT_CONVERGENCE, EXIT_INPUT = 0, 1, 2, 3
INPUT_ERRORS = (FileNotFoundError, ScenarioError, CaseParseError, CaseValidationError,
                PartitionError, SteadyStateError, SingularMatrixError, ValueError, KeyError)


def _err(msg: str) -> None:
    print(f"gridsplit: {msg}", file=sys.stderr)


def _case_path(value: str) -> str:
    if Path(value).exists():
        return value
    try:
        return str(bundled(value))
    except FileNotFoundError:
        raise FileNotFoundError(f"case file not found: {value}") from None


def _default_workers() -> int:
    raw = os.environ.get("GRIDSPLIT_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def cmd_run(args) -> int:
    try:
        if args.workers < 1:
            raise ValueError("--workers must be >= 1")
        spec = load_scenario(args.scenario)
        over = {}
        if args.case:
            over["case_path"] = _case_path(args.case)
        if args.benchmark is not None:
            over["benchmark"] = args.benchmark
        if args.sigma is not None:
            over["sigma"] = args.sigma
        if args.integrator:
            over["integrator"] = IntegratorKind(args.integrator)
        spec = replace(spec, **over)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result, log = run(spec, workers=args.workers)
    except RelaxationDivergence as exc:
        _err(f"{exc} at t = {getattr(exc, 'sim_time', float('nan')):.6g} s")
        return EXIT_CONVERGENCE
    except NonFiniteDerivative as exc:
        _err(f"{exc} at t = {getattr(exc, 'sim_time', float('nan')):.6g} s")
        return EXIT_CONVERGENCE
    except INPUT_ERRORS as exc:
        _err(str(exc))
        return EXIT_INPUT
    csv_path = out / f"{spec.name}.csv"
    write_csv(result, csv_path)
    data = summary(spec, result, log)
    write_summary(data, out / f"{spec.name}.summary.json")
    print(f"wrote {csv_path} ({data['steps']} samples, {data['total_iterations']} iterations"
          + (f", max deviation {data['max_deviation']:.3e} pu" if "max_deviation" in data else "")
          + ")")
    return EXIT_OK


def _parse_sweep(text: str) -> tuple[str, np.ndarray]:
    name, sep, rng = text.partition("=")
    parts = rng.split(":")
    if not sep or len(parts) != 3:
        raise ValueError(f"sweep must look like NAME=start:step:stop, got {text!r}")
    start, step, stop = map(float, parts)
    if not step > 0 or stop < start:
        raise ValueError(f"empty sweep range in {text!r}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return name.strip(), start + step * np.arange(count)


def _with(p: dev.GfmParams, name: str, value: float) -> dev.GfmParams:
    if name == "Rv_over_Xv":
        return replace(p, R_v=value * p.w1 * p.L_v)
    if name not in {f for f in p.__dataclass_fields__}:
        raise ValueError(f"unknown gfm parameter '{name}'")
    ratio = p.R_v / (p.w1 * p.L_v)
    q = replace(p, **{name: value})
    # keep the R_v / X_v design ratio when the inductance itself is swept
    return replace(q, R_v=ratio * q.w1 * q.L_v) if name == "L_v" else q


def cmd_eig(args) -> int:
    try:
        case = load_case(_case_path(args.case))
        blocks = [(g.block, dev.GfmParams.from_block(case.blocks[g.block]))
                  for g in case.generators if g.kind == "gfm"]
        if not blocks:
            raise ValueError(f"case {args.case} has no grid-forming inverter")
        sweeps = [_parse_sweep(s) for s in args.sweep or []]
    except INPUT_ERRORS as exc:
        _err(str(exc))
        return EXIT_INPUT
    np.set_printoptions(linewidth=120)
    for name, p in blocks:
        eig, stable = dev.gfm_eigen_stability(dev.gfm_build_state_space(p))
        inert = dev.inert_states(dev.gfm_build_state_space(p).A)
        print(f"[gfm {name}] stable = {str(stable).lower()}"
              + (f" (inert states: {', '.join(dev.STATE_NAMES[k] for k in inert)})" if inert else ""))
        for z in sorted(eig, key=lambda z: (z.real, z.imag)):
            print(f"  {z.real: .6e} {z.imag:+.6e}j")
    if sweeps:
        name, p0 = blocks[0]
        out = Path(args.out)
        path = out / f"eig_sweep_{name}.csv" if out.is_dir() or not out.suffix else out
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = [k for k, _ in sweeps]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([*keys, "max_real", "stable", "max_real_active"])
            for combo in itertools.product(*(v for _, v in sweeps)):
                p = p0
                try:
                    for k, v in zip(keys, combo):
                        p = _with(p, k, float(v))
                except ValueError as exc:
                    _err(str(exc))
                    return EXIT_INPUT
                A = dev.gfm_build_state_space(p).A
                eig, stable = dev.gfm_eigen_stability(A)
                # spectrum without the states that feed nothing back (exact zero modes)
                keep = [k for k in range(A.shape[0]) if k not in dev.inert_states(A)]
                active = np.linalg.eigvals(A[np.ix_(keep, keep)]).real.max()
                w.writerow([*(repr(float(v)) for v in combo), repr(float(eig.real.max())),
                            int(stable), repr(float(active))])
        print(f"wrote {path}")
    return EXIT_OK


def _read_trace(path: str) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no samples")
    head = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return {h: data[:, k] for k, h in enumerate(head)}


def _voltages(tr: dict[str, np.ndarray], prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for key in tr:
        if key.startswith(f"{prefix}V_mag_bus"):
            bus = key[len(f"{prefix}V_mag_bus"):]
            ang = tr.get(f"{prefix}V_ang_bus{bus}")
            out[bus] = tr[key] * np.exp(1j * ang) if ang is not None else tr[key]
    return out


def cmd_compare(args) -> int:
    try:
        a = _read_trace(args.a)
        if args.b:
            b = _read_trace(args.b)
            va, vb = _voltages(a), _voltages(b)
        else:
            b = a
            va, vb = _voltages(a), _voltages(a, "bench_")
            if not vb:
                raise ValueError(f"{args.a} has no benchmark columns; give a second trace")
            va = {k: np.abs(v) for k, v in va.items()}
        if a["t"].shape != b["t"].shape or np.any(a["t"] != b["t"]):
            raise ValueError("time axes differ")
        if set(va) != set(vb):
            raise ValueError("bus sets differ")
        # magnitude-only traces are compared on magnitude
        if any(np.isrealobj(v) for v in (*va.values(), *vb.values())):
            va = {k: np.abs(v) for k, v in va.items()}
            vb = {k: np.abs(v) for k, v in vb.items()}
    except (OSError, ValueError, KeyError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    worst = 0.0
    print(f"{'bus':>6} {'max |dV| (pu)':>16}")
    for bus in sorted(va, key=lambda s: int(s) if s.isdigit() else s):
        d = float(np.max(np.abs(va[bus] - vb[bus])))
        worst = max(worst, d)
        print(f"{bus:>6} {d:16.6e}")
    ok = worst <= args.tol
    print(f"max deviation {worst:.6e} pu, tol {args.tol:.1e}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_COMPARE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridsplit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write a CSV trace + JSON summary")
    r.add_argument("--scenario", required=True, help="scenario file or bundled name")
    r.add_argument("--case", help="override the scenario's case (file or bundled name)")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--benchmark", action=argparse.BooleanOptionalAction, default=None,
                   help="run the monolithic LU benchmark in lockstep")
    r.add_argument("--workers", type=int, default=_default_workers())
    r.add_argument("--sigma", type=float)
    r.add_argument("--integrator", choices=[k.value for k in IntegratorKind])
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eig", help="GFM eigenvalues and optional stability sweep")
    e.add_argument("--case", default="case9")
    e.add_argument("--sweep", action="append", metavar="NAME=start:step:stop")
    e.add_argument("--out", default=".", help="directory or CSV path for the sweep map")
    e.set_defaults(func=cmd_eig)

    c = sub.add_parser("compare", help="per-bus voltage deviation between two traces")
    c.add_argument("a")
    c.add_argument("b", nargs="?", help="second trace; omitted = compare against bench_ columns")
    c.add_argument("--tol", type=float, default=1e-6)
    c.set_defaults(func=cmd_compare)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
