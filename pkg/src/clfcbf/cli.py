"""Command-line front end.

Exit codes: 0 success, 1 bad input (parse error, missing file, empty glob),
2 initial controller infeasible, 3 solver failure, 4 certificate bound to a
different problem file, 5 a verification check failed.
"""

from __future__ import annotations

import argparse
import glob
import os
import re
import sys
import time
from importlib import resources
from typing import List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .alternate import AlternateConfig, InitInfeasible, IterationRecord, SolverFailure, run
from .certs import CertificateSet, ProblemSpec, SpecError, initial_controller, sublevel_box
from .fileio import ParseError, load_problem, read_certificate, write_certificate
from .poly import PolySyntaxError
from . import verify as vf

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3
EXIT_HASH = 4
EXIT_CHECK = 5

DEFAULT_SAMPLES = 100_000
DEFAULT_TRAJECTORIES = 10


class CliError(Exception):
    def __init__(self, message: str, code: int):
        self.code = code
        super().__init__(message)


def bundled_problems() -> List[str]:
    data = resources.files("clfcbf") / "data"
    return sorted(p.name for p in data.iterdir() if p.name.endswith(".prob"))


def resolve_problem(path: str) -> str:
    """A path on disk, or the name of a bundled problem file."""
    if os.path.exists(path):
        return path
    name = os.path.basename(path)
    if not name.endswith(".prob"):
        name += ".prob"
    if name in bundled_problems():
        return str(resources.files("clfcbf") / "data" / name)
    raise CliError(f"no such problem file: {path}", EXIT_INPUT)


def _load(path: str) -> Tuple[ProblemSpec, str]:
    try:
        spec, digest = load_problem(resolve_problem(path))
        for note in spec.validate():
            print(f"warning: {note}", file=sys.stderr)
    except (ParseError, PolySyntaxError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from None
    except SpecError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from None
    except OSError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    return spec, digest


def _load_cert(path: str, digest: Optional[str] = None) -> CertificateSet:
    try:
        cert, bound = read_certificate(path)
    except OSError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    except (ParseError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from None
    if digest is not None and bound != digest:
        raise CliError(f"{path} was produced for a different problem file", EXIT_HASH)
    return cert


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.6g}"


def _log_record(rec: IterationRecord) -> None:
    eps = " ".join(f"{e:.3e}" for e in rec.eps) or "-"
    print(
        f"iter {rec.k:3d}  cost {_fmt(rec.cost):>12}  eps [{eps}]  "
        f"inner {rec.step1_iters}/{rec.step2_iters}  "
        f"status {rec.step1_status or '-'}/{rec.step2_status or '-'}  "
        f"time {rec.step1_time + rec.step2_time:.2f}s",
        flush=True,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec, digest = _load(args.problem)
    if args.seed is not None:
        spec.seed = args.seed
    cfg = AlternateConfig(
        max_outer=spec.max_outer if args.max_outer is None else args.max_outer,
        cost_threshold=spec.threshold if args.threshold is None else args.threshold,
        checkpoint_dir=args.checkpoints,
        problem_hash=digest,
    )
    start = _load_cert(args.resume, digest) if args.resume else None
    out = args.out or os.path.splitext(os.path.basename(args.problem))[0] + ".cert"
    print(f"synth {args.problem}  n={spec.n} m={spec.m} t={spec.t}  max_outer={cfg.max_outer}", flush=True)
    t0 = time.perf_counter()
    try:
        # one BLAS thread keeps floating-point reductions in a fixed order
        with threadpool_limits(limits=1):
            cert, history = run(spec, initial_controller(spec), cfg, start=start, on_iteration=_log_record)
    except InitInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        for label, residual in exc.diagnosis[:5]:
            print(f"  {label}: {residual:.3e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    write_certificate(out, cert, digest, spec.n)
    done = [h for h in history[1:] if h.step2_status == "Optimal"]
    avg1 = np.mean([h.step1_iters for h in done]) if done else 0.0
    avg2 = np.mean([h.step2_iters for h in done]) if done else 0.0
    print(
        f"done: {len(done)} outer iterations, final cost {_fmt(cert.cost)}, "
        f"mean inner iterations {avg1:.1f}/{avg2:.1f}, {time.perf_counter() - t0:.1f}s -> {out}",
        flush=True,
    )
    return EXIT_OK


def _start_points(spec: ProblemSpec, cert: CertificateSet, count: int, seed: int) -> np.ndarray:
    if count <= 0:
        return np.zeros((0, spec.n))
    if cert.B:
        return vf.sample_safe_set(spec, cert.B, count, seed)
    return vf.sample_operating_region(spec, count, seed)


def _trajectory_ok(spec: ProblemSpec, cert: CertificateSet, traj: vf.Trajectory) -> Tuple[bool, bool]:
    """(stayed in the allowable set, V decreased)."""
    safe = not traj.left_operating_region
    if spec.w and len(traj.states):
        safe = safe and bool(np.all(vf.eval_polys(spec.w, traj.states) <= vf.CONTAIN_TOL))
    return safe, vf.check_decrease(cert.V, traj, spec.xstar).passed


def cmd_verify(args) -> int:
    spec, digest = _load(args.problem)
    cert = _load_cert(args.certificate, digest)
    seed = spec.seed if args.seed is None else args.seed
    ok = True

    grams = vf.check_grams(cert, spec)
    bad = [g for g in grams if not g.passed]
    worst = max((g.rel_error for g in grams), default=0.0)
    lowest = min((g.min_eig for g in grams), default=0.0)
    print(f"gram identities: {len(grams) - len(bad)}/{len(grams)} pass  "
          f"(max rel error {worst:.2e}, min eigenvalue {lowest:.2e})")
    for g in bad:
        print(f"  FAIL {g.label}: rel error {g.rel_error:.2e}, min eigenvalue {g.min_eig:.2e}")
    ok &= not bad

    res = vf.sample_sos_residuals(cert, spec, args.samples, seed)
    print(f"sampled residuals: {'pass' if res.passed else 'FAIL'}  ({res.samples} samples)")
    for label in sorted(res.minima):
        print(f"  {label:>12}: min {res.minima[label]: .3e}")
    ok &= res.passed

    if cert.B:
        X = vf.sample_operating_region(spec, args.samples, seed)
        viol = vf.containment_violations(spec, cert.B, X)
        print(f"safe set inside allowable set: {'pass' if viol == 0 else 'FAIL'}  ({viol} violations)")
        ok &= viol == 0

    starts = _start_points(spec, cert, args.trajectories, seed)
    if len(starts):
        ctrl = vf.RationalController.from_certificate(cert, spec)
        n_safe = n_dec = 0
        for x0 in starts:
            safe, dec = _trajectory_ok(spec, cert, vf.simulate(spec, ctrl, x0, args.T, args.dt))
            n_safe += safe
            n_dec += dec
        k = len(starts)
        print(f"trajectories: {n_safe}/{k} stay in the allowable set, {n_dec}/{k} with decreasing V")
        ok &= n_safe == k and n_dec == k

    print("verification passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_CHECK


def _parse_points(items: Sequence[str], n: int) -> np.ndarray:
    pts = []
    for item in items:
        try:
            vals = [float(v) for v in item.replace(",", " ").split()]
        except ValueError:
            raise CliError(f"bad initial state {item!r}", EXIT_INPUT) from None
        if len(vals) != n:
            raise CliError(f"initial state {item!r} needs {n} coordinates", EXIT_INPUT)
        pts.append(vals)
    return np.array(pts, dtype=float).reshape(-1, n)


def cmd_simulate(args) -> int:
    spec, digest = _load(args.problem)
    cert = _load_cert(args.certificate, digest)
    seed = spec.seed if args.seed is None else args.seed
    starts = _parse_points(args.x0 or [], spec.n)
    if args.samples:
        starts = np.vstack([starts, _start_points(spec, cert, args.samples, seed)])
    if not len(starts):
        starts = np.asarray(spec.xstar, dtype=float)[None, :]
    ctrl = vf.RationalController.from_certificate(cert, spec)
    trajs = []
    for x0 in starts:
        tr = vf.simulate(spec, ctrl, x0, args.T, args.dt)
        trajs.append(tr)
        safe, dec = _trajectory_ok(spec, cert, tr)
        events = ",".join(tr.events) or "none"
        print(f"x0 {np.array2string(x0, precision=4)}  steps {len(tr.times)}  safe {safe}  "
              f"decreasing {dec}  events {events}")
    out = args.out or "trajectories.csv"
    vf.write_trajectories_csv(out, trajs, spec, cert)
    print(f"wrote {out}")
    return EXIT_OK


_ITER = re.compile(r"iter(\d+)_step(\d)")


def _checkpoint_key(path: str) -> Tuple[int, int, str]:
    m = _ITER.search(os.path.basename(path))
    return (int(m.group(1)), int(m.group(2)), path) if m else (10**9, 0, path)


def cmd_plotdata(args) -> int:
    spec, digest = _load(args.problem)
    paths = sorted(glob.glob(args.certificates), key=_checkpoint_key)
    if not paths:
        raise CliError(f"no certificate files match {args.certificates!r}", EXIT_INPUT)
    if args.step is not None:
        paths = [p for p in paths if _checkpoint_key(p)[1] in (args.step, 0)]
    axes = tuple(int(a) - 1 for a in args.axes.split(","))
    if len(axes) != 2 or not all(0 <= a < spec.n for a in axes) or axes[0] == axes[1]:
        raise CliError(f"--axes needs two distinct indices in 1..{spec.n}", EXIT_INPUT)
    fixed = np.asarray(spec.xstar, dtype=float) if args.fixed is None else _parse_points([args.fixed], spec.n)[0]

    polys = []
    single = len(paths) == 1
    for path in paths:
        cert = _load_cert(path, digest)
        tag = "" if single else f"iter{cert.iteration}:"
        polys += [(f"{tag}B{i + 1}", b) for i, b in enumerate(cert.B) if b.terms]
    polys += [(f"w{i + 1}", w) for i, w in enumerate(spec.w)]
    if not polys:
        raise CliError("nothing to plot", EXIT_INPUT)

    lo, hi = sublevel_box(spec.r)
    data = vf.contour_slice(polys, lo[list(axes)], hi[list(axes)], (args.grid, args.grid), axes, fixed)
    out = args.out or "slice.csv"
    vf.write_slice_csv(out, data)
    print(f"wrote {out}: {len(polys)} polynomials on a {args.grid}x{args.grid} grid")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clfcbf", description="Compatible CLF/CBF synthesis by SOS programming.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="run the alternating synthesis")
    s.add_argument("problem", help="problem file, or the name of a bundled one (e.g. powerconverter)")
    s.add_argument("--out", help="certificate file (default: <problem>.cert)")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-outer", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--checkpoints", metavar="DIR", help="write iter<k>_step<1|2>.cert files here")
    s.add_argument("--resume", metavar="CERT", help="continue from a step-2 checkpoint")
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("verify", help="numerically check a certificate")
    v.add_argument("problem")
    v.add_argument("certificate")
    v.add_argument("--samples", type=int, default=DEFAULT_SAMPLES, help="Monte-Carlo samples (default 1e5)")
    v.add_argument("--trajectories", type=int, default=DEFAULT_TRAJECTORIES)
    v.add_argument("--T", type=float, default=5.0)
    v.add_argument("--dt", type=float, default=1e-3)
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("simulate", help="closed-loop trajectories as CSV")
    m.add_argument("problem")
    m.add_argument("certificate")
    m.add_argument("--x0", action="append", help="initial state 'a,b,...' (repeatable)")
    m.add_argument("--samples", type=int, default=0, help="additional starts sampled from the safe set")
    m.add_argument("--T", type=float, default=5.0)
    m.add_argument("--dt", type=float, default=1e-3)
    m.add_argument("--seed", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot-data", help="slice samples and zero-level curves as CSV")
    p.add_argument("problem")
    p.add_argument("certificates", help="certificate file or glob of checkpoints")
    p.add_argument("--axes", default="1,2", help="two 1-based state indices spanning the plane")
    p.add_argument("--fixed", help="values of the remaining coordinates (default: equilibrium)")
    p.add_argument("--grid", type=int, default=401)
    p.add_argument("--step", type=int, choices=(1, 2), default=2, help="checkpoint half-step to plot")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plotdata)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
