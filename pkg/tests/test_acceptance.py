"""End-to-end acceptance checks.

Each test records one line in the acceptance summary printed after the run.
The power converter synthesis runs once per session through the CLI; the
reproducibility check runs it a second time.
"""
import re
import subprocess
import sys
import time

import numpy as np
import pytest

from clfcbf.alternate import SolverFailure, check_monotone, run
from clfcbf.certs import ControllerCaps, build_step1_program, build_step2_program, initial_controller, sublevel_box
from clfcbf.cli import resolve_problem
from clfcbf.fileio import load_problem, read_certificate
from clfcbf.poly import Polynomial, evaluate_many, gradient, parse
from clfcbf.sdp import psd_project_check, solve
from clfcbf.soscomp import SosProgram, monomial_basis
from clfcbf.verify import (
    RationalController,
    check_decrease,
    check_grams,
    containment_violations,
    sample_box,
    sample_safe_set,
    simulate,
)

from test_sdp import SUITE

TOYS = ["toy1d", "toy1d_unstable", "toy2d_integrator", "toy2d_pendulum", "toy2d_two_barriers"]
ITER_LINE = re.compile(r"^iter\s+(\d+)\s+cost\s+(\S+)\s+eps \[([^\]]*)\]\s+inner (\d+)/(\d+)\s+status (\S+)/(\S+)")
DONE_LINE = re.compile(r"^done: (\d+) outer iterations.*mean inner iterations ([\d.]+)/([\d.]+)")


def synth_converter(out):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "clfcbf", "synth", "powerconverter", "--out", str(out)],
        capture_output=True, text=True, timeout=1800,
    )
    return proc, time.perf_counter() - t0


@pytest.fixture(scope="session")
def converter(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "pc.cert"
    proc, secs = synth_converter(out)
    assert proc.returncode == 0, proc.stderr
    iters = [ITER_LINE.match(ln) for ln in proc.stdout.splitlines()]
    iters = [m for m in iters if m]
    done = next(DONE_LINE.match(ln) for ln in proc.stdout.splitlines() if DONE_LINE.match(ln))
    spec, _ = load_problem(resolve_problem("powerconverter"))
    cert, _ = read_certificate(str(out))
    return dict(path=out, secs=secs, iters=iters, done=done, spec=spec, cert=cert)


def test_criterion1_converter_synthesis(converter, acceptance):
    iters, done = converter["iters"], converter["done"]
    eps = [float(e) for e in iters[-1].group(3).split()]
    costs = [float(m.group(2)) for m in iters]
    monotone = all(b <= a + 1e-6 for a, b in zip(costs, costs[1:]))
    inner1, inner2 = float(done.group(2)), float(done.group(3))

    spec = converter["spec"]
    s1, p, pm1 = initial_controller(spec)
    st1 = build_step1_program(spec, s1, p, pm1).prog.stats()
    caps = ControllerCaps.from_initial(spec, s1, p, pm1)
    V = parse("x1^2 + x2^2 + x3^2", spec.varnames)
    st2 = build_step2_program(spec, V, spec.w, s1, caps, pm1).prog.stats()
    within2 = lambda got, ref: ref / 2 <= got <= 2 * ref
    sizes = (within2(st1["variables"], 337) and within2(st2["variables"], 372)
             and within2(st1["constraints"], 5188) and within2(st2["constraints"], 4892))

    ok = (max(eps) <= 1e-7 and max(converter["cert"].eps) <= 1e-7 and monotone
          and converter["secs"] < 600 and 10 <= inner1 <= 100 and 10 <= inner2 <= 100 and sizes)
    detail = (f"{len(iters)} iterations, cost {costs[0]:.4g} -> {costs[-1]:.4g}, max eps {max(eps):.2e}, "
              f"{converter['secs']:.0f}s, inner {inner1:.1f}/{inner2:.1f}, "
              f"sizes {st1['variables']}/{st2['variables']} vars {st1['constraints']}/{st2['constraints']} rows")
    assert acceptance(1, "power converter synthesis", ok, detail), detail


def test_criterion2_safety(converter, acceptance):
    spec, cert = converter["spec"], converter["cert"]
    # box around X_a1 n X_a2, widened by a quarter on each side
    boxes = [sublevel_box(w) for w in spec.w]
    lo = np.max([b[0] for b in boxes], axis=0)
    hi = np.min([b[1] for b in boxes], axis=0)
    pad = 0.25 * (hi - lo)
    X = sample_box(lo - pad, hi + pad, 100_000, seed=2)
    bad_points = containment_violations(spec, cert.B, X, tol=1e-6)

    ctrl = RationalController.from_certificate(cert, spec)
    starts = sample_safe_set(spec, cert.B, 100, seed=5)
    left, not_decreasing = 0, 0
    for x0 in starts:
        tr = simulate(spec, ctrl, x0, T=5.0, dt=1e-3)
        W = np.column_stack([evaluate_many(w, tr.states) for w in spec.w])
        left += int(tr.left_operating_region or np.any(W > 1e-6))
        not_decreasing += int(not check_decrease(cert.V, tr, spec.xstar, radius=1e-4).passed)

    ok = bad_points == 0 and left == 0 and not_decreasing == 0
    detail = (f"{bad_points} of 1e5 samples in the safe set but outside X_a; {left}/100 trajectories leave X_a; "
              f"{not_decreasing}/100 without decreasing V")
    assert acceptance(2, "safety by sampling and simulation", ok, detail), detail


def test_criterion3_gram_identities(converter, acceptance):
    checks = check_grams(converter["cert"], converter["spec"])
    worst_err = max(g.rel_error for g in checks)
    worst_eig = min(g.min_eig for g in checks)
    ok = bool(checks) and worst_err <= 1e-6 and worst_eig >= -1e-8
    detail = f"{len(checks)} Gram blocks, max rel error {worst_err:.2e}, min eigenvalue {worst_eig:.2e}"
    assert acceptance(3, "certificate Gram identities", ok, detail), detail


def _seeded_start(spec, seed):
    rng = np.random.default_rng(seed)
    s1, p, pm1 = initial_controller(spec)
    a, b = rng.uniform(1.0, 2.0), rng.uniform(0.5, 2.0)
    return s1, [q.scale(a) for q in p], [q.scale(b) for q in pm1]


def test_criterion4_alternation_property(acceptance):
    violations, step1_failures = [], []
    for seed in range(20):
        name = TOYS[seed % len(TOYS)]
        spec, _ = load_problem(resolve_problem(name))
        try:
            _, history = run(spec, _seeded_start(spec, seed))
        except SolverFailure as exc:
            violations.append(f"{name}/{seed}: {exc}")
            continue
        for rec in history[1:]:
            if rec.step1_status != "Optimal":
                step1_failures.append(f"{name}/{seed}@{rec.k}:{rec.step1_status}")
                continue
            if rec.step2_status != "Optimal" or sum(rec.eps) > spec.t * 1e-7:
                violations.append(f"{name}/{seed}@{rec.k}: step 2 {rec.step2_status}, eps {rec.eps}")
        if not check_monotone(history):
            violations.append(f"{name}/{seed}: cost increased")
    detail = f"{len(violations)} violations in 20 runs"
    if step1_failures:
        detail += f"; Step 1 not optimal (outside the property): {', '.join(step1_failures)}"
    if violations:
        detail += "; " + "; ".join(violations)
    assert acceptance(4, "alternation property over seeded toy runs", not violations, detail), detail


def _is_sos(text, names, half_degree):
    prog = SosProgram(len(names))
    prog.assert_sos(parse(text, names), monomial_basis(len(names), half_degree))
    return prog.solve().status


def test_criterion5_sdp_oracles(acceptance):
    misses = []
    for name, prob, opt in SUITE:
        sol = solve(prob)
        if sol.status != "Optimal" or abs(sol.pobj - opt) > 1e-6 or not all(psd_project_check(X)[0] for X in sol.x_blocks):
            misses.append(f"{name}: {sol.status} {sol.pobj:.3g} vs {opt:.3g}")
    motzkin = _is_sos("x1^4*x2^2 + x1^2*x2^4 - 3*x1^2*x2^2 + 1", ["x1", "x2"], 3)
    square = _is_sos("x^2 + 2*x + 1", ["x"], 1)
    ok = len(SUITE) == 20 and not misses and motzkin == "Infeasible" and square == "Optimal"
    detail = f"{len(SUITE) - len(misses)}/{len(SUITE)} oracle problems, Motzkin {motzkin}, (x+1)^2 {square}"
    if misses:
        detail += "; " + "; ".join(misses)
    assert acceptance(5, "SDP solver oracle suite", ok, detail), detail


def _random_poly(rng, nvars, maxdeg):
    basis = monomial_basis(nvars, maxdeg)
    keep = rng.random(len(basis)) < 0.6
    return Polynomial(nvars, {m: float(c) for m, c, k in zip(basis, rng.normal(size=len(basis)), keep) if k})


def test_criterion6_numerical_calculus(acceptance):
    rng = np.random.default_rng(6)
    h, worst = 1e-4, 0.0
    for _ in range(100):
        n = int(rng.integers(1, 5))
        p = _random_poly(rng, n, int(rng.integers(0, 5)))
        x = rng.uniform(-1.0, 1.0, n)
        g = np.array([q(x) for q in gradient(p)])
        fd = np.array([(p(x + h * e) - p(x - h * e)) / (2 * h) for e in np.eye(n)])
        worst = max(worst, float(np.max(np.abs(fd - g)) / max(1.0, float(np.max(np.abs(g))))))

    names = ["x"]
    decay = load_problem(resolve_problem("toy1d"))[0]
    decay.f, decay.G = [parse("-x", names)], [[parse("0", names)]]
    ctrl = RationalController((parse("0", names),), parse("1", names), 1e-3)
    tr = simulate(decay, ctrl, [1.0], T=1.0, dt=1e-3)
    rk4_err = abs(float(tr.states[-1, 0]) - np.exp(-1.0))

    ok = worst <= 1e-6 and rk4_err <= 1e-6 and tr.times[-1] == pytest.approx(1.0)
    detail = f"max gradient vs central difference {worst:.2e}; RK4 error at t=1 {rk4_err:.2e}"
    assert acceptance(6, "gradients and RK4", ok, detail), detail


def test_criterion7_reproducible(converter, tmp_path, acceptance):
    again = tmp_path / "pc_again.cert"
    proc, _ = synth_converter(again)
    same = proc.returncode == 0 and again.read_bytes() == converter["path"].read_bytes()
    detail = "certificate files are byte-identical" if same else "certificate files differ"
    assert acceptance(7, "reproducible synthesis", same, detail), detail
