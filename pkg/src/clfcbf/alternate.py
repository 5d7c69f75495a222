"""Alternating synthesis loop.

Step 1 fixes the controller triple (s1, p, pm1) and searches for V, B_i and
the multipliers; Step 2 fixes V and B_i and searches for a controller that
satisfies every constraint with minimal CBF slack.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .certs import (
    CertificateSet,
    ProblemSpec,
    ControllerCaps,
    build_step1_program,
    build_step2_program,
    c1_value,
    c2_value,
    initial_controller,
)
from .poly import Polynomial, clean, max_abs_coeff
from .sdp import SdpOptions, diagnose

log = logging.getLogger(__name__)

EPS_TOL = 1e-7
MONOTONE_TOL = 1e-6
# a barrier whose coefficients all fall below this (relative to its center
# target) is numerically zero and is replaced by the zero polynomial
TRIVIAL_TOL = 1e-6
# Step 1 returns the smallest admissible V, which leaves the CLF condition
# tight; V is then scaled by this factor to give Step 2 an interior point
V_MARGIN = 2.0


class InitInfeasible(RuntimeError):
    def __init__(self, message: str, diagnosis: List[Tuple[str, float]]):
        self.diagnosis = diagnosis
        super().__init__(message)


class SolverFailure(RuntimeError):
    pass


@dataclass
class AlternateConfig:
    max_outer: int = 30
    cost_threshold: float = 1e-3
    solver: SdpOptions = field(default_factory=SdpOptions)
    checkpoint_dir: Optional[str] = None
    problem_hash: str = ""

    def __post_init__(self):
        if self.max_outer < 0 or self.cost_threshold <= 0:
            raise ValueError("max_outer must be >= 0 and cost_threshold > 0")


@dataclass
class IterationRecord:
    k: int
    cost: Optional[float]
    eps: List[float]
    step1_iters: int = 0
    step2_iters: int = 0
    step1_time: float = 0.0
    step2_time: float = 0.0
    step1_status: str = ""
    step2_status: str = ""
    snapshot: Optional[CertificateSet] = None


@dataclass
class Step1Result:
    status: str
    V: Optional[Polynomial]
    B: List[Polynomial]
    s2: Optional[Polynomial]
    s3: List[Polynomial]
    s4: List[Polynomial]
    grams: dict
    cost: Optional[float]
    iterations: int
    seconds: float
    diagnosis: list


@dataclass
class Step2Result:
    status: str
    s1: Optional[Polynomial]
    p: List[Polynomial]
    pm1: List[Polynomial]
    s2: Optional[Polynomial]
    s3: List[Polynomial]
    eps: List[float]
    grams: dict
    iterations: int
    seconds: float
    diagnosis: list


def _grams(res, blocks) -> dict:
    return {label: (list(b.basis), res.gram(b)) for label, b in blocks.items()}


def step1(spec: ProblemSpec, s1: Polynomial, p, pm1, options: Optional[SdpOptions] = None) -> Step1Result:
    t0 = time.perf_counter()
    built = build_step1_program(spec, s1, p, pm1)
    res = built.prog.solve(options)
    secs = time.perf_counter() - t0
    sol = res.solution
    if res.values is None or sol.status != "Optimal":
        diag = diagnose(res.compiled.problem, sol)
        return Step1Result(sol.status, None, [], None, [], [], {}, None, sol.iterations, secs, diag)
    V = clean(res.poly(built.V))
    B = [clean(res.poly(b)) for b in built.B]
    B = [Polynomial.zero(spec.n) if max_abs_coeff(b) <= TRIVIAL_TOL * (1.0 + abs(bc)) else b
         for b, (_, bc) in zip(B, spec.centers)]
    cost = c1_value(B, spec) + c2_value(B, spec)
    s2, grams = res.poly(built.s2), _grams(res, built.blocks)
    V, s2 = _add_clf_margin(spec, V, s2, grams, V_MARGIN)
    return Step1Result(
        "Optimal",
        V,
        B,
        s2,
        [res.poly(q) for q in built.s3],
        [res.poly(q) for q in built.s4],
        grams,
        cost,
        sol.iterations,
        secs,
        [],
    )


def _keep_barriers(r1: Step1Result, last: CertificateSet, cost: float) -> None:
    """Swap the barriers of ``r1`` for those of ``last``.

    ``last`` was certified with the current controller, so its B, s3, s4 and
    their Gram records remain a feasible Step-1 point; only V and s2 are new.
    """
    r1.B, r1.s3, r1.s4, r1.cost = list(last.B), list(last.s3), list(last.s4), cost
    for key in list(r1.grams):
        if key.startswith(("s3_", "s4_", "cbf_", "contain_")) and key in last.grams:
            r1.grams[key] = last.grams[key]


def _add_clf_margin(spec: ProblemSpec, V: Polynomial, s2: Polynomial, grams: dict, alpha: float):
    """Replace (V, s2) by alpha (V, s2), updating the Gram records in place.

    The CLF polynomial becomes alpha * clf + (alpha - 1) l^2, so its Gram
    matrix gains (alpha - 1) c c' with c the coefficients of l on the basis.
    Without room for l in the basis the pair is returned unchanged.
    """
    basis, Q = grams["clf"]
    index = {z: k for k, z in enumerate(basis)}
    if alpha == 1.0 or any(mono not in index for mono in spec.l.terms):
        return V, s2
    c = np.zeros(len(basis))
    for mono, coef in spec.l.terms.items():
        c[index[mono]] = coef
    grams["clf"] = (basis, alpha * Q + (alpha - 1.0) * np.outer(c, c))
    for key in ("V", "s2"):
        b, G = grams[key]
        grams[key] = (b, alpha * G)
    return V.scale(alpha), s2.scale(alpha)


def step2(
    spec: ProblemSpec,
    V: Polynomial,
    B,
    s1_prev: Optional[Polynomial] = None,
    options: Optional[SdpOptions] = None,
    caps: Optional[ControllerCaps] = None,
    pm1_prev=None,
) -> Step2Result:
    t0 = time.perf_counter()
    built = build_step2_program(spec, V, B, s1_prev, caps, pm1_prev)
    res = built.prog.solve(options)
    sol = res.solution
    secs = time.perf_counter() - t0
    if res.values is None or sol.status != "Optimal":
        diag = diagnose(res.compiled.problem, sol)
        return Step2Result(sol.status, None, [], [], None, [], [], {}, sol.iterations, secs, diag)
    return Step2Result(
        "Optimal",
        res.poly(built.s1),
        [res.poly(q) for q in built.p],
        [res.poly(q) for q in built.pm1],
        res.poly(built.s2),
        [res.poly(q) for q in built.s3],
        [float(res.scalar(e)) for e in built.eps],
        _grams(res, built.blocks) | _vacuous_grams(spec, B),
        sol.iterations,
        secs,
        [],
    )


def _vacuous_grams(spec: ProblemSpec, B) -> dict:
    """Gram records for barriers left out of Step 2 (all-zero identities)."""
    one = [(0,) * spec.n]
    out = {}
    for i, b in enumerate(B):
        if not b.terms:
            k = i + 1
            out[f"s3_{k}"] = (one, np.zeros((1, 1)))
            out[f"cbf_{k}"] = (one, np.zeros((1, 1)))
            out[f"epsfloor_{k}"] = (one, np.full((1, 1), spec.eps_floor))
    return out


def check_monotone(history: List[IterationRecord], tol: float = MONOTONE_TOL) -> bool:
    costs = [h.cost for h in history if h.cost is not None]
    return all(b <= a + tol for a, b in zip(costs, costs[1:]))


def _checkpoint(cfg: AlternateConfig, spec: ProblemSpec, cert: CertificateSet, k: int, half: int) -> None:
    if not cfg.checkpoint_dir:
        return
    from .fileio import write_certificate

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    write_certificate(os.path.join(cfg.checkpoint_dir, f"iter{k}_step{half}.cert"), cert, cfg.problem_hash, spec.n)


def _zero(n: int) -> Polynomial:
    return Polynomial.zero(n)


def run(
    spec: ProblemSpec,
    init: Optional[Tuple[Polynomial, list, list]] = None,
    cfg: Optional[AlternateConfig] = None,
    start: Optional[CertificateSet] = None,
    on_iteration: Optional[Callable[[IterationRecord], None]] = None,
) -> Tuple[CertificateSet, List[IterationRecord]]:
    """Alternate Step 1 / Step 2 until the cost settles or ``max_outer`` is hit.

    ``start`` resumes from a Step-2 checkpoint: its controller triple seeds
    the next Step 1 and its iteration index continues the count.
    ``on_iteration`` is called with each finished (or failed) record.
    """
    notify = on_iteration or (lambda rec: None)
    cfg = cfg or AlternateConfig(max_outer=spec.max_outer, cost_threshold=spec.threshold)
    n, t = spec.n, spec.t
    if start is not None:
        s1, p, pm1 = start.s1, list(start.p), list(start.pm1)
        k0 = start.iteration
    else:
        s1, p, pm1 = init if init is not None else initial_controller(spec)
        k0 = 0
    base = start or CertificateSet(
        V=_zero(n), B=[_zero(n)] * t, s1=s1, s2=_zero(n), s3=[_zero(n)] * t, s4=[_zero(n)] * t,
        p=list(p), pm1=list(pm1), iteration=0,
    )
    history: List[IterationRecord] = [IterationRecord(k0, start.cost if start else None, list(base.eps), snapshot=base)]
    best: Optional[CertificateSet] = start
    prev_cost = start.cost if start else None

    # sized from the initial controller, also when resuming, so a resumed run
    # solves exactly the programs the uninterrupted run would have solved
    caps = ControllerCaps.from_initial(spec, *(init if init is not None else initial_controller(spec)))
    for k in range(k0 + 1, k0 + cfg.max_outer + 1):
        r1 = step1(spec, s1, p, pm1, cfg.solver)
        rec = IterationRecord(k, r1.cost, [], step1_iters=r1.iterations, step1_time=r1.seconds, step1_status=r1.status)
        if r1.status != "Optimal":
            if best is None and k == k0 + 1:
                if r1.status == "Infeasible":
                    raise InitInfeasible(
                        "Step 1 is infeasible for the initial controller; consider raising the degrees "
                        "of V, B or the multipliers, or supplying a different initial controller",
                        r1.diagnosis,
                    )
                raise SolverFailure(f"Step 1 at iteration {k} ended with status {r1.status}")
            history.append(rec)
            notify(rec)
            log.warning("step 1 at iteration %d ended with %s; stopping", k, r1.status)
            break
        last = history[-1].snapshot
        if prev_cost is not None and r1.cost > prev_cost and last is not None and max(last.eps, default=-np.inf) <= EPS_TOL:
            log.info("iteration %d: Step 1 cost %.6g above %.6g; keeping the previous barriers", k, r1.cost, prev_cost)
            _keep_barriers(r1, last, prev_cost)
            rec.cost = r1.cost
        half = CertificateSet(
            V=r1.V, B=r1.B, s1=s1, s2=r1.s2, s3=r1.s3, s4=r1.s4, p=list(p), pm1=list(pm1),
            grams=dict(r1.grams), iteration=k, cost=r1.cost,
        )
        _checkpoint(cfg, spec, half, k, 1)

        r2 = step2(spec, r1.V, r1.B, s1, cfg.solver, caps, pm1)
        rec.step2_iters, rec.step2_time, rec.step2_status = r2.iterations, r2.seconds, r2.status
        if r2.status != "Optimal":
            history.append(rec)
            notify(rec)
            log.warning("step 2 at iteration %d ended with %s; stopping", k, r2.status)
            if best is None:
                raise SolverFailure(f"Step 2 at iteration {k} ended with status {r2.status}")
            break
        rec.eps = list(r2.eps)
        grams = {key: r1.grams[key] for key in r1.grams if key == "V" or key.startswith(("s4_", "contain_"))}
        grams.update(r2.grams)
        cert = CertificateSet(
            V=r1.V, B=r1.B, s1=r2.s1, s2=r2.s2, s3=r2.s3, s4=r1.s4, p=r2.p, pm1=r2.pm1,
            grams=grams, iteration=k, cost=r1.cost, eps=list(r2.eps),
        )
        rec.snapshot = cert
        history.append(rec)
        notify(rec)
        _checkpoint(cfg, spec, cert, k, 2)
        if max(r2.eps, default=-np.inf) <= EPS_TOL:
            best = cert
        else:
            log.warning("iteration %d: CBF slack %s above tolerance", k, r2.eps)
        s1, p, pm1 = r2.s1, r2.p, r2.pm1
        if prev_cost is not None and abs(r1.cost - prev_cost) / (1.0 + abs(r1.cost)) <= cfg.cost_threshold:
            break
        prev_cost = r1.cost

    return (best if best is not None else base), history
