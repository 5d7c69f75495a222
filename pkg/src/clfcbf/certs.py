"""Positivstellensatz constraint builders and the two alternating SOS programs.

Constraint polynomials (each asserted to be a sum of squares):

    CLF          -grad(V)' (s1 f + G p) - l^2 + s2 r
    CBF_i        -grad(B_i)' (s1 f + G p) - pm1_i B_i + s3_i r + eps_i
    contain_i    B_i - s4_i w_i
    s1 floor     s1 - eps_s1

Exactly one side of every product may carry decision variables; the
ParamPolynomial product raises :class:`BilinearError` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .poly import Monomial, Polynomial, evaluate_many, matvec, max_abs_coeff, monomial_mul, shift, transpose
from .soscomp import (
    AffineExpr,
    GramBlock,
    ParamPolynomial,
    SosProgram,
    as_param,
    dot,
    monomial_basis,
)

TRACE_WEIGHT = 1.0

UNKNOWNS = ("V", "B", "s1", "s2", "s3", "s4", "p", "pm1")


class SpecError(ValueError):
    """A problem description violates one of its structural assumptions."""


@dataclass(frozen=True)
class DegreeSpec:
    """Maximum total degree, optionally restricted to a set of allowed degrees."""

    maxdeg: int
    degree_set: Optional[Tuple[int, ...]] = None

    def degrees(self) -> List[int]:
        if self.degree_set is not None:
            return sorted(d for d in set(self.degree_set) if d <= self.maxdeg)
        return list(range(self.maxdeg + 1))

    @classmethod
    def parse(cls, text: str) -> "DegreeSpec":
        parts = [int(t) for t in text.replace("(", " ").replace(")", " ").replace(",", " ").split()]
        if not parts or min(parts) < 0:
            raise ValueError(f"bad degree entry {text!r}")
        if len(parts) == 1:
            return cls(parts[0])
        return cls(max(parts), tuple(sorted(set(parts))))

    def format(self) -> str:
        if self.degree_set is None:
            return str(self.maxdeg)
        return ",".join(str(d) for d in self.degree_set)


def default_degrees() -> Dict[str, DegreeSpec]:
    return {
        "V": DegreeSpec(4, (2, 4)),
        "B": DegreeSpec(4, (0, 2, 4)),
        "s1": DegreeSpec(2),
        "s2": DegreeSpec(6),
        "s3": DegreeSpec(6),
        "s4": DegreeSpec(3),
        "p": DegreeSpec(4),
        "pm1": DegreeSpec(2),
    }


@dataclass
class InitController:
    """Iteration-0 controller triple; ``None`` entries fall back to the defaults."""

    rho: float = 1.0
    pm1_const: float = 1.0
    s1: Optional[Polynomial] = None
    p: Optional[List[Polynomial]] = None
    pm1: Optional[List[Polynomial]] = None


@dataclass
class ProblemSpec:
    varnames: List[str]
    f: List[Polynomial]
    G: List[List[Polynomial]]
    w: List[Polynomial]
    r: Polynomial
    centers: List[Tuple[np.ndarray, float]]
    l: Optional[Polynomial] = None
    xstar: Optional[np.ndarray] = None
    eps_s1: float = 1e-3
    degrees: Dict[str, DegreeSpec] = field(default_factory=default_degrees)
    max_outer: int = 30
    threshold: float = 1e-3
    seed: int = 0
    eps_floor: float = 1.0
    cap_factor: float = 1e3
    init: InitController = field(default_factory=InitController)

    def __post_init__(self):
        n = len(self.varnames)
        if self.xstar is None:
            self.xstar = np.zeros(n)
        self.xstar = np.asarray(self.xstar, dtype=float)
        if self.l is None:
            self.l = sum(
                ((Polynomial.variable(n, j) - float(self.xstar[j])) ** 2 for j in range(n)),
                Polynomial.zero(n),
            )
        self.centers = [(np.asarray(c, dtype=float), float(b)) for c, b in self.centers]
        merged = default_degrees()
        merged.update(self.degrees)
        self.degrees = merged

    @property
    def n(self) -> int:
        return len(self.varnames)

    @property
    def m(self) -> int:
        return len(self.G[0]) if self.G else 0

    @property
    def t(self) -> int:
        return len(self.w)

    def field(self) -> Tuple[List[Polynomial], List[List[Polynomial]]]:
        return self.f, self.G

    def validate(self, samples: int = 1000, seed: Optional[int] = None) -> List[str]:
        """Check structural assumptions; raise SpecError, or return soft warnings.

        Containment of the allowable set in the operating region is only a
        warning: certificates then hold on the operating region alone.
        """
        n, m = self.n, self.m
        if n < 1:
            raise SpecError("at least one state variable is required")
        if m < 1:
            raise SpecError("at least one input is required")
        if len(self.f) != n or len(self.G) != n or any(len(row) != m for row in self.G):
            raise SpecError("f must have n entries and G must be n x m")
        polys = list(self.f) + [g for row in self.G for g in row] + list(self.w) + [self.r, self.l]
        if any(p.nvars != n for p in polys):
            raise SpecError("all polynomials must use the declared variables")
        if len(self.centers) != self.t:
            raise SpecError(f"expected {self.t} center points, got {len(self.centers)}")
        if any(len(c) != n for c, _ in self.centers):
            raise SpecError("center points must have n coordinates")
        if len(self.xstar) != n or not np.all(np.isfinite(self.xstar)):
            raise SpecError("equilibrium must be a finite point with n coordinates")
        if self.eps_s1 <= 0:
            raise SpecError("eps_s1 must be positive")
        if self.eps_floor <= 0 or self.cap_factor < 1:
            raise SpecError("eps_floor must be positive and cap_factor at least 1")
        if self.max_outer < 0 or self.threshold <= 0:
            raise SpecError("max_outer must be >= 0 and threshold > 0")

        rng = np.random.default_rng(self.seed if seed is None else seed)
        if abs(self.l(self.xstar)) > 1e-12:
            raise SpecError("l must vanish at the equilibrium")
        dirs = rng.standard_normal((samples, n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for radius in (1e-2, 1e-1, 1.0):
            if np.any(evaluate_many(self.l, self.xstar + radius * dirs) <= 0):
                raise SpecError("l is not positive away from the equilibrium")
        for name, poly in [(f"w{i + 1}", w) for i, w in enumerate(self.w)] + [("r", self.r)]:
            if not top_form_positive(poly, dirs):
                raise SpecError(f"sublevel set of {name} is not bounded (top-degree form not positive)")
        warnings: List[str] = []
        if self.t:
            lo, hi = allowable_box(self)
            X = rng.uniform(lo, hi, size=(20 * samples, n))
            inside = np.all([evaluate_many(w, X) <= 0 for w in self.w], axis=0)
            rv = evaluate_many(self.r, X[inside])
            if np.any(rv > 0):
                warnings.append(
                    f"allowable set leaves the operating region at {int(np.sum(rv > 0))} of "
                    f"{int(inside.sum())} samples (max r = {rv.max():.3g})"
                )
        return warnings


def top_form_positive(p: Polynomial, dirs: np.ndarray) -> bool:
    d = p.degree
    if d <= 0 or d % 2:
        return False
    top = Polynomial(p.nvars, {mm: c for mm, c in p.terms.items() if sum(mm) == d})
    return bool(np.all(evaluate_many(top, dirs) > 0))


def sublevel_box(r: Polynomial, grid: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box containing {r <= 0}.

    Quadratic r gets the exact box of its ellipsoid; otherwise a radial search
    along sampled directions is widened by 10%.
    """
    n = r.nvars
    if r.degree == 2:
        H = np.zeros((n, n))
        g = np.zeros(n)
        c = r.coeff((0,) * n)
        for mm, v in r.terms.items():
            idx = [i for i, e in enumerate(mm) for _ in range(e)]
            if len(idx) == 2:
                i, j = idx
                H[i, j] += v / 2 if i != j else v
                H[j, i] += v / 2 if i != j else 0.0
            elif len(idx) == 1:
                g[idx[0]] += v
        Hinv = np.linalg.inv(H)
        center = -0.5 * Hinv @ g
        level = center @ H @ center - c
        half = np.sqrt(np.maximum(level * np.diag(Hinv), 0.0))
        return center - half, center + half
    rng = np.random.default_rng(0)
    dirs = rng.standard_normal((4000, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.geomspace(1e-3, 1e3, 400)
    reach = np.zeros(n)
    for rad in radii:
        pts = rad * dirs
        inside = evaluate_many(r, pts) <= 0
        if np.any(inside):
            reach = np.maximum(reach, np.abs(pts[inside]).max(axis=0))
    return -1.1 * reach, 1.1 * reach


def allowable_box(spec: "ProblemSpec") -> Tuple[np.ndarray, np.ndarray]:
    """Intersection of the boxes around each {w_i <= 0}."""
    boxes = [sublevel_box(w) for w in spec.w]
    return np.max([b[0] for b in boxes], axis=0), np.min([b[1] for b in boxes], axis=0)


# ---------------------------------------------------------------------------
# certificate state


@dataclass
class CertificateSet:
    V: Polynomial
    B: List[Polynomial]
    s1: Polynomial
    s2: Polynomial
    s3: List[Polynomial]
    s4: List[Polynomial]
    p: List[Polynomial]
    pm1: List[Polynomial]
    grams: Dict[str, Tuple[List[Monomial], np.ndarray]] = field(default_factory=dict)
    iteration: int = 0
    cost: Optional[float] = None
    eps: List[float] = field(default_factory=list)

    def copy(self, **changes) -> "CertificateSet":
        return replace(self, grams=dict(self.grams), **changes)


def initial_controller(spec: ProblemSpec) -> Tuple[Polynomial, List[Polynomial], List[Polynomial]]:
    """(s1, p, pm1) for iteration 0: s1 = 1, p = -rho G'(x - x*), pm1_i = const."""
    n = spec.n
    init = spec.init
    s1 = init.s1 if init.s1 is not None else Polynomial.constant(n, 1.0)
    if init.p is not None:
        p = list(init.p)
    else:
        dx = [Polynomial.variable(n, j) - float(spec.xstar[j]) for j in range(n)]
        p = [q.scale(-init.rho) for q in matvec(transpose(spec.G), dx)]
    if init.pm1 is not None:
        pm1 = list(init.pm1)
    else:
        pm1 = [Polynomial.constant(n, init.pm1_const) for _ in range(spec.t)]
    return s1, p, pm1


# ---------------------------------------------------------------------------
# constraint polynomials


def _field_terms(spec_f, spec_G, s1, p) -> List[ParamPolynomial]:
    """Components of s1 f + G p."""
    out = []
    for fi, Gi in zip(spec_f, spec_G):
        out.append(as_param(s1) * as_param(fi) + dot(Gi, p))
    return out


def clf_constraint(V, s1, p, f, G, l: Polynomial, s2=None, r: Optional[Polynomial] = None) -> ParamPolynomial:
    """-grad(V)'(s1 f + G p) - l^2 [+ s2 r]."""
    Vp = as_param(V)
    expr = -dot(Vp.gradient(), _field_terms(f, G, s1, p)) - as_param(l * l)
    if s2 is not None:
        expr = expr + as_param(s2) * as_param(r)
    return expr


def cbf_constraint(
    B, s1, p, pm1, f, G, s3=None, r: Optional[Polynomial] = None, eps=None
) -> ParamPolynomial:
    """-grad(B)'(s1 f + G p) - pm1 B [+ s3 r] [+ eps]."""
    Bp = as_param(B)
    expr = -dot(Bp.gradient(), _field_terms(f, G, s1, p)) - as_param(pm1) * Bp
    if s3 is not None:
        expr = expr + as_param(s3) * as_param(r)
    if eps is not None:
        expr = expr + eps
    return expr


def containment_constraint(B, s4, w: Polynomial) -> ParamPolynomial:
    return as_param(B) - as_param(s4) * as_param(w)


def s1_positivity(s1, eps_s1: float) -> ParamPolynomial:
    return as_param(s1) - eps_s1


# ---------------------------------------------------------------------------
# bases and unknowns


def sos_half_basis(n: int, deg: DegreeSpec, min_half: int = 0) -> List[Monomial]:
    """Half basis for an SOS unknown of the given degree pattern."""
    degs = deg.degrees()
    lo = max(min(degs) // 2, min_half)
    hi = max(degs) // 2
    return monomial_basis(n, hi, degree_set=range(lo, hi + 1))


def trace_expr(blocks: Sequence[GramBlock]) -> Dict[int, float]:
    acc: Dict[int, float] = {}
    for g in blocks:
        for i in range(g.size):
            acc[int(g.matvar[i, i])] = acc.get(int(g.matvar[i, i]), 0.0) + 1.0
    return acc


def gram_trace(Q: np.ndarray) -> float:
    return float(np.trace(Q))


def diagonal_weights(basis: Sequence[Monomial]) -> Dict[Monomial, float]:
    """Trace weights of the diagonal-first Gram split.

    The coefficient of a monomial z^2 with z in the basis is placed on the
    diagonal entry Q_zz; all other coefficients go off-diagonal. The trace is
    then the sum of those square-monomial coefficients.
    """
    return {monomial_mul(z, z): 1.0 for z in basis}


def cost_c1(B_local: Sequence[ParamPolynomial], half_bases: Sequence[Sequence[Monomial]]) -> AffineExpr:
    """Sum of Gram traces of the B_i, written in their center-shifted coordinates."""
    acc: Dict[int, float] = {}
    for Bl, basis in zip(B_local, half_bases):
        for mono, wgt in diagonal_weights(basis).items():
            for k, v in Bl.terms.get(mono, {}).items():
                acc[k] = acc.get(k, 0.0) + wgt * v
    return AffineExpr.from_dict(acc)


def cost_c2(B: Sequence[ParamPolynomial], centers: Sequence[Tuple[np.ndarray, float]]) -> List[AffineExpr]:
    """Residuals B_i(x_c,i) - B_c,i; the cost is the sum of their squares."""
    out = []
    for Bi, (xc, bc) in zip(B, centers):
        e = Bi.at(xc)
        out.append(AffineExpr(e.constant - bc, dict(e.linear)))
    return out


def c1_value(B: Sequence[Polynomial], spec: ProblemSpec) -> float:
    total = 0.0
    for Bi, (xc, _) in zip(B, spec.centers):
        local = shift(Bi, -xc)
        basis = b_half_basis(spec)
        total += sum(w * local.coeff(m) for m, w in diagonal_weights(basis).items())
    return total


def c2_value(B: Sequence[Polynomial], spec: ProblemSpec) -> float:
    return float(sum((Bi(xc) - bc) ** 2 for Bi, (xc, bc) in zip(B, spec.centers)))


def b_half_basis(spec: ProblemSpec) -> List[Monomial]:
    degs = spec.degrees["B"].degrees()
    lo, hi = min(degs) // 2, (max(degs) + 1) // 2
    return monomial_basis(spec.n, hi, degree_set=range(lo, hi + 1))


def _constraint_half_basis(pp: ParamPolynomial) -> List[Monomial]:
    degs = [sum(m) for m in pp.terms] or [0]
    lo, hi = min(degs) // 2, (max(degs) + 1) // 2
    return monomial_basis(pp.nvars, hi, degree_set=range(lo, hi + 1))


# ---------------------------------------------------------------------------
# programs


@dataclass(frozen=True)
class ControllerCaps:
    """Fixed caps on the Step-2 unknowns.

    Without them the controller triple has unbounded optimal faces (s1, p and
    pm1 can grow together), which stalls interior-point solvers.  The caps are
    set once from the initial controller, so every Step-2 solution, and
    therefore the controller handed to the next Step 2, satisfies them.
    """

    p_coef: float
    pm1_coef: float
    s1_trace: float

    @staticmethod
    def from_initial(spec: "ProblemSpec", s1: Polynomial, p, pm1) -> "ControllerCaps":
        f = spec.cap_factor
        big = lambda polys: max((max_abs_coeff(q) for q in polys), default=0.0)
        return ControllerCaps(f * (1.0 + big(p)), f * (1.0 + big(pm1)), f * (1.0 + big([s1])))


@dataclass
class Step1Program:
    prog: SosProgram
    V: ParamPolynomial
    B: List[ParamPolynomial]
    s2: ParamPolynomial
    s3: List[ParamPolynomial]
    s4: List[ParamPolynomial]
    blocks: Dict[str, GramBlock]
    cost_linear: AffineExpr
    cost_residuals: List[AffineExpr]


@dataclass
class Step2Program:
    prog: SosProgram
    s1: ParamPolynomial
    s2: ParamPolynomial
    s3: List[ParamPolynomial]
    p: List[ParamPolynomial]
    pm1: List[ParamPolynomial]
    eps: List[ParamPolynomial]
    blocks: Dict[str, GramBlock]


def build_step1_program(
    spec: ProblemSpec,
    s1: Polynomial,
    p: Sequence[Polynomial],
    pm1: Sequence[Polynomial],
) -> Step1Program:
    n, t = spec.n, spec.t
    deg = spec.degrees
    prog = SosProgram(n)
    blocks: Dict[str, GramBlock] = {}

    # V: SOS in y = x - x*, no constant term so V(x*) = 0
    V_local, blocks["V"] = prog.new_sos_var(sos_half_basis(n, deg["V"], min_half=1), "V", deg["V"].degrees())
    V = V_local.shift(spec.xstar)

    B_local, B = [], []
    for i, (xc, _) in enumerate(spec.centers):
        Bl = prog.new_poly_var(monomial_basis(n, deg["B"].maxdeg, degree_set=deg["B"].degrees()), f"B{i + 1}")
        B_local.append(Bl)
        B.append(Bl.shift(xc))

    s2, blocks["s2"] = prog.new_sos_var(sos_half_basis(n, deg["s2"]), "s2")
    s3, s4 = [], []
    for i in range(t):
        q, blocks[f"s3_{i + 1}"] = prog.new_sos_var(sos_half_basis(n, deg["s3"]), f"s3_{i + 1}")
        s3.append(q)
    for i in range(t):
        q, blocks[f"s4_{i + 1}"] = prog.new_sos_var(sos_half_basis(n, deg["s4"]), f"s4_{i + 1}")
        s4.append(q)

    clf = clf_constraint(V, s1, p, spec.f, spec.G, spec.l, s2, spec.r)
    blocks["clf"] = prog.assert_sos(clf, _constraint_half_basis(clf), "clf")
    for i in range(t):
        cbf = cbf_constraint(B[i], s1, p, pm1[i], spec.f, spec.G, s3[i], spec.r)
        blocks[f"cbf_{i + 1}"] = prog.assert_sos(cbf, _constraint_half_basis(cbf), f"cbf_{i + 1}")
    for i in range(t):
        con = containment_constraint(B[i], s4[i], spec.w[i])
        blocks[f"contain_{i + 1}"] = prog.assert_sos(con, _constraint_half_basis(con), f"contain_{i + 1}")

    c1 = cost_c1(B_local, [b_half_basis(spec)] * t)
    c2 = cost_c2(B, spec.centers)
    prog.add_linear_cost(c1)
    # (V, s2) never meet B or the cost, so this only fixes the scale of V
    prog.add_linear_cost({k: TRACE_WEIGHT * v for k, v in trace_expr([blocks["V"], blocks["s2"], blocks["clf"]]).items()})
    for i, e in enumerate(c2):
        prog.add_squared_cost(e, f"center_{i + 1}")
    return Step1Program(prog, V, B, s2, s3, s4, blocks, c1, c2)


def build_step2_program(
    spec: ProblemSpec,
    V: Polynomial,
    B: Sequence[Polynomial],
    s1_prev: Optional[Polynomial] = None,
    caps: Optional[ControllerCaps] = None,
    pm1_prev: Optional[Sequence[Polynomial]] = None,
) -> Step2Program:
    """Controller recovery with CBF slacks.

    s1 is normalized to the value s1_prev had at x*, every slack is bounded
    below by ``-spec.eps_floor`` and, when given, ``caps`` bounds p, pm1 and
    the Gram trace of s1.

    A barrier that is identically zero makes its CBF condition vacuous; it is
    left out, with pm1_i kept at ``pm1_prev[i]`` (zero if not given) and
    s3_i = eps_i = 0.
    """
    n, m, t = spec.n, spec.m, spec.t
    deg = spec.degrees
    prog = SosProgram(n)
    blocks: Dict[str, GramBlock] = {}

    s1_free, blocks["s1"] = prog.new_sos_var(sos_half_basis(n, deg["s1"]), "s1")
    s1 = s1_free + spec.eps_s1
    s1_anchor = 1.0 if s1_prev is None else float(s1_prev(spec.xstar))
    e = s1.at(spec.xstar)
    prog.add_equality(AffineExpr(e.constant - s1_anchor, dict(e.linear)), "s1.normalize")

    p = [prog.new_poly_var(monomial_basis(n, deg["p"].maxdeg, degree_set=deg["p"].degrees()), f"p{j + 1}") for j in range(m)]
    active = [bool(b.terms) for b in B]
    zero = ParamPolynomial.from_poly(Polynomial.zero(n))
    pm1, s3, eps = [], [], []
    for i in range(t):
        if not active[i]:
            pm1.append(ParamPolynomial.from_poly(pm1_prev[i] if pm1_prev is not None else Polynomial.zero(n)))
            continue
        pm1.append(prog.new_poly_var(monomial_basis(n, deg["pm1"].maxdeg, degree_set=deg["pm1"].degrees()), f"pm1_{i + 1}"))
    s2, blocks["s2"] = prog.new_sos_var(sos_half_basis(n, deg["s2"]), "s2")
    for i in range(t):
        if active[i]:
            q, blocks[f"s3_{i + 1}"] = prog.new_sos_var(sos_half_basis(n, deg["s3"]), f"s3_{i + 1}")
        else:
            q = zero
        s3.append(q)
    for i in range(t):
        if active[i]:
            # eps_i = -floor + slack, slack >= 0 as a 1x1 Gram block
            slack, blocks[f"epsfloor_{i + 1}"] = prog.new_sos_var([(0,) * n], f"eps_{i + 1}")
            eps.append(slack - spec.eps_floor)
        else:
            eps.append(zero)

    clf = clf_constraint(V, s1, p, spec.f, spec.G, spec.l, s2, spec.r)
    blocks["clf"] = prog.assert_sos(clf, _constraint_half_basis(clf), "clf")
    for i in range(t):
        if active[i]:
            cbf = cbf_constraint(B[i], s1, p, pm1[i], spec.f, spec.G, s3[i], spec.r, eps[i])
            blocks[f"cbf_{i + 1}"] = prog.assert_sos(cbf, _constraint_half_basis(cbf), f"cbf_{i + 1}")

    if caps is not None:
        prog.add_trace_bound([blocks["s1"]], caps.s1_trace, "cap.s1")
        for j, q in enumerate(p):
            prog.add_box_bound(q, caps.p_coef, f"cap.p{j + 1}")
        for i, q in enumerate(pm1):
            if active[i]:
                prog.add_box_bound(q, caps.pm1_coef, f"cap.pm1_{i + 1}")
    for i, e_i in enumerate(eps):
        if active[i]:
            prog.add_linear_cost(e_i.at([0.0] * n))
    return Step2Program(prog, s1, s2, s3, p, pm1, eps, blocks)


def certificate_targets(cert: CertificateSet, spec: ProblemSpec) -> Dict[str, Polynomial]:
    """Polynomial each stored Gram matrix must reproduce, keyed like ``cert.grams``."""
    out: Dict[str, Polynomial] = {
        "V": shift(cert.V, -spec.xstar),
        "s1": cert.s1 - spec.eps_s1,
        "s2": cert.s2,
        "clf": clf_constraint(cert.V, cert.s1, cert.p, spec.f, spec.G, spec.l, cert.s2, spec.r).substitute(np.zeros(0)),
    }
    for i in range(spec.t):
        k = i + 1
        eps = cert.eps[i] if i < len(cert.eps) else 0.0
        out[f"s3_{k}"] = cert.s3[i]
        out[f"s4_{k}"] = cert.s4[i]
        out[f"cbf_{k}"] = cbf_constraint(
            cert.B[i], cert.s1, cert.p, cert.pm1[i], spec.f, spec.G, cert.s3[i], spec.r, eps
        ).substitute(np.zeros(0))
        out[f"contain_{k}"] = containment_constraint(cert.B[i], cert.s4[i], spec.w[i]).substitute(np.zeros(0))
        out[f"epsfloor_{k}"] = Polynomial.constant(spec.n, eps + spec.eps_floor)
    return out
