"""SOS programs: polynomials affine in decision variables, Gram blocks, compilation to SDP.

A decision variable is an integer index into the program's variable vector.
Affine expressions are stored as ``{var: coef}`` dicts where the key ``-1``
holds the constant part.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .poly import (
    Monomial,
    Polynomial,
    monomial_key,
    monomial_mul,
    monomials_of_degree,
)
from .sdp import SdpOptions, SdpProblem, SdpSolution, solve

CONST = -1


class BilinearError(ValueError):
    """Raised when a product would multiply decision variables together."""


class BasisError(ValueError):
    def __init__(self, label: str, monomials: Sequence[Monomial]):
        self.monomials = list(monomials)
        super().__init__(f"{label}: half basis cannot produce monomials {self.monomials}")


class CompileError(ValueError):
    def __init__(self, label: str, residual: float):
        self.label = label
        self.residual = residual
        super().__init__(f"constant equality violated in {label}: residual {residual:g}")


# ---------------------------------------------------------------------------
# affine expressions


def _aff_add(a: Dict[int, float], b: Dict[int, float], scale: float = 1.0) -> Dict[int, float]:
    out = dict(a)
    for k, v in b.items():
        s = out.get(k, 0.0) + scale * v
        if s == 0.0:
            out.pop(k, None)
        else:
            out[k] = s
    return out


def _aff_scale(a: Dict[int, float], s: float) -> Dict[int, float]:
    if s == 0.0:
        return {}
    return {k: s * v for k, v in a.items()}


def _aff_has_vars(a: Dict[int, float]) -> bool:
    return any(k != CONST for k in a)


@dataclass(frozen=True)
class AffineExpr:
    constant: float = 0.0
    linear: Dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Dict[int, float]) -> "AffineExpr":
        return cls(d.get(CONST, 0.0), {k: v for k, v in d.items() if k != CONST and v != 0.0})

    def to_dict(self) -> Dict[int, float]:
        d = dict(self.linear)
        if self.constant != 0.0:
            d[CONST] = self.constant
        return d

    def value(self, v: np.ndarray) -> float:
        return self.constant + sum(c * v[k] for k, c in self.linear.items())


# ---------------------------------------------------------------------------
# parameterized polynomials


class ParamPolynomial:
    """Polynomial in x whose coefficients are affine in the decision variables."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Optional[Dict[Monomial, Dict[int, float]]] = None):
        self.nvars = nvars
        self.terms: Dict[Monomial, Dict[int, float]] = {}
        if terms:
            for m, a in terms.items():
                a = {k: float(v) for k, v in a.items() if v != 0.0}
                if a:
                    self.terms[tuple(m)] = a

    @classmethod
    def from_poly(cls, p: Polynomial) -> "ParamPolynomial":
        return cls._raw(p.nvars, {m: {CONST: c} for m, c in p.terms.items()})

    @classmethod
    def _raw(cls, nvars, terms):
        pp = object.__new__(cls)
        pp.nvars = nvars
        pp.terms = terms
        return pp

    def variables(self) -> set:
        out = set()
        for a in self.terms.values():
            out.update(k for k in a if k != CONST)
        return out

    def has_vars(self) -> bool:
        return any(_aff_has_vars(a) for a in self.terms.values())

    @property
    def degree(self) -> int:
        return max((sum(m) for m in self.terms), default=-1)

    def monomials(self) -> List[Monomial]:
        return sorted(self.terms, key=monomial_key)

    def coeff(self, m: Monomial) -> AffineExpr:
        return AffineExpr.from_dict(self.terms.get(tuple(m), {}))

    def substitute(self, v: np.ndarray) -> Polynomial:
        out = {}
        for m, a in self.terms.items():
            val = 0.0
            for k, c in a.items():
                val += c if k == CONST else c * v[k]
            if val != 0.0:
                out[m] = float(val)
        return Polynomial._raw(self.nvars, out)

    def at(self, x: Sequence[float]) -> AffineExpr:
        """Evaluate in x, leaving an affine expression in the decision variables."""
        acc: Dict[int, float] = {}
        x = [float(t) for t in x]
        for m, a in self.terms.items():
            w = 1.0
            for xi, e in zip(x, m):
                if e:
                    w *= xi**e
            acc = _aff_add(acc, a, w)
        return AffineExpr.from_dict(acc)

    # arithmetic -------------------------------------------------------------
    def _lift(self, other) -> "ParamPolynomial":
        if isinstance(other, ParamPolynomial):
            if other.nvars != self.nvars:
                raise ValueError("nvars mismatch")
            return other
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("nvars mismatch")
            return ParamPolynomial.from_poly(other)
        if isinstance(other, (int, float, np.floating, np.integer)):
            return ParamPolynomial.from_poly(Polynomial.constant(self.nvars, float(other)))
        return NotImplemented

    def __add__(self, other):
        other = self._lift(other)
        if other is NotImplemented:
            return NotImplemented
        terms = dict(self.terms)
        for m, a in other.terms.items():
            s = _aff_add(terms.get(m, {}), a)
            if s:
                terms[m] = s
            else:
                terms.pop(m, None)
        return ParamPolynomial._raw(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self):
        return ParamPolynomial._raw(self.nvars, {m: _aff_scale(a, -1.0) for m, a in self.terms.items()})

    def __sub__(self, other):
        other = self._lift(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        other = self._lift(other)
        if other is NotImplemented:
            return NotImplemented
        return other + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            s = float(other)
            if s == 0.0:
                return ParamPolynomial(self.nvars)
            return ParamPolynomial._raw(self.nvars, {m: _aff_scale(a, s) for m, a in self.terms.items()})
        other = self._lift(other)
        if other is NotImplemented:
            return NotImplemented
        if self.has_vars() and other.has_vars():
            raise BilinearError("product of two polynomials that both contain decision variables")
        if other.has_vars():
            fixed, param = self, other
        else:
            fixed, param = other, self
        terms: Dict[Monomial, Dict[int, float]] = {}
        for a, ca in fixed.terms.items():
            c = ca.get(CONST, 0.0)
            if c == 0.0:
                continue
            for b, cb in param.terms.items():
                m = monomial_mul(a, b)
                acc = terms.get(m)
                if acc is None:
                    terms[m] = _aff_scale(cb, c)
                else:
                    for k, v in cb.items():
                        acc[k] = acc.get(k, 0.0) + c * v
        for m in list(terms):
            a = {k: v for k, v in terms[m].items() if v != 0.0}
            if a:
                terms[m] = a
            else:
                del terms[m]
        return ParamPolynomial._raw(self.nvars, terms)

    __rmul__ = __mul__

    def derivative(self, i: int) -> "ParamPolynomial":
        terms = {}
        for m, a in self.terms.items():
            e = m[i]
            if e:
                d = list(m)
                d[i] = e - 1
                terms[tuple(d)] = _aff_scale(a, float(e))
        return ParamPolynomial._raw(self.nvars, terms)

    def gradient(self) -> List["ParamPolynomial"]:
        return [self.derivative(i) for i in range(self.nvars)]

    def shift(self, c: Sequence[float]) -> "ParamPolynomial":
        """q(x) = self(x - c)."""
        from .poly import shift as poly_shift

        c = [float(t) for t in c]
        if all(t == 0.0 for t in c):
            return ParamPolynomial._raw(self.nvars, dict(self.terms))
        out = ParamPolynomial(self.nvars)
        for m, a in self.terms.items():
            basis = poly_shift(Polynomial(self.nvars, {m: 1.0}), c)
            out = out + ParamPolynomial._raw(
                self.nvars, {bm: _aff_scale(a, bc) for bm, bc in basis.terms.items()}
            )
        return out


def as_param(p) -> ParamPolynomial:
    if isinstance(p, ParamPolynomial):
        return p
    return ParamPolynomial.from_poly(p)


def dot(a: Sequence, b: Sequence) -> ParamPolynomial:
    """Inner product of two equal-length vectors of (parameterized) polynomials."""
    if len(a) != len(b) or not a:
        raise ValueError("dot needs two nonempty vectors of equal length")
    out = as_param(a[0]) * as_param(b[0])
    for u, v in zip(a[1:], b[1:]):
        out = out + as_param(u) * as_param(v)
    return out


# ---------------------------------------------------------------------------
# monomial bases


def monomial_basis(
    nvars: int,
    maxdeg: int,
    parity: Optional[str] = None,
    degree_set: Optional[Iterable[int]] = None,
) -> List[Monomial]:
    """Monomials of total degree <= maxdeg, graded-lex sorted.

    ``parity`` is ``"even"`` or ``"odd"``; ``degree_set`` restricts total degrees
    (and overrides ``maxdeg`` when given alone with ``maxdeg=-1``).
    """
    if degree_set is not None:
        degrees = sorted(set(int(d) for d in degree_set))
        if maxdeg >= 0:
            degrees = [d for d in degrees if d <= maxdeg]
    else:
        if maxdeg < 0:
            raise ValueError("maxdeg must be >= 0")
        degrees = list(range(maxdeg + 1))
    if parity == "even":
        degrees = [d for d in degrees if d % 2 == 0]
    elif parity == "odd":
        degrees = [d for d in degrees if d % 2 == 1]
    elif parity is not None:
        raise ValueError(f"unknown parity {parity!r}")
    out: List[Monomial] = []
    for d in degrees:
        out.extend(monomials_of_degree(nvars, d))
    return out


def default_half_basis(pp: ParamPolynomial) -> List[Monomial]:
    """All monomials with total degree in [floor(mindeg/2), ceil(maxdeg/2)]."""
    if not pp.terms:
        return [(0,) * pp.nvars]
    degs = [sum(m) for m in pp.terms]
    lo, hi = min(degs) // 2, (max(degs) + 1) // 2
    return monomial_basis(pp.nvars, hi, degree_set=range(lo, hi + 1))


# ---------------------------------------------------------------------------
# programs


@dataclass
class GramBlock:
    basis: List[Monomial]
    matvar: np.ndarray  # symmetric int matrix of variable ids
    label: str
    polynomial: ParamPolynomial
    aux: bool = False  # bookkeeping block (slack of a bound), left out of size statistics

    @property
    def size(self) -> int:
        return len(self.basis)

    def value(self, v: np.ndarray) -> np.ndarray:
        return v[self.matvar]


@dataclass
class UnknownPoly:
    name: str
    nterms: int


class SosProgram:
    """Mutable builder for an SOS program over polynomials in ``nvars`` variables."""

    def __init__(self, nvars: int):
        self.nvars = nvars
        self.nvar = 0
        self._var_gram: Dict[int, Tuple[int, int, int]] = {}
        self.grams: List[GramBlock] = []
        self.equalities: List[Tuple[Dict[int, float], str]] = []
        self.objective: Dict[int, float] = {}
        self.squares: List[Tuple[Dict[int, float], str]] = []
        self.unknowns: List[UnknownPoly] = []

    def _fresh(self, k: int) -> np.ndarray:
        ids = np.arange(self.nvar, self.nvar + k)
        self.nvar += k
        return ids

    # variables ------------------------------------------------------------
    def new_scalar(self, name: str = "t") -> ParamPolynomial:
        (i,) = self._fresh(1)
        self.unknowns.append(UnknownPoly(name, 1))
        return ParamPolynomial._raw(self.nvars, {(0,) * self.nvars: {int(i): 1.0}})

    def new_poly_var(self, basis: Sequence[Monomial], name: str = "p") -> ParamPolynomial:
        ids = self._fresh(len(basis))
        self.unknowns.append(UnknownPoly(name, len(basis)))
        return ParamPolynomial._raw(self.nvars, {tuple(m): {int(i): 1.0} for m, i in zip(basis, ids)})

    def _gram(self, half_basis: Sequence[Monomial], label: str) -> Tuple[np.ndarray, ParamPolynomial]:
        k = len(half_basis)
        if k == 0:
            raise ValueError("half basis must be nonempty")
        block = len(self.grams)
        mat = np.zeros((k, k), dtype=int)
        for i in range(k):
            for j in range(i, k):
                (v,) = self._fresh(1)
                mat[i, j] = mat[j, i] = v
                self._var_gram[int(v)] = (block, i, j)
        terms: Dict[Monomial, Dict[int, float]] = {}
        for i in range(k):
            for j in range(i, k):
                m = monomial_mul(half_basis[i], half_basis[j])
                terms.setdefault(m, {})[int(mat[i, j])] = 1.0 if i == j else 2.0
        pp = ParamPolynomial._raw(self.nvars, terms)
        self.grams.append(GramBlock([tuple(b) for b in half_basis], mat, label, pp))
        return mat, pp

    def new_sos_var(
        self,
        half_basis: Sequence[Monomial],
        name: str = "s",
        degrees: Optional[Iterable[int]] = None,
    ) -> Tuple[ParamPolynomial, GramBlock]:
        """SOS unknown Z'QZ; ``degrees`` pins coefficients of other total degrees to zero."""
        _, pp = self._gram(half_basis, name)
        if degrees is not None:
            allowed = set(degrees)
            extra = {m: dict(a) for m, a in pp.terms.items() if sum(m) not in allowed}
            if extra:
                self.assert_eq_zero(ParamPolynomial._raw(self.nvars, extra), f"{name}.degree")
            pp = ParamPolynomial._raw(self.nvars, {m: a for m, a in pp.terms.items() if sum(m) in allowed})
        self.unknowns.append(UnknownPoly(name, len(pp.terms)))
        return pp, self.grams[-1]

    def new_nonneg(self, label: str = "slack") -> ParamPolynomial:
        """Scalar decision variable constrained to be >= 0 (a 1x1 auxiliary block)."""
        _, pp = self._gram([(0,) * self.nvars], label)
        self.grams[-1].aux = True
        return pp

    def add_trace_bound(self, blocks: Sequence[GramBlock], bound: float, label: str = "trace") -> None:
        """sum of trace(Q) over ``blocks`` <= bound (row scaled by 1/bound)."""
        w = 1.0 / float(bound)
        acc: Dict[int, float] = {}
        for g in blocks:
            for i in range(g.size):
                acc[int(g.matvar[i, i])] = acc.get(int(g.matvar[i, i]), 0.0) + w
        slack = self.new_nonneg(f"{label}.slack")
        acc = _aff_add(acc, slack.terms[(0,) * self.nvars])
        acc[CONST] = -1.0
        self.equalities.append((acc, label))

    def add_box_bound(self, pp: ParamPolynomial, bound: float, label: str = "box") -> None:
        """|coefficient| <= bound for every coefficient of ``pp``."""
        w = 1.0 / float(bound)
        key = (0,) * self.nvars
        for m in pp.monomials():
            expr = _aff_scale(pp.terms[m], w)
            lo = self.new_nonneg(f"{label}.lo")
            hi = self.new_nonneg(f"{label}.hi")
            # coef/bound + 1 = lo,  1 - coef/bound = hi
            self.equalities.append((_aff_add(_aff_add(dict(expr), {CONST: 1.0}), lo.terms[key], -1.0), f"{label}@{m}.lo"))
            self.equalities.append((_aff_add(_aff_add(_aff_scale(expr, -1.0), {CONST: 1.0}), hi.terms[key], -1.0), f"{label}@{m}.hi"))

    def l1_norm(self, pp: ParamPolynomial, label: str = "l1") -> Dict[int, float]:
        """Affine expression (as a dict) that upper-bounds, and at a minimum equals, the L1 norm of the coefficients."""
        key = (0,) * self.nvars
        out: Dict[int, float] = {}
        for m in pp.monomials():
            pos = self.new_nonneg(f"{label}.pos")
            neg = self.new_nonneg(f"{label}.neg")
            # coef = pos - neg
            row = _aff_add(_aff_add(dict(pp.terms[m]), pos.terms[key], -1.0), neg.terms[key])
            self.equalities.append((row, f"{label}@{m}"))
            out = _aff_add(_aff_add(out, pos.terms[key]), neg.terms[key])
        return out

    def assert_sos(
        self, pp, half_basis: Optional[Sequence[Monomial]] = None, label: str = "sos"
    ) -> GramBlock:
        pp = as_param(pp)
        if half_basis is None:
            half_basis = default_half_basis(pp)
        half_basis = [tuple(b) for b in half_basis]
        products = set(monomial_mul(a, b) for a in half_basis for b in half_basis)
        missing = [m for m in pp.monomials() if m not in products]
        if missing:
            raise BasisError(label, missing)
        _, gram_pp = self._gram(half_basis, label)
        block = self.grams[-1]
        block.polynomial = pp
        for m in sorted(products, key=monomial_key):
            expr = _aff_add(gram_pp.terms.get(m, {}), pp.terms.get(m, {}), -1.0)
            self.equalities.append((expr, f"{label}@{m}"))
        return block

    def assert_eq_zero(self, pp, label: str = "eq") -> None:
        pp = as_param(pp)
        for m in pp.monomials():
            self.equalities.append((dict(pp.terms[m]), f"{label}@{m}"))

    def add_equality(self, expr: AffineExpr, label: str = "eq") -> None:
        self.equalities.append((expr.to_dict(), label))

    # objective ------------------------------------------------------------
    def add_linear_cost(self, expr: AffineExpr | Dict[int, float]) -> None:
        d = expr.to_dict() if isinstance(expr, AffineExpr) else dict(expr)
        self.objective = _aff_add(self.objective, d)

    def add_squared_cost(self, expr: AffineExpr, label: str = "sq") -> None:
        """Add ``expr(v)**2`` to the objective."""
        self.squares.append((expr.to_dict(), label))

    def set_objective(self, P=None, c: Optional[Dict[int, float]] = None) -> None:
        """Objective v' P v + c' v.

        ``P`` is ``(var_ids, matrix)`` or ``None``; it must be symmetric PSD.
        """
        self.objective = {}
        self.squares = []
        if c:
            self.objective = {int(k): float(v) for k, v in c.items() if v != 0.0}
        if P is None:
            return
        ids, mat = P
        mat = np.asarray(mat, dtype=float)
        if mat.shape != (len(ids), len(ids)) or not np.allclose(mat, mat.T, atol=1e-12):
            raise ValueError("P must be a symmetric square matrix matching its variable ids")
        w, U = np.linalg.eigh(mat)
        if w.min(initial=0.0) < -1e-9:
            raise ValueError(f"P is not positive semidefinite (min eigenvalue {w.min():g})")
        for lam, u in zip(w, U.T):
            if lam > 1e-12:
                r = {int(i): float(np.sqrt(lam) * ui) for i, ui in zip(ids, u) if ui != 0.0}
                self.squares.append((r, "P"))

    # compile / solve ------------------------------------------------------
    def compile(self) -> "CompiledProgram":
        return compile_program(self)

    def solve(self, options: Optional[SdpOptions] = None) -> "SosResult":
        comp = self.compile()
        sol = solve(comp.problem, options)
        values = comp.recover(sol) if sol.x_blocks is not None else None
        return SosResult(self, comp, sol, values)

    def stats(self) -> Dict[str, int]:
        """Counts in the convention of tabulated SOS program sizes.

        ``variables`` counts coefficients of the unknown polynomials and scalars;
        ``constraints`` counts Gram matrix entries (size squared, all blocks).
        """
        return {
            "variables": sum(u.nterms for u in self.unknowns),
            "constraints": sum(g.size**2 for g in self.grams if not g.aux),
            "gram_blocks": sum(1 for g in self.grams if not g.aux),
            "equalities": len(self.equalities),
            "decision_vars": self.nvar,
        }


@dataclass
class CompiledProgram:
    problem: SdpProblem
    var_slot: List[Tuple[str, int, int, int]]  # ("gram", block, i, j) or ("free", k, 0, 0)

    def recover(self, sol: SdpSolution) -> np.ndarray:
        v = np.zeros(len(self.var_slot))
        for idx, (kind, a, i, j) in enumerate(self.var_slot):
            if kind == "gram":
                v[idx] = sol.x_blocks[a][i, j]
            else:
                v[idx] = sol.y_free[a]
        return v


@dataclass
class SosResult:
    program: SosProgram
    compiled: CompiledProgram
    solution: SdpSolution
    values: Optional[np.ndarray]

    @property
    def status(self) -> str:
        return self.solution.status

    def poly(self, pp) -> Polynomial:
        return as_param(pp).substitute(self.values)

    def gram(self, block: GramBlock) -> np.ndarray:
        return block.value(self.values)

    def scalar(self, pp) -> float:
        return as_param(pp).at([0.0] * pp.nvars).value(self.values)


def compile_program(prog: SosProgram, tol: float = 1e-9) -> CompiledProgram:
    dims = [g.size for g in prog.grams]
    free_ids = [v for v in range(prog.nvar) if v not in prog._var_gram]
    free_index = {v: k for k, v in enumerate(free_ids)}

    rows_entries: List[List[Tuple[int, int, int, float]]] = []
    rows_free: List[Dict[int, float]] = []
    rhs: List[float] = []
    labels: List[str] = []

    def emit(expr: Dict[int, float], label: str, extra=None):
        blocks_part = []
        free_part: Dict[int, float] = {}
        const = 0.0
        for k, c in expr.items():
            if k == CONST:
                const += c
            elif k in prog._var_gram:
                b, i, j = prog._var_gram[k]
                if i == j:
                    blocks_part.append((b, i, i, c))
                else:
                    blocks_part.append((b, i, j, c / 2.0))
                    blocks_part.append((b, j, i, c / 2.0))
            else:
                free_part[free_index[k]] = free_part.get(free_index[k], 0.0) + c
        if extra:
            blocks_part.extend(extra)
        if not blocks_part and not any(free_part.values()):
            if abs(const) > tol:
                raise CompileError(label, const)
            return
        # unit row scale: coefficient-matching rows mix data magnitudes over
        # many decades, and the solver's residual test is absolute per row
        scale = max([abs(e[3]) for e in blocks_part] + [abs(v) for v in free_part.values()])
        if scale > 0 and scale != 1.0:
            blocks_part = [(b, i, j, c / scale) for b, i, j, c in blocks_part]
            free_part = {k: v / scale for k, v in free_part.items()}
            const /= scale
        rows_entries.append(blocks_part)
        rows_free.append(free_part)
        rhs.append(-const)
        labels.append(label)

    for expr, label in prog.equalities:
        emit(expr, label)

    # objective
    C_blocks = [np.zeros((d, d)) for d in dims]
    c_free = np.zeros(len(free_ids))
    offset = prog.objective.get(CONST, 0.0)
    for k, c in prog.objective.items():
        if k == CONST:
            continue
        if k in prog._var_gram:
            b, i, j = prog._var_gram[k]
            if i == j:
                C_blocks[b][i, i] += c
            else:
                C_blocks[b][i, j] += c / 2.0
                C_blocks[b][j, i] += c / 2.0
        else:
            c_free[free_index[k]] += c

    # epigraph block for the sum of squared residuals: [[I, r], [r', t]] >= 0
    if prog.squares:
        K = len(prog.squares)
        eb = len(dims)
        dims.append(K + 1)
        Ce = np.zeros((K + 1, K + 1))
        Ce[K, K] = 1.0
        C_blocks.append(Ce)
        for k in range(K):
            emit({CONST: -1.0}, f"epigraph@I{k}", extra=[(eb, k, k, 1.0)])
            for l in range(k + 1, K):
                emit({}, f"epigraph@O{k}{l}", extra=[(eb, k, l, 0.5), (eb, l, k, 0.5)])
        for k, (expr, label) in enumerate(prog.squares):
            # Y[k, K] - r_k(v) = 0
            emit(_aff_scale(expr, -1.0), f"epigraph@{label}", extra=[(eb, k, K, 0.5), (eb, K, k, 0.5)])

    m = len(rhs)
    A_blocks = []
    for b, d in enumerate(dims):
        ri, ci, vals = [], [], []
        for r, entries in enumerate(rows_entries):
            for bb, i, j, c in entries:
                if bb == b:
                    ri.append(r)
                    ci.append(i * d + j)
                    vals.append(c)
        A_blocks.append(sp.csr_matrix((vals, (ri, ci)), shape=(m, d * d)))
    fr, fc, fv = [], [], []
    for r, fp in enumerate(rows_free):
        for k, c in sorted(fp.items()):
            if c != 0.0:
                fr.append(r)
                fc.append(k)
                fv.append(c)
    F = sp.csr_matrix((fv, (fr, fc)), shape=(m, len(free_ids)))
    problem = SdpProblem(
        block_dims=dims,
        A_blocks=A_blocks,
        F=F,
        b=np.array(rhs, dtype=float),
        C_blocks=C_blocks,
        c_free=c_free,
        offset=offset,
        row_labels=labels,
    )
    var_slot: List[Tuple[str, int, int, int]] = []
    for v in range(prog.nvar):
        if v in prog._var_gram:
            b, i, j = prog._var_gram[v]
            var_slot.append(("gram", b, i, j))
        else:
            var_slot.append(("free", free_index[v], 0, 0))
    return CompiledProgram(problem, var_slot)
