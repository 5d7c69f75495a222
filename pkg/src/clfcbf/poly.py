"""Sparse multivariate polynomials with float coefficients.

Monomials are exponent tuples. Terms are kept in a dict keyed by monomial;
arithmetic never stores an exact-zero coefficient, but round-off residue is
left alone until :func:`clean` is called explicitly.
"""

from __future__ import annotations

import re
from itertools import combinations_with_replacement
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

Monomial = Tuple[int, ...]


class DimensionError(ValueError):
    pass


def monomial_key(m: Monomial):
    """Graded lexicographic sort key, constant first, x1 before x2 within a degree."""
    return (sum(m), tuple(-e for e in m))


def monomial_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(i + j for i, j in zip(a, b))


def monomials_of_degree(nvars: int, deg: int) -> List[Monomial]:
    out = []
    for combo in combinations_with_replacement(range(nvars), deg):
        e = [0] * nvars
        for i in combo:
            e[i] += 1
        out.append(tuple(e))
    out.sort(key=monomial_key)
    return out


class Polynomial:
    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Mapping[Monomial, float] | None = None):
        if nvars < 1:
            raise ValueError("nvars must be positive")
        self.nvars = nvars
        clean_terms: Dict[Monomial, float] = {}
        if terms:
            for m, c in terms.items():
                m = tuple(int(e) for e in m)
                if len(m) != nvars or min(m) < 0:
                    raise DimensionError(f"monomial {m} does not match nvars={nvars}")
                c = float(c)
                if c != 0.0:
                    clean_terms[m] = clean_terms.get(m, 0.0) + c
        self.terms = {m: c for m, c in clean_terms.items() if c != 0.0}

    # construction helpers
    @classmethod
    def constant(cls, nvars: int, value: float) -> "Polynomial":
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, nvars: int, i: int) -> "Polynomial":
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): 1.0})

    @classmethod
    def zero(cls, nvars: int) -> "Polynomial":
        return cls(nvars)

    @classmethod
    def _raw(cls, nvars: int, terms: Dict[Monomial, float]) -> "Polynomial":
        p = object.__new__(cls)
        p.nvars = nvars
        p.terms = terms
        return p

    # basic queries
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((sum(m) for m in self.terms), default=-1)

    def coeff(self, m: Monomial) -> float:
        return self.terms.get(tuple(m), 0.0)

    def monomials(self) -> List[Monomial]:
        return sorted(self.terms, key=monomial_key)

    def items(self):
        for m in self.monomials():
            yield m, self.terms[m]

    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        return f"Polynomial({format_poly(self)!r})"

    def __eq__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self.terms == other.terms

    def __hash__(self):
        return hash((self.nvars, frozenset(self.terms.items())))

    # arithmetic
    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise DimensionError(f"nvars mismatch: {self.nvars} vs {other.nvars}")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.nvars, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial._raw(self.nvars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return add(self, -other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return add(other, -self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(1.0 / float(other))
        return NotImplemented

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("exponent must be a non-negative integer")
        result = Polynomial.constant(self.nvars, 1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    def scale(self, a: float) -> "Polynomial":
        if a == 0.0:
            return Polynomial(self.nvars)
        return Polynomial._raw(self.nvars, {m: a * c for m, c in self.terms.items()})

    def __call__(self, x) -> float:
        return evaluate(self, x)


def _check(p: Polynomial, q: Polynomial):
    if p.nvars != q.nvars:
        raise DimensionError(f"nvars mismatch: {p.nvars} vs {q.nvars}")


def add(p: Polynomial, q: Polynomial) -> Polynomial:
    _check(p, q)
    terms = dict(p.terms)
    for m, c in q.terms.items():
        s = terms.get(m, 0.0) + c
        if s == 0.0:
            terms.pop(m, None)
        else:
            terms[m] = s
    return Polynomial._raw(p.nvars, terms)


def mul(p: Polynomial, q: Polynomial) -> Polynomial:
    _check(p, q)
    terms: Dict[Monomial, float] = {}
    for a, ca in p.terms.items():
        for b, cb in q.terms.items():
            m = monomial_mul(a, b)
            terms[m] = terms.get(m, 0.0) + ca * cb
    return Polynomial._raw(p.nvars, {m: c for m, c in terms.items() if c != 0.0})


def derivative(p: Polynomial, i: int) -> Polynomial:
    terms: Dict[Monomial, float] = {}
    for m, c in p.terms.items():
        e = m[i]
        if e:
            d = list(m)
            d[i] = e - 1
            terms[tuple(d)] = c * e
    return Polynomial._raw(p.nvars, terms)


def gradient(p: Polynomial) -> List[Polynomial]:
    return [derivative(p, i) for i in range(p.nvars)]


def _point(x, nvars: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != nvars:
        raise DimensionError(f"point has {x.shape[-1]} coordinates, expected {nvars}")
    return x


def evaluate(p: Polynomial, x) -> float:
    x = _point(x, p.nvars)
    if x.ndim != 1:
        raise DimensionError("evaluate expects a single point; use evaluate_many")
    total = 0.0
    for m, c in p.terms.items():
        v = c
        for xi, e in zip(x, m):
            if e:
                v *= xi**e
        total += v
    return float(total)


def evaluate_many(p: Polynomial, X) -> np.ndarray:
    """Evaluate at each row of ``X`` (shape (N, nvars))."""
    X = _point(X, p.nvars)
    X = np.atleast_2d(X)
    if not p.terms:
        return np.zeros(X.shape[0])
    mons = list(p.terms)
    E = np.array(mons, dtype=int)
    c = np.array([p.terms[m] for m in mons])
    return monomial_matrix(X, E) @ c


def monomial_matrix(X: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Rows of ``X`` raised to each exponent row of ``E``: shape (N, len(E))."""
    N = X.shape[0]
    out = np.ones((N, E.shape[0]))
    for j in range(E.shape[1]):
        col = E[:, j]
        dmax = int(col.max(initial=0))
        if dmax == 0:
            continue
        powers = np.ones((N, dmax + 1))
        for d in range(1, dmax + 1):
            powers[:, d] = powers[:, d - 1] * X[:, j]
        out *= powers[:, col]
    return out


def shift(p: Polynomial, c: Sequence[float]) -> Polynomial:
    """Return q with q(x) = p(x - c), expanded in x."""
    c = [float(ci) for ci in c]
    if len(c) != p.nvars:
        raise DimensionError("shift vector length does not match nvars")
    if all(ci == 0.0 for ci in c):
        return Polynomial._raw(p.nvars, dict(p.terms))
    n = p.nvars
    lin = [Polynomial(n, {tuple(int(j == i) for j in range(n)): 1.0, (0,) * n: -c[i]}) for i in range(n)]
    cache: Dict[Tuple[int, int], Polynomial] = {}

    def power(i, e):
        key = (i, e)
        if key not in cache:
            cache[key] = lin[i] ** e
        return cache[key]

    out = Polynomial(n)
    for m, coef in p.terms.items():
        term = Polynomial.constant(n, coef)
        for i, e in enumerate(m):
            if e:
                term = term * power(i, e)
        out = out + term
    return out


def clean(p: Polynomial, tol: float = 1e-12) -> Polynomial:
    """Drop coefficients with magnitude <= tol * max(1, max |coeff|)."""
    if not p.terms:
        return p
    scale = max(1.0, max(abs(c) for c in p.terms.values()))
    return Polynomial._raw(p.nvars, {m: c for m, c in p.terms.items() if abs(c) > tol * scale})


def max_coeff_diff(p: Polynomial, q: Polynomial) -> float:
    _check(p, q)
    keys = set(p.terms) | set(q.terms)
    return max((abs(p.coeff(m) - q.coeff(m)) for m in keys), default=0.0)


def max_abs_coeff(p: Polynomial) -> float:
    return max((abs(c) for c in p.terms.values()), default=0.0)


# ---------------------------------------------------------------------------
# vectors and matrices of polynomials (plain nested lists)

PolyVector = List[Polynomial]
PolyMatrix = List[List[Polynomial]]


def dot(a: Sequence[Polynomial], b: Sequence[Polynomial]) -> Polynomial:
    if len(a) != len(b) or not a:
        raise DimensionError("dot product needs equal, nonzero lengths")
    out = a[0] * b[0]
    for u, v in zip(a[1:], b[1:]):
        out = out + u * v
    return out


def matvec(M: Sequence[Sequence[Polynomial]], v: Sequence[Polynomial]) -> PolyVector:
    for row in M:
        if len(row) != len(v):
            raise DimensionError("matrix/vector shape mismatch")
    return [dot(row, v) for row in M]


def transpose(M: Sequence[Sequence[Polynomial]]) -> PolyMatrix:
    return [list(col) for col in zip(*M)]


# ---------------------------------------------------------------------------
# text format

_NUMBER = re.compile(r"(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")
_NAME = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


class PolySyntaxError(ValueError):
    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at column {pos + 1}: {text!r}")
        self.pos = pos
        self.text = text


def default_varnames(nvars: int) -> List[str]:
    return [f"x{i + 1}" for i in range(nvars)]


class _Parser:
    def __init__(self, text: str, varnames: Sequence[str]):
        self.text = text
        self.pos = 0
        self.index = {name: i for i, name in enumerate(varnames)}
        self.n = len(varnames)

    def error(self, msg: str):
        raise PolySyntaxError(msg, self.text, self.pos)

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> Polynomial:
        p = self.expr()
        if self.peek():
            self.error(f"unexpected {self.peek()!r}")
        return p

    def expr(self) -> Polynomial:
        if self.peek() in "+-" and self.peek():
            sign = self.text[self.pos]
            self.pos += 1
            p = self.term()
            if sign == "-":
                p = -p
        else:
            p = self.term()
        while self.peek() and self.peek() in "+-":
            op = self.text[self.pos]
            self.pos += 1
            q = self.term()
            p = p + q if op == "+" else p - q
        return p

    def term(self) -> Polynomial:
        p = self.unary()
        while self.peek() and self.peek() in "*/":
            op = self.text[self.pos]
            start = self.pos
            self.pos += 1
            q = self.unary()
            if op == "*":
                p = p * q
            else:
                if q.degree > 0:
                    self.pos = start
                    self.error("division by a non-constant")
                c = q.coeff((0,) * self.n)
                if c == 0.0:
                    self.pos = start
                    self.error("division by zero")
                p = p / c
        return p

    def unary(self) -> Polynomial:
        if self.peek() == "-":
            self.pos += 1
            return -self.unary()
        if self.peek() == "+":
            self.pos += 1
            return self.unary()
        return self.power()

    def power(self) -> Polynomial:
        base = self.atom()
        if self.peek() == "^":
            self.pos += 1
            self.skip()
            m = re.compile(r"\d+").match(self.text, self.pos)
            if not m:
                self.error("exponent must be a non-negative integer")
            self.pos = m.end()
            base = base ** int(m.group())
        return base

    def atom(self) -> Polynomial:
        ch = self.peek()
        if not ch:
            self.error("unexpected end of input")
        if ch == "(":
            self.pos += 1
            p = self.expr()
            if self.peek() != ")":
                self.error("expected ')'")
            self.pos += 1
            return p
        m = _NUMBER.match(self.text, self.pos)
        if m:
            self.pos = m.end()
            return Polynomial.constant(self.n, float(m.group()))
        m = _NAME.match(self.text, self.pos)
        if m:
            name = m.group()
            if name not in self.index:
                self.error(f"unknown variable {name!r}")
            self.pos = m.end()
            return Polynomial.variable(self.n, self.index[name])
        self.error(f"unexpected {ch!r}")


def parse(text: str, varnames: Sequence[str]) -> Polynomial:
    """Parse a polynomial expression such as ``"(x1 + 0.3)^2 - 2.5e-1*x2"``."""
    if not varnames:
        raise ValueError("at least one variable name is required")
    return _Parser(text, list(varnames)).parse()


def _format_monomial(m: Monomial, varnames: Sequence[str]) -> str:
    parts = []
    for name, e in zip(varnames, m):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(f"{name}^{e}")
    return "*".join(parts)


def format_poly(p: Polynomial, varnames: Sequence[str] | None = None) -> str:
    """Text form that :func:`parse` reads back exactly (coefficients use repr)."""
    varnames = list(varnames) if varnames else default_varnames(p.nvars)
    if not p.terms:
        return "0"
    pieces = []
    for m, c in p.items():
        sign = "-" if c < 0 else "+"
        a = abs(c)
        mono = _format_monomial(m, varnames)
        if not mono:
            body = repr(a)
        elif a == 1.0:
            body = mono
        else:
            body = f"{repr(a)}*{mono}"
        pieces.append((sign, body))
    first_sign, first = pieces[0]
    out = ("-" if first_sign == "-" else "") + first
    for sign, body in pieces[1:]:
        out += f" {sign} {body}"
    return out


def from_numbers(nvars: int, items: Iterable[Tuple[Sequence[int], float]]) -> Polynomial:
    return Polynomial(nvars, {tuple(m): c for m, c in items})
