"""Numerical validation of synthesized certificates.

Everything here works on concrete polynomials only: closed-loop simulation
under u = p / s1, decrease and invariance checks along trajectories, sampled
residuals of the SOS constraints, Gram identity checks, Monte-Carlo volumes
and contour data for plotting.

Sampling is chunked: chunk ``c`` draws from ``default_rng([seed, c])``, so
results do not depend on how chunks are distributed over workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .certs import CertificateSet, ProblemSpec, certificate_targets, sublevel_box
from .poly import Polynomial, max_abs_coeff
from .sdp import extract_polynomial

CHUNK = 4096
EQ_RADIUS = 1e-4
RESIDUAL_TOL = 1e-6
CONTAIN_TOL = 1e-6
GRAM_REL_TOL = 1e-6
GRAM_EIG_TOL = -1e-8


class CertificateViolation(RuntimeError):
    """Raised when a certified property fails in a way that should be impossible."""


# ---------------------------------------------------------------------------
# batch polynomial evaluation


class PolyBundle:
    """Several polynomials sharing one monomial table, evaluated together."""

    def __init__(self, polys: Sequence[Polynomial]):
        if not polys:
            raise ValueError("empty bundle")
        n = polys[0].nvars
        monos = sorted({m for q in polys for m in q.terms} | {(0,) * n})
        index = {m: k for k, m in enumerate(monos)}
        self.nvars = n
        self.exps = np.array(monos, dtype=np.int64).reshape(len(monos), n)
        self.coefs = np.zeros((len(polys), len(monos)))
        for r, q in enumerate(polys):
            for m, c in q.terms.items():
                self.coefs[r, index[m]] = c

    def monomials(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.ones((X.shape[0], self.exps.shape[0]))
        for j in range(self.nvars):
            col = self.exps[:, j]
            top = int(col.max(initial=0))
            if top == 0:
                continue
            pw = np.ones((X.shape[0], top + 1))
            for e in range(1, top + 1):
                pw[:, e] = pw[:, e - 1] * X[:, j]
            out *= pw[:, col]
        return out

    def __call__(self, X: np.ndarray) -> np.ndarray:
        """(N, n) points -> (N, number of polynomials)."""
        return self.monomials(X) @ self.coefs.T


def eval_polys(polys: Sequence[Polynomial], X: np.ndarray) -> np.ndarray:
    return PolyBundle(polys)(X)


# ---------------------------------------------------------------------------
# controller and closed loop


@dataclass(frozen=True)
class RationalController:
    p: Tuple[Polynomial, ...]
    s1: Polynomial
    eps_s1: float

    @staticmethod
    def from_certificate(cert: CertificateSet, spec: ProblemSpec) -> "RationalController":
        # one controller serves the CLF and every CBF condition
        return RationalController(tuple(cert.p), cert.s1, spec.eps_s1)

    @property
    def m(self) -> int:
        return len(self.p)

    def many(self, X: np.ndarray) -> np.ndarray:
        vals = eval_polys(list(self.p) + [self.s1], X)
        s1 = vals[:, -1]
        if np.any(s1 < self.eps_s1 / 2):
            raise CertificateViolation(f"s1 dropped to {s1.min():.3g}, below eps_s1/2")
        return vals[:, :-1] / s1[:, None]


def eval_controller(ctrl: RationalController, x) -> np.ndarray:
    return ctrl.many(np.asarray(x, dtype=float)[None, :])[0]


def _field_bundle(spec: ProblemSpec, ctrl: RationalController) -> PolyBundle:
    """Rows: f (n), G row-major (n*m), p (m), s1, r."""
    rows = list(spec.f) + [g for row in spec.G for g in row] + list(ctrl.p) + [ctrl.s1, spec.r]
    return PolyBundle(rows)


def closed_loop_many(spec: ProblemSpec, ctrl: RationalController, X: np.ndarray) -> np.ndarray:
    n, m = spec.n, spec.m
    vals = _field_bundle(spec, ctrl)(X)
    f = vals[:, :n]
    G = vals[:, n:n + n * m].reshape(-1, n, m)
    s1 = vals[:, n + n * m + m]
    if np.any(s1 < ctrl.eps_s1 / 2):
        raise CertificateViolation(f"s1 dropped to {s1.min():.3g}, below eps_s1/2")
    u = vals[:, n + n * m:n + n * m + m] / s1[:, None]
    return f + np.einsum("kij,kj->ki", G, u)


def closed_loop_field(spec: ProblemSpec, ctrl: RationalController, x) -> np.ndarray:
    return closed_loop_many(spec, ctrl, np.asarray(x, dtype=float)[None, :])[0]


# ---------------------------------------------------------------------------
# simulation

LEFT_OPERATING_REGION = 1
ENTERED_EQUILIBRIUM = 2
STEP_REJECTED = 4
S1_VIOLATION = 8


@njit(cache=True)
def _eval_rows(x, E, maxdeg, indptr, cols, vals, pw, mon, out):
    K, n = E.shape
    for j in range(n):
        pw[j, 0] = 1.0
        for e in range(1, maxdeg + 1):
            pw[j, e] = pw[j, e - 1] * x[j]
    for k in range(K):
        v = 1.0
        for j in range(n):
            v *= pw[j, E[k, j]]
        mon[k] = v
    for r in range(len(indptr) - 1):
        acc = 0.0
        for q in range(indptr[r], indptr[r + 1]):
            acc += vals[q] * mon[cols[q]]
        out[r] = acc


@njit(cache=True)
def _rhs(x, D, n, m, s1_min, dx):
    """Closed-loop field into dx; returns (s1 ok, r(x))."""
    E, maxdeg, indptr, cols, vals, pw, mon, buf = D
    _eval_rows(x, E, maxdeg, indptr, cols, vals, pw, mon, buf)
    s1 = buf[n + n * m + m]
    for i in range(n):
        acc = buf[i]
        for j in range(m):
            acc += buf[n + i * m + j] * buf[n + n * m + j] / s1
        dx[i] = acc
    return s1 >= s1_min, buf[n + n * m + m + 1]


@njit(cache=True)
def _rk4(x, h, k1, D, n, m, s1_min, k2, k3, k4, tmp, out):
    """One RK4 step from x whose first stage k1 is already known."""
    for i in range(n):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    a, _ = _rhs(tmp, D, n, m, s1_min, k2)
    for i in range(n):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    b, _ = _rhs(tmp, D, n, m, s1_min, k3)
    for i in range(n):
        tmp[i] = x[i] + h * k3[i]
    c, _ = _rhs(tmp, D, n, m, s1_min, k4)
    for i in range(n):
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return a and b and c


@njit(cache=True)
def _integrate(D, n, m, x0, T, dt, tol, s1_min, xstar, eq_radius, max_halvings):
    nout = int(np.floor(T / dt + 1e-9)) + 1
    states = np.empty((nout, n))
    times = np.empty(nout)
    k0 = np.empty(n)
    km = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    y1 = np.empty(n)
    ym = np.empty(n)
    y2 = np.empty(n)
    x = x0.copy()
    flags = 0
    states[0] = x
    times[0] = 0.0
    count = 1
    h = dt
    hmin = dt * 2.0 ** (-max_halvings)
    ok0, r0 = _rhs(x, D, n, m, s1_min, k0)
    if not ok0:
        return times[:count], states[:count], flags | S1_VIOLATION
    if r0 > 0.0:
        return times[:count], states[:count], flags | LEFT_OPERATING_REGION
    for k in range(1, nout):
        remaining = dt
        while remaining > 1e-12 * dt:
            hs = min(h, remaining)
            ok = _rk4(x, hs, k0, D, n, m, s1_min, k2, k3, k4, tmp, y1)
            ok = _rk4(x, 0.5 * hs, k0, D, n, m, s1_min, k2, k3, k4, tmp, ym) and ok
            okm, _ = _rhs(ym, D, n, m, s1_min, km)
            ok = _rk4(ym, 0.5 * hs, km, D, n, m, s1_min, k2, k3, k4, tmp, y2) and ok and okm
            if not ok:
                return times[:count], states[:count], flags | S1_VIOLATION
            err = 0.0
            finite = True
            for i in range(n):
                d = abs(y2[i] - y1[i]) / 15.0
                if not np.isfinite(d):
                    finite = False
                err = max(err, d)
            if not finite or err > tol:
                h = 0.5 * hs
                if h < hmin:
                    return times[:count], states[:count], flags | STEP_REJECTED
                continue
            for i in range(n):
                x[i] = y2[i]
            remaining -= hs
            if err < tol / 32.0 and hs == h:
                h = min(2.0 * h, dt)
            okx, rv = _rhs(x, D, n, m, s1_min, k0)
            if not okx:
                return times[:count], states[:count], flags | S1_VIOLATION
        states[count] = x
        times[count] = k * dt
        count += 1
        dist = 0.0
        for i in range(n):
            dist += (x[i] - xstar[i]) ** 2
        if np.sqrt(dist) <= eq_radius:
            flags |= ENTERED_EQUILIBRIUM
        if rv > 0.0:
            return times[:count], states[:count], flags | LEFT_OPERATING_REGION
    return times[:count], states[:count], flags


def _kernel_data(bundle: PolyBundle):
    from scipy.sparse import csr_matrix

    C = csr_matrix(bundle.coefs)
    C.sort_indices()
    E = np.ascontiguousarray(bundle.exps)
    maxdeg = int(E.max(initial=0))
    return (
        E, maxdeg, C.indptr.astype(np.int64), C.indices.astype(np.int64), C.data.astype(float),
        np.empty((E.shape[1], maxdeg + 1)), np.empty(E.shape[0]), np.empty(C.shape[0]),
    )


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    left_operating_region: bool = False
    entered_equilibrium: bool = False
    step_rejected: bool = False

    def __post_init__(self):
        if not (len(self.times) == len(self.states) == len(self.inputs)):
            raise ValueError("trajectory arrays must have equal length")

    @property
    def events(self) -> List[str]:
        names = ("left_operating_region", "entered_equilibrium", "step_rejected")
        return [k for k in names if getattr(self, k)]


def simulate(
    spec: ProblemSpec,
    ctrl: RationalController,
    x0,
    T: float,
    dt: float,
    tol: float = 1e-8,
    max_halvings: int = 40,
) -> Trajectory:
    """RK4 with step-doubling error control; states recorded every ``dt``.

    Inside each output interval the step is halved while the local error
    estimate exceeds ``tol`` and doubled again (up to ``dt``) once it is well
    below.  Integration stops at ``T`` or when r(x) > 0.
    """
    if dt <= 0 or T < 0:
        raise ValueError("dt must be positive and T non-negative")
    bundle = _field_bundle(spec, ctrl)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.n,):
        raise ValueError(f"x0 must have {spec.n} coordinates")
    times, states, flags = _integrate(
        _kernel_data(bundle), spec.n, spec.m, x0.copy(), float(T), float(dt),
        float(tol), ctrl.eps_s1 / 2, np.asarray(spec.xstar, dtype=float), EQ_RADIUS, int(max_halvings),
    )
    if flags & S1_VIOLATION:
        raise CertificateViolation("s1 dropped below eps_s1/2 along a trajectory")
    inputs = ctrl.many(states) if len(states) else np.zeros((0, ctrl.m))
    return Trajectory(
        times.copy(), states.copy(), inputs,
        left_operating_region=bool(flags & LEFT_OPERATING_REGION),
        entered_equilibrium=bool(flags & ENTERED_EQUILIBRIUM),
        step_rejected=bool(flags & STEP_REJECTED),
    )


@dataclass
class DecreaseReport:
    checked: int
    decreasing: int

    @property
    def fraction(self) -> float:
        return 1.0 if self.checked == 0 else self.decreasing / self.checked

    @property
    def passed(self) -> bool:
        return self.decreasing == self.checked


def check_decrease(V: Polynomial, traj: Trajectory, xstar=None, radius: float = EQ_RADIUS) -> DecreaseReport:
    """Count recorded steps starting outside the equilibrium ball on which V drops."""
    X = traj.states
    if len(X) < 2:
        return DecreaseReport(0, 0)
    xstar = np.zeros(X.shape[1]) if xstar is None else np.asarray(xstar, dtype=float)
    v = eval_polys([V], X)[:, 0]
    outside = np.linalg.norm(X[:-1] - xstar, axis=1) > radius
    drop = v[1:] < v[:-1]
    return DecreaseReport(int(outside.sum()), int((drop & outside).sum()))


# ---------------------------------------------------------------------------
# sampling


def sample_box(lo, hi, N: int, seed: int, accept: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """N uniform points in the box [lo, hi], optionally filtered by ``accept``."""
    if N < 1:
        raise ValueError("N must be at least 1")
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    out: List[np.ndarray] = []
    have = 0
    chunk = 0
    while have < N:
        rng = np.random.default_rng([seed, chunk])
        X = lo + (hi - lo) * rng.random((CHUNK, len(lo)))
        if accept is not None:
            X = X[accept(X)]
        out.append(X)
        have += len(X)
        chunk += 1
        if chunk > 10_000 and have == 0:
            raise ValueError("acceptance region appears to be empty")
    return np.concatenate(out)[:N]


def sample_operating_region(spec: ProblemSpec, N: int, seed: int = 0, extra=None) -> np.ndarray:
    """Uniform samples of {r <= 0} by rejection from its bounding box."""
    lo, hi = sublevel_box(spec.r)
    rb = PolyBundle([spec.r])

    def accept(X):
        ok = rb(X)[:, 0] <= 0
        return ok if extra is None else ok & extra(X)

    return sample_box(lo, hi, N, seed, accept)


def sample_safe_set(spec: ProblemSpec, B: Sequence[Polynomial], N: int, seed: int = 0) -> np.ndarray:
    """Uniform samples of the safe set within the operating region."""
    bb = PolyBundle(list(B))
    return sample_operating_region(spec, N, seed, extra=lambda X: np.all(bb(X) <= 0, axis=1))


# ---------------------------------------------------------------------------
# residual checks


@dataclass
class ResidualReport:
    minima: Dict[str, float]
    samples: int
    tol: float = RESIDUAL_TOL

    @property
    def failures(self) -> List[str]:
        return [k for k, v in self.minima.items() if not v >= -self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures


def sample_sos_residuals(cert: CertificateSet, spec: ProblemSpec, N: int, seed: int = 0) -> ResidualReport:
    """Minimum of every asserted-SOS polynomial over N samples of the operating region."""
    if N < 1:
        raise ValueError("N must be at least 1")
    X = sample_operating_region(spec, N, seed)
    targets = certificate_targets(cert, spec)
    names = sorted(targets)
    vals = PolyBundle([targets[k] for k in names])(X)
    return ResidualReport({k: float(vals[:, i].min()) for i, k in enumerate(names)}, N)


@dataclass
class GramCheck:
    label: str
    rel_error: float
    min_eig: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= GRAM_REL_TOL and self.min_eig >= GRAM_EIG_TOL


def check_grams(cert: CertificateSet, spec: ProblemSpec) -> List[GramCheck]:
    """Z'QZ against the polynomial each Gram matrix certifies."""
    targets = certificate_targets(cert, spec)
    out = []
    for label in sorted(cert.grams):
        basis, Q = cert.grams[label]
        if label not in targets:
            raise KeyError(f"no certified polynomial for Gram block {label!r}")
        target = targets[label]
        err = max_abs_coeff(extract_polynomial(Q, basis) - target) / max(1.0, max_abs_coeff(target))
        eig = float(np.linalg.eigvalsh(0.5 * (Q + Q.T)).min()) if Q.size else 0.0
        out.append(GramCheck(label, float(err), eig))
    return out


def containment_violations(spec: ProblemSpec, B: Sequence[Polynomial], X: np.ndarray, tol: float = CONTAIN_TOL) -> int:
    """Points of X inside every {B_i <= 0} but with some w_i > tol."""
    if not B:
        return 0
    inside = np.all(PolyBundle(list(B))(X) <= 0, axis=1)
    outside_a = np.any(PolyBundle(list(spec.w))(X) > tol, axis=1)
    return int(np.sum(inside & outside_a))


def safe_set_volume(B: Sequence[Polynomial], bounds, N: int, seed: int = 0) -> Tuple[float, float]:
    """Monte-Carlo volume of the intersection of {B_i <= 0} inside ``bounds`` = (lo, hi)."""
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    X = sample_box(lo, hi, N, seed)
    hit = np.all(PolyBundle(list(B))(X) <= 0, axis=1) if B else np.ones(len(X), dtype=bool)
    box = float(np.prod(hi - lo))
    frac = float(hit.mean())
    return frac * box, box * float(np.sqrt(frac * (1.0 - frac) / N))


# ---------------------------------------------------------------------------
# contour data


@dataclass
class SliceData:
    """Grid samples plus zero-level curves of polynomials on a 2-D slice."""

    axes: Tuple[int, int]
    xs: np.ndarray
    ys: np.ndarray
    values: Dict[str, np.ndarray] = field(default_factory=dict)  # (len(ys), len(xs))
    curves: Dict[str, List[np.ndarray]] = field(default_factory=dict)  # each (k, 2) in slice coords


def contour_slice(
    polys: Iterable[Tuple[str, Polynomial]],
    lo,
    hi,
    grid: Tuple[int, int] = (401, 401),
    axes: Tuple[int, int] = (0, 1),
    fixed=None,
) -> SliceData:
    """Sample each polynomial on the plane spanned by ``axes`` (other coordinates at ``fixed``)."""
    from skimage.measure import find_contours

    nx, ny = grid
    if nx < 2 or ny < 2:
        raise ValueError("grid must be at least 2 x 2")
    polys = list(polys)
    if not polys:
        raise ValueError("no polynomials to slice")
    n = polys[0][1].nvars
    base = np.zeros(n) if fixed is None else np.asarray(fixed, dtype=float).copy()
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    GX, GY = np.meshgrid(xs, ys)
    P = np.tile(base, (GX.size, 1))
    P[:, axes[0]] = GX.ravel()
    P[:, axes[1]] = GY.ravel()
    vals = PolyBundle([q for _, q in polys])(P)
    out = SliceData(tuple(axes), xs, ys)
    for k, (name, _) in enumerate(polys):
        Z = vals[:, k].reshape(ny, nx)
        out.values[name] = Z
        curves = []
        if Z.min() < 0 < Z.max():
            for c in find_contours(Z, 0.0):
                # (row, col) fractional indices -> coordinates
                cx = np.interp(c[:, 1], np.arange(nx), xs)
                cy = np.interp(c[:, 0], np.arange(ny), ys)
                curves.append(np.column_stack([cx, cy]))
        out.curves[name] = curves
    return out


def write_slice_csv(path: str, data: SliceData) -> None:
    """Grid rows ``x1,x2,value,poly_id``; zero-level vertices follow as ``NAME#level<k>`` with value 0."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "value", "poly_id"])
        for name, Z in data.values.items():
            for iy, y in enumerate(data.ys):
                for ix, x in enumerate(data.xs):
                    w.writerow([repr(float(x)), repr(float(y)), repr(float(Z[iy, ix])), name])
        for name, curves in data.curves.items():
            for k, c in enumerate(curves):
                for x, y in c:
                    w.writerow([repr(float(x)), repr(float(y)), "0.0", f"{name}#level{k}"])


def write_trajectories_csv(path: str, trajs: Sequence[Trajectory], spec: ProblemSpec, cert: CertificateSet) -> None:
    """Columns ``traj,t,x1..xn,u1..um,V,B1..Bt,events``, one block of rows per trajectory.

    ``events`` is empty except on the last row of a trajectory, where it lists
    the raised flags separated by ``|``.
    """
    n, m, t = spec.n, spec.m, spec.t
    head = ["traj", "t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + ["V"]
    head += [f"B{i + 1}" for i in range(t)] + ["events"]
    bundle = PolyBundle([cert.V] + list(cert.B))
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for k, tr in enumerate(trajs):
            vals = bundle(tr.states) if len(tr.states) else np.zeros((0, 1 + t))
            for i in range(len(tr.times)):
                row = [k, repr(float(tr.times[i]))]
                row += [repr(float(v)) for v in tr.states[i]]
                row += [repr(float(v)) for v in tr.inputs[i]]
                row += [repr(float(v)) for v in vals[i]]
                row.append("|".join(tr.events) if i == len(tr.times) - 1 else "")
                w.writerow(row)
