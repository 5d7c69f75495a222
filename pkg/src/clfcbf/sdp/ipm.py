"""Homogeneous self-dual interior-point method for block SDPs with free variables.

Nesterov-Todd scaling, Mehrotra predictor-corrector, dense Schur complement
with the free variables kept in the saddle-point system. Rows are presolved
(dependent rows removed) and Ruiz-equilibrated; all reported residuals are in
the original scaling.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import scipy.linalg as sla

from .problem import SdpProblem, SdpSolution

log = logging.getLogger(__name__)


REFINE_STEPS = 5


@dataclass
class SdpOptions:
    max_iters: int = 200
    feastol: float = 1e-7
    gaptol: float = 1e-7
    inftol: float = 1e-8
    step: float = 0.99
    ruiz_iters: int = 15
    verbose: bool = False


Backend = Callable[[SdpProblem, SdpOptions], SdpSolution]
_backend: Optional[Backend] = None


def set_backend(backend: Optional[Backend]) -> None:
    """Route :func:`solve` through an external conic solver (``None`` restores the built-in one)."""
    global _backend
    _backend = backend


def solve(problem: SdpProblem, options: Optional[SdpOptions] = None) -> SdpSolution:
    opts = options or SdpOptions()
    if _backend is not None:
        return _backend(problem, opts)
    return _HsdSolver(problem, opts).run()


class _Presolved:
    """Dependent-row removal and Ruiz equilibration of an SdpProblem."""

    def __init__(self, prob: SdpProblem, ruiz_iters: int):
        self.prob = prob
        self.dims = list(prob.block_dims)
        self.inconsistent: Optional[np.ndarray] = None
        self.keep = self._independent_rows()
        if self.inconsistent is not None:
            return
        keep = self.keep
        m = len(keep)
        self.m = m
        F = prob.F.toarray()[keep] if prob.nfree else np.zeros((m, 0))
        b = prob.b[keep].copy()
        blocks = []
        for A, d in zip(prob.A_blocks, self.dims):
            Ak = A[keep]
            rows = np.unique(Ak.nonzero()[0])
            dense = Ak[rows].toarray().reshape(len(rows), d, d)
            blocks.append((rows, dense))
        C = [c.copy() for c in prob.C_blocks]
        cf = prob.c_free.copy()

        rho = np.ones(m)
        Ds = [np.ones(d) for d in self.dims]
        e = np.ones(F.shape[1])
        for _ in range(ruiz_iters):
            rn = np.max(np.abs(F), axis=1) if F.shape[1] else np.zeros(m)
            for rows, A in blocks:
                if len(rows):
                    rn[rows] = np.maximum(rn[rows], np.abs(A).reshape(len(rows), -1).max(axis=1))
            r = _inv_sqrt(rn)
            rho *= r
            F = F * r[:, None]
            b = b * r
            new_blocks = []
            for k, (rows, A) in enumerate(blocks):
                A = A * r[rows][:, None, None]
                if len(rows):
                    cn = np.abs(A).max(axis=(0, 2))
                    dk = _inv_sqrt(cn)
                else:
                    dk = np.ones(self.dims[k])
                A = A * dk[None, :, None] * dk[None, None, :]
                C[k] = C[k] * dk[:, None] * dk[None, :]
                Ds[k] *= dk
                new_blocks.append((rows, A))
            blocks = new_blocks
            if F.shape[1]:
                cn = np.max(np.abs(F), axis=0)
                ek = _inv_sqrt(cn)
                F = F * ek[None, :]
                cf = cf * ek
                e *= ek
        self.beta = max(1.0, float(np.max(np.abs(b), initial=0.0)))
        cmax = max([float(np.max(np.abs(c), initial=0.0)) for c in C] + [float(np.max(np.abs(cf), initial=0.0))])
        self.gamma = max(1.0, cmax)
        self.b = b / self.beta
        self.C = [c / self.gamma for c in C]
        self.cf = cf / self.gamma
        self.F = F
        self.blocks = blocks
        self.rho, self.D, self.e = rho, Ds, e

    def _independent_rows(self) -> np.ndarray:
        prob = self.prob
        m = prob.m
        if m == 0:
            return np.arange(0)
        import scipy.sparse as sp

        parts = [A for A in prob.A_blocks] + ([prob.F] if prob.nfree else [])
        A = sp.hstack(parts).tocsr() if parts else sp.csr_matrix((m, 0))
        norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
        zero = norms == 0
        scale = np.where(zero, 1.0, 1.0 / np.where(zero, 1.0, norms))
        An = sp.diags(scale) @ A
        G = (An @ An.T).toarray()
        G[zero, zero] = 0.0
        c, piv, rank, info = sla.lapack.dpstrf(G, lower=1, tol=1e-13)
        keep = np.sort(piv[:rank] - 1)
        if rank == m:
            return keep
        drop = np.setdiff1d(np.arange(m), keep)
        bn = prob.b * scale
        Ak = An[keep].toarray()
        Ad = An[drop].toarray()
        coef, *_ = np.linalg.lstsq(Ak.T, Ad.T, rcond=None)
        # rows the kept ones do not reproduce are merely ill-conditioned: keep them
        fit = np.abs(Ak.T @ coef - Ad.T).max(axis=0)
        real = fit <= 1e-9
        if not np.all(real):
            keep = np.sort(np.concatenate([keep, drop[~real]]))
            drop, coef = drop[real], coef[:, real]
            if not len(drop):
                return keep
            coef, *_ = np.linalg.lstsq(An[keep].toarray().T, An[drop].toarray().T, rcond=None)
        resid = bn[drop] - coef.T @ bn[keep]
        bad = np.nonzero(np.abs(resid) > 1e-9 * (1.0 + np.max(np.abs(bn))))[0]
        if len(bad):
            j = bad[0]
            cert = np.zeros(m)
            cert[drop[j]] = 1.0
            cert[keep] = -coef[:, j]
            cert *= scale
            if prob.b @ cert < 0:
                cert = -cert
            self.inconsistent = cert
        return keep

    # ------------------------------------------------------------------
    def A(self, X: List[np.ndarray], y: np.ndarray) -> np.ndarray:
        out = self.F @ y if self.F.shape[1] else np.zeros(self.m)
        for (rows, Ab), Xb in zip(self.blocks, X):
            if len(rows):
                out[rows] += Ab.reshape(len(rows), -1) @ Xb.ravel()
        return out

    def At(self, lam: np.ndarray) -> List[np.ndarray]:
        out = []
        for (rows, Ab), d in zip(self.blocks, self.dims):
            if len(rows):
                out.append(np.tensordot(lam[rows], Ab, axes=1))
            else:
                out.append(np.zeros((d, d)))
        return out

    def unscale(self, X, y, lam, S):
        Xo = [self.beta * Dk[:, None] * Xb * Dk[None, :] for Dk, Xb in zip(self.D, X)]
        yo = self.beta * self.e * y
        lo = np.zeros(self.prob.m)
        lo[self.keep] = self.gamma * self.rho * lam
        So = [self.gamma * Sb / Dk[:, None] / Dk[None, :] for Dk, Sb in zip(self.D, S)]
        return Xo, yo, lo, So


def _inv_sqrt(v: np.ndarray) -> np.ndarray:
    out = np.ones_like(v)
    np.divide(1.0, np.sqrt(v), out=out, where=v > 0)
    return out


def _sym(M):
    return 0.5 * (M + M.T)


def _chol(M):
    M = _sym(M)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(M)
        w = np.maximum(w, 1e-300)
        return U * np.sqrt(w)[None, :]


def _factor(K: np.ndarray, m: int):
    """LU of the Newton system; a numerically singular K is regularized first."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        d = np.abs(np.diag(lu[0]))
        if np.all(np.isfinite(d)) and d.min(initial=1.0) > 0.0:
            return lu
        # quasi-definite shift: +delta on the multiplier block, -delta on the free block
        delta = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(K)), initial=0.0)))
        Kr = K.copy()
        idx = np.arange(len(K))
        Kr[idx[:m], idx[:m]] += delta
        Kr[idx[m:], idx[m:]] -= delta
        try:
            lu = sla.lu_factor(Kr, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
    return lu if np.all(np.isfinite(lu[0])) else None


def _finite(direction) -> bool:
    dX, dS, dl, dy, dtau, dkap, _, _ = direction
    return bool(
        np.isfinite(dtau) and np.isfinite(dkap) and np.all(np.isfinite(dl)) and np.all(np.isfinite(dy))
        and all(np.all(np.isfinite(a)) for a in dX) and all(np.all(np.isfinite(a)) for a in dS)
    )


def _max_step(lam: np.ndarray, dM: np.ndarray) -> float:
    s = 1.0 / np.sqrt(lam)
    H = _sym(s[:, None] * dM * s[None, :])
    emin = np.linalg.eigvalsh(H)[0]
    return np.inf if emin >= 0 else -1.0 / emin


class _HsdSolver:
    def __init__(self, prob: SdpProblem, opts: SdpOptions):
        self.prob = prob
        self.opts = opts

    def _result(self, status, pre, X, y, lam, S, tau, it, msg="", cert=None):
        prob = self.prob
        if X is None:
            return SdpSolution(status, None, None, None, None, np.nan, np.nan, {}, it, cert, msg)
        Xo, yo, lo, So = pre.unscale([x / tau for x in X], y / tau, lam / tau, [s / tau for s in S])
        res = self._residuals(Xo, yo, lo, So)
        return SdpSolution(status, Xo, yo, lo, So, res["pobj"], res["dobj"], res, it, cert, msg)

    def _residuals(self, Xo, yo, lo, So):
        prob = self.prob
        bnorm = float(np.max(np.abs(prob.b), initial=0.0))
        cnorm = max([float(np.max(np.abs(c), initial=0.0)) for c in prob.C_blocks] + [float(np.max(np.abs(prob.c_free), initial=0.0))])
        pres = float(np.max(np.abs(prob.apply_A(Xo, yo) - prob.b), initial=0.0))
        AtL = prob.apply_At(lo)
        dres = max([float(np.max(np.abs(a + s - c), initial=0.0)) for a, s, c in zip(AtL, So, prob.C_blocks)] + [0.0])
        if prob.nfree:
            dres = max(dres, float(np.max(np.abs(prob.F.T @ lo - prob.c_free))))
        pobj = prob.objective(Xo, yo)
        dobj = float(prob.b @ lo) + prob.offset
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        return {
            "primal": pres / (1.0 + bnorm),
            "dual": dres / (1.0 + cnorm),
            "gap": gap,
            "pobj": pobj,
            "dobj": dobj,
        }

    def run(self) -> SdpSolution:
        opts = self.opts
        prob = self.prob
        pre = _Presolved(prob, opts.ruiz_iters)
        if pre.inconsistent is not None:
            return SdpSolution(
                "Infeasible", None, None, pre.inconsistent, None, np.nan, np.nan, {}, 0,
                pre.inconsistent, "inconsistent linear equalities",
            )
        dims = pre.dims
        nb = len(dims)
        m, nf = pre.m, pre.F.shape[1]
        nu = sum(dims)
        b, C, cf, F = pre.b, pre.C, pre.cf, pre.F

        Lx = [np.eye(d) for d in dims]
        Ls = [np.eye(d) for d in dims]
        lam = np.zeros(m)
        y = np.zeros(nf)
        tau, kappa = 1.0, 1.0

        best = None
        stall = 0
        it = 0
        status = "MaxIters"
        for it in range(opts.max_iters + 1):
            X = [l @ l.T for l in Lx]
            S = [l @ l.T for l in Ls]
            rp = pre.A(X, y) - b * tau
            AtL = pre.At(lam)
            rd = [a + s - c * tau for a, s, c in zip(AtL, S, C)]
            rf = F.T @ lam - cf * tau if nf else np.zeros(0)
            cx = sum(float(np.sum(c * x)) for c, x in zip(C, X)) + (float(cf @ y) if nf else 0.0)
            by = float(b @ lam)
            rg = cx - by + kappa
            mu = (sum(float(np.sum(x * s)) for x, s in zip(X, S)) + tau * kappa) / (nu + 1)

            # convergence in the original scaling
            Xo, yo, lo, So = pre.unscale([x / tau for x in X], y / tau, lam / tau, [s / tau for s in S])
            res = self._residuals(Xo, yo, lo, So)
            if opts.verbose:
                log.info("it %3d pres %.2e dres %.2e gap %.2e tau %.2e kappa %.2e mu %.2e",
                         it, res["primal"], res["dual"], res["gap"], tau, kappa, mu)
            score = max(res["primal"], res["dual"], res["gap"])
            if best is None or score < best[0]:
                best = (score, [x.copy() for x in X], y.copy(), lam.copy(), [s.copy() for s in S], tau)
            if res["primal"] <= opts.feastol and res["dual"] <= opts.feastol and res["gap"] <= opts.gaptol:
                return self._result("Optimal", pre, X, y, lam, S, tau, it)

            # infeasibility certificates from the unnormalised iterate
            Xh, yh, lh, Sh = pre.unscale(X, y, lam, S)
            bl = float(prob.b @ lh)
            if bl > 0:
                AtLh = prob.apply_At(lh)
                viol = max(float(np.max(np.abs(a + s))) for a, s in zip(AtLh, Sh)) if nb else 0.0
                if prob.nfree:
                    viol = max(viol, float(np.max(np.abs(prob.F.T @ lh))))
                if viol / bl <= opts.inftol:
                    return SdpSolution("Infeasible", None, None, lh / bl, None, np.nan, np.nan,
                                       {"certificate_violation": viol / bl}, it, lh / bl)
            cxh = prob.objective(Xh, yh) - prob.offset
            if cxh < 0:
                viol = float(np.max(np.abs(prob.apply_A(Xh, yh)), initial=0.0))
                if viol / -cxh <= opts.inftol:
                    return SdpSolution("Unbounded", [x / -cxh for x in Xh], yh / -cxh, None, None,
                                       -np.inf, np.nan, {"certificate_violation": viol / -cxh}, it)
            if it == opts.max_iters:
                break

            # Nesterov-Todd scaling per block
            R, Rinv, lamv, W = [], [], [], []
            for lx, ls in zip(Lx, Ls):
                U, sv, Vt = np.linalg.svd(ls.T @ lx)
                sv = np.maximum(sv, 1e-300)
                r = lx @ Vt.T / np.sqrt(sv)[None, :]
                ri = (U / np.sqrt(sv)[None, :]).T @ ls.T
                R.append(r)
                Rinv.append(ri)
                lamv.append(sv)
                W.append(r @ r.T)

            # Schur complement
            M = np.zeros((m, m))
            for (rows, Ab), w in zip(pre.blocks, W):
                if not len(rows):
                    continue
                WAW = np.matmul(np.matmul(w, Ab), w)
                M[np.ix_(rows, rows)] += Ab.reshape(len(rows), -1) @ WAW.reshape(len(rows), -1).T
            K = np.zeros((m + nf, m + nf))
            K[:m, :m] = M
            if nf:
                K[:m, m:] = F
                K[m:, :m] = F.T
            lu = _factor(K, m)
            if lu is None:
                status = "NumericalFailure"
                break

            def ksolve(rhs):
                x = sla.lu_solve(lu, rhs, check_finite=False)
                # iterative refinement against the unregularized K while it helps
                r = rhs - K @ x
                rn = np.linalg.norm(r)
                for _ in range(REFINE_STEPS):
                    xn = x + sla.lu_solve(lu, r, check_finite=False)
                    if not np.all(np.isfinite(xn)):
                        break
                    rn_new = np.linalg.norm(rhs - K @ xn)
                    if not rn_new < 0.5 * rn:
                        break
                    x, r, rn = xn, rhs - K @ xn, rn_new
                return x

            WCW = [w @ c @ w for w, c in zip(W, C)]
            a = pre.A(WCW, np.zeros(nf))
            q = ksolve(np.concatenate([a + b, cf]))
            q_l, q_y = q[:m], q[m:]
            cwc = sum(float(np.sum(c * wcw)) for c, wcw in zip(C, WCW))
            den = float((a - b) @ q_l) + (float(cf @ q_y) if nf else 0.0) - cwc - kappa / tau
            Wrd = [w @ r_ @ w for w, r_ in zip(W, rd)]
            Arwd = pre.A(Wrd, np.zeros(nf))
            cwrd = sum(float(np.sum(wcw * r_)) for wcw, r_ in zip(WCW, rd))

            def direction(eta, Dlist, tc):
                Gc = [r @ dm @ r.T for r, dm in zip(R, Dlist)]
                u1 = -eta * rp - pre.A(Gc, np.zeros(nf)) - eta * Arwd
                u2 = -eta * rf
                p = ksolve(np.concatenate([u1, u2]))
                p_l, p_y = p[:m], p[m:]
                cg = sum(float(np.sum(c * g)) for c, g in zip(C, Gc))
                num = (-eta * rg - cg - eta * cwrd - float((a - b) @ p_l)
                       - (float(cf @ p_y) if nf else 0.0) - tc / tau)
                dtau = num / den
                dl = p_l + dtau * q_l
                dy = p_y + dtau * q_y
                AtdL = pre.At(dl)
                dS = [-eta * r_ - adl + c * dtau for r_, adl, c in zip(rd, AtdL, C)]
                dX = [g - w @ ds @ w for g, w, ds in zip(Gc, W, dS)]
                dkap = (tc - kappa * dtau) / tau
                dXt = [ri @ dx @ ri.T for ri, dx in zip(Rinv, dX)]
                dSt = [r.T @ ds @ r for r, ds in zip(R, dS)]
                return dX, dS, dl, dy, dtau, dkap, dXt, dSt

            def steplen(dXt, dSt, dtau, dkap):
                alpha = np.inf
                for lv, dxt, dst in zip(lamv, dXt, dSt):
                    alpha = min(alpha, _max_step(lv, dxt), _max_step(lv, dst))
                if dtau < 0:
                    alpha = min(alpha, -tau / dtau)
                if dkap < 0:
                    alpha = min(alpha, -kappa / dkap)
                return alpha

            # predictor
            Daff = [np.diag(-lv) for lv in lamv]
            aff = direction(1.0, Daff, -tau * kappa)
            if not _finite(aff):
                status = "NumericalFailure"
                break
            a_aff = min(1.0, steplen(aff[6], aff[7], aff[4], aff[5]))
            sigma = (1.0 - a_aff) ** 3
            # corrector
            Dc = []
            for lv, dxt, dst in zip(lamv, aff[6], aff[7]):
                T = sigma * mu * np.eye(len(lv)) - np.diag(lv * lv) - _sym(dxt @ dst)
                Dc.append(2.0 * T / (lv[:, None] + lv[None, :]))
            tc = sigma * mu - tau * kappa - aff[4] * aff[5]
            corr = direction(1.0 - sigma, Dc, tc)
            if not _finite(corr):
                status = "NumericalFailure"
                break
            dX, dS, dl, dy, dtau, dkap, dXt, dSt = corr
            alpha = min(1.0, opts.step * steplen(dXt, dSt, dtau, dkap))
            if not np.isfinite(alpha) or alpha < 1e-10:
                stall += 1
                if stall >= 3:
                    status = "NumericalFailure"
                    break
                continue

            Lx = [r @ _chol(np.diag(lv) + alpha * dxt) for r, lv, dxt in zip(R, lamv, dXt)]
            Ls = [ri.T @ _chol(np.diag(lv) + alpha * dst) for ri, lv, dst in zip(Rinv, lamv, dSt)]
            lam = lam + alpha * dl
            y = y + alpha * dy
            tau = tau + alpha * dtau
            kappa = kappa + alpha * dkap
            if not (np.isfinite(tau) and tau > 0 and kappa > 0):
                status = "NumericalFailure"
                break

        _, X, y, lam, S, tau = best
        return self._result(status, pre, X, y, lam, S, tau, it, "tolerances not reached")
