"""Block-diagonal SDP data in equality standard form.

    minimize    sum_b <C_b, X_b> + c_free' y + offset
    subject to  sum_b <A_{i,b}, X_b> + F_i' y = b_i      i = 1..m
                X_b >= 0 (PSD), y free

Each ``A_blocks[b]`` is a sparse (m, d_b * d_b) matrix holding the row-major
vectorisation of the symmetric coefficient matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np
import scipy.sparse as sp

from ..poly import Monomial, Polynomial, monomial_mul


@dataclass
class SdpProblem:
    block_dims: List[int]
    A_blocks: List[sp.csr_matrix]
    F: sp.csr_matrix
    b: np.ndarray
    C_blocks: List[np.ndarray]
    c_free: np.ndarray
    offset: float = 0.0
    row_labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        m = len(self.b)
        if len(self.A_blocks) != len(self.block_dims) or len(self.C_blocks) != len(self.block_dims):
            raise ValueError("block data does not match block_dims")
        for d, A, C in zip(self.block_dims, self.A_blocks, self.C_blocks):
            if A.shape != (m, d * d) or C.shape != (d, d):
                raise ValueError("inconsistent block shapes")
            if not np.allclose(C, C.T):
                raise ValueError("objective blocks must be symmetric")
        if self.F.shape != (m, len(self.c_free)):
            raise ValueError("free-variable data has the wrong shape")
        if not np.all(np.isfinite(self.b)):
            raise ValueError("right-hand side must be finite")
        if not self.row_labels:
            self.row_labels = [f"row{i}" for i in range(m)]

    @property
    def m(self) -> int:
        return len(self.b)

    @property
    def nfree(self) -> int:
        return len(self.c_free)

    @classmethod
    def from_dense(
        cls,
        block_dims: Sequence[int],
        A: Sequence[Sequence[np.ndarray]],
        b: Sequence[float],
        C: Sequence[np.ndarray],
        F: Optional[np.ndarray] = None,
        c_free: Optional[Sequence[float]] = None,
    ) -> "SdpProblem":
        """Build from dense per-row, per-block coefficient matrices ``A[i][b]``."""
        m = len(b)
        A_blocks = []
        for k, d in enumerate(block_dims):
            rows = [np.asarray(A[i][k], dtype=float).reshape(1, d * d) for i in range(m)]
            A_blocks.append(sp.csr_matrix(np.vstack(rows)) if m else sp.csr_matrix((0, d * d)))
        if F is None:
            F = np.zeros((m, 0))
            c_free = np.zeros(0)
        return cls(
            list(block_dims),
            A_blocks,
            sp.csr_matrix(np.asarray(F, dtype=float).reshape(m, -1)),
            np.asarray(b, dtype=float),
            [np.asarray(c, dtype=float) for c in C],
            np.asarray(c_free, dtype=float),
        )

    # operators in the original scaling
    def apply_A(self, X: Sequence[np.ndarray], y: np.ndarray) -> np.ndarray:
        out = self.F @ y if self.nfree else np.zeros(self.m)
        for A, Xb in zip(self.A_blocks, X):
            out = out + A @ Xb.ravel()
        return out

    def apply_At(self, lam: np.ndarray) -> List[np.ndarray]:
        return [(A.T @ lam).reshape(d, d) for A, d in zip(self.A_blocks, self.block_dims)]

    def objective(self, X: Sequence[np.ndarray], y: np.ndarray) -> float:
        val = self.offset + float(self.c_free @ y) if self.nfree else self.offset
        return val + sum(float(np.sum(C * Xb)) for C, Xb in zip(self.C_blocks, X))

    def dump(self, out: TextIO) -> None:
        """Sparse text dump: header with block dims, then one line per coefficient."""
        out.write(f"blocks {' '.join(str(d) for d in self.block_dims)}\n")
        out.write(f"free {self.nfree}\n")
        out.write(f"rows {self.m}\n")
        for i in range(self.m):
            out.write(f"row {i} rhs {float(self.b[i])!r} label {self.row_labels[i]}\n")
            for k, (A, d) in enumerate(zip(self.A_blocks, self.block_dims)):
                row = A.getrow(i)
                for idx, v in sorted(zip(row.indices, row.data)):
                    p, q = divmod(int(idx), d)
                    if p <= q:
                        out.write(f"  {k} ({p},{q}) {float(v)!r}\n")
            if self.nfree:
                row = self.F.getrow(i)
                for idx, v in sorted(zip(row.indices, row.data)):
                    out.write(f"  free {int(idx)} {float(v)!r}\n")
        out.write("objective\n")
        for k, C in enumerate(self.C_blocks):
            for p, q in zip(*np.nonzero(np.triu(C))):
                out.write(f"  {k} ({p},{q}) {float(C[p, q])!r}\n")
        for idx in np.nonzero(self.c_free)[0]:
            out.write(f"  free {int(idx)} {float(self.c_free[idx])!r}\n")


@dataclass
class SdpSolution:
    status: str
    x_blocks: Optional[List[np.ndarray]]
    y_free: Optional[np.ndarray]
    dual: Optional[np.ndarray]
    s_blocks: Optional[List[np.ndarray]]
    pobj: float
    dobj: float
    residuals: Dict[str, float]
    iterations: int
    certificate: Optional[np.ndarray] = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "Optimal"


def psd_project_check(M: np.ndarray, tol: float = -1e-8):
    """Return ``(passes, lambda_min)`` for a symmetric matrix, passing iff lambda_min >= tol."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return True, 0.0
    lmin = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    return lmin >= tol, lmin


def extract_polynomial(Q: np.ndarray, basis: Sequence[Monomial]) -> Polynomial:
    """Expand Z' Q Z for the monomial vector ``basis``."""
    Q = np.asarray(Q, dtype=float)
    k = len(basis)
    if Q.shape != (k, k):
        raise ValueError(f"Gram matrix shape {Q.shape} does not match basis of length {k}")
    terms: Dict[Monomial, float] = {}
    for i in range(k):
        for j in range(k):
            if Q[i, j] != 0.0:
                m = monomial_mul(basis[i], basis[j])
                terms[m] = terms.get(m, 0.0) + Q[i, j]
    return Polynomial(len(basis[0]), terms)


def diagnose(problem: SdpProblem, sol: SdpSolution, top: int = 5) -> List[tuple]:
    """Rank constraint groups by their share of an infeasibility certificate."""
    if sol.certificate is None:
        return []
    weight: Dict[str, float] = {}
    for lab, v in zip(problem.row_labels, np.abs(sol.certificate)):
        key = lab.split("@")[0]
        weight[key] = weight.get(key, 0.0) + float(v)
    total = sum(weight.values()) or 1.0
    ranked = sorted(weight.items(), key=lambda kv: -kv[1])
    return [(k, v / total) for k, v in ranked[:top]]
