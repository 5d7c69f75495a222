import io

import numpy as np
import pytest

from clfcbf.sdp import SdpOptions, SdpProblem, extract_polynomial, psd_project_check, solve
from clfcbf.sdp import ipm
from clfcbf.poly import parse

# ---------------------------------------------------------------------------
# construction helpers


def E(d, i, j):
    """Symmetric coefficient matrix selecting X_ij (X_ii when i == j)."""
    M = np.zeros((d, d))
    if i == j:
        M[i, i] = 1.0
    else:
        M[i, j] = M[j, i] = 0.5
    return M


def make(dims, rows, C, F=None, c_free=None):
    """rows: list of ({block: matrix}, rhs)."""
    A = [[blk.get(k, np.zeros((d, d))) for k, d in enumerate(dims)] for blk, _ in rows]
    b = [rhs for _, rhs in rows]
    return SdpProblem.from_dense(dims, A, b, C, F, c_free)


def grid_min(f, feasible, lo, hi, points=41, shrink=4.0, levels=40):
    """Brute-force minimizer: evaluate a grid, zoom around the best feasible point."""
    lo, hi = np.array(lo, float), np.array(hi, float)
    best = None
    for _ in range(levels):
        axes = [np.linspace(a, b, points) for a, b in zip(lo, hi)]
        for x in np.array(np.meshgrid(*axes)).reshape(len(lo), -1).T:
            if feasible(x):
                v = f(x)
                if best is None or v < best[0]:
                    best = (v, x)
        width = (hi - lo) / shrink
        lo, hi = best[1] - width / 2, best[1] + width / 2
        if np.all(hi - lo < 1e-11):
            break
    return best[0]


def lowest_feasible(feasible, lo, hi, tol=1e-14):
    """Bisection for the smallest t in [lo, hi] with feasible(t), for upward-closed feasibility."""
    while hi - lo > tol * (1 + abs(hi)):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if feasible(mid) else (mid, hi)
    return hi


def psd(M):
    return np.linalg.eigvalsh(M)[0] >= 0.0


# ---------------------------------------------------------------------------
# the oracle suite


def p_arrow(a):
    # min x  s.t. [[x, a], [a, x]] >= 0
    rows = [({0: E(2, 0, 1)}, a), ({0: E(2, 0, 0) - E(2, 1, 1)}, 0.0)]
    return make([2], rows, [E(2, 0, 0)]), abs(a)


def p_min_eig(C):
    # min <C, X>  s.t. trace X = 1  ->  smallest eigenvalue of C
    d = len(C)
    return make([d], [({0: np.eye(d)}, 1.0)], [C]), float(np.linalg.eigvalsh(C)[0])


def p_max_shift(A):
    # max t  s.t. A - t I >= 0  (t free), written as min -t
    d = len(A)
    rows, F = [], []
    for i in range(d):
        for j in range(i, d):
            rows.append(({0: E(d, i, j)}, A[i, j]))
            F.append([1.0 if i == j else 0.0])
    return make([d], rows, [np.zeros((d, d))], np.array(F), [-1.0]), -float(np.linalg.eigvalsh(A)[0])


def p_amgm():
    # min a + b  s.t. [[a, 1/2], [1/2, b]] >= 0  ->  2 sqrt(ab) >= 1
    return make([2], [({0: E(2, 0, 1)}, 0.5)], [np.eye(2)]), 1.0


def p_free_offdiag():
    # min x  s.t. [[1, x], [x, 1]] >= 0  ->  -1
    rows = [({0: E(2, 0, 0)}, 1.0), ({0: E(2, 1, 1)}, 1.0), ({0: E(2, 0, 1)}, 0.0)]
    F = np.array([[0.0], [0.0], [-1.0]])
    return make([2], rows, [np.zeros((2, 2))], F, [1.0]), -1.0


def p_theta(n, edges):
    # Lovasz theta: max <J, X>  s.t. trace X = 1, X_ij = 0 on edges
    rows = [({0: np.eye(n)}, 1.0)] + [({0: E(n, i, j)}, 0.0) for i, j in edges]
    return make([n], rows, [-np.ones((n, n))])


def theta_odd_cycle(n):
    c = np.cos(np.pi / n)
    return n * c / (1 + c)


def p_two_blocks():
    C = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 1.0]])
    rows = [
        ({0: E(2, 0, 1)}, 1.0),
        ({0: E(2, 0, 0) - E(2, 1, 1)}, 0.0),
        ({1: np.eye(3)}, 1.0),
    ]
    return make([2, 3], rows, [E(2, 0, 0), C]), 1.0 + float(np.linalg.eigvalsh(C)[0])


def p_chain(a, b, c1, c2):
    # min c1 x1 + c2 x2  s.t. [[x1, a, 0], [a, x2, b], [0, b, x1]] >= 0
    rows = [
        ({0: E(3, 0, 0) - E(3, 2, 2)}, 0.0),
        ({0: E(3, 0, 1)}, a),
        ({0: E(3, 0, 2)}, 0.0),
        ({0: E(3, 1, 2)}, b),
    ]
    C = np.diag([c1, c2, 0.0])
    prob = make([3], rows, [C])

    def M(x):
        return np.array([[x[0], a, 0], [a, x[1], b], [0, b, x[0]]])

    # x2 enters with a PSD coefficient, so feasibility in x2 is upward closed
    def value(x1):
        return c1 * x1 + c2 * lowest_feasible(lambda x2: psd(M([x1, x2])), 0.0, 1e3)

    oracle = grid_min(lambda x: value(x[0]), lambda x: x[0] > 0, [0.0], [20.0])
    return prob, oracle, 2 * np.sqrt(c1 * c2 * (a * a + b * b))


def p_interval():
    # min y  s.t. [[1 + y, 1], [1, 2 - y]] >= 0  (y free)
    rows = [({0: E(2, 0, 0)}, 1.0), ({0: E(2, 1, 1)}, 2.0), ({0: E(2, 0, 1)}, 1.0)]
    F = np.array([[-1.0], [1.0], [0.0]])
    prob = make([2], rows, [np.zeros((2, 2))], F, [1.0])
    M = lambda y: np.array([[1 + y[0], 1.0], [1.0, 2 - y[0]]])
    return prob, grid_min(lambda y: y[0], lambda y: psd(M(y)), [-3.0], [3.0])


def _random_sym(seed, d):
    G = np.random.default_rng(seed).normal(size=(d, d))
    return (G + G.T) / 2


def oracle_suite():
    cases = []
    cases.append(("arrow-1", *p_arrow(1.0)))
    cases.append(("arrow-2.5", *p_arrow(2.5)))
    for d in (2, 3, 4, 5):
        cases.append((f"min-eig-{d}", *p_min_eig(_random_sym(d, d))))
    for d in (3, 4):
        cases.append((f"max-shift-{d}", *p_max_shift(_random_sym(10 + d, d))))
    cases.append(("am-gm", *p_amgm()))
    cases.append(("free-offdiag", *p_free_offdiag()))
    cases.append(("theta-C5", p_theta(5, [(i, (i + 1) % 5) for i in range(5)]), -np.sqrt(5.0)))
    cases.append(("theta-C7", p_theta(7, [(i, (i + 1) % 7) for i in range(7)]), -theta_odd_cycle(7)))
    cases.append(("theta-K4", p_theta(4, [(i, j) for i in range(4) for j in range(i + 1, 4)]), -1.0))
    cases.append(("two-blocks", *p_two_blocks()))
    rng = np.random.default_rng(7)
    for k in range(5):
        a, b = rng.uniform(0.2, 1.5, 2)
        c1, c2 = rng.uniform(0.5, 2.0, 2)
        prob, oracle, _ = p_chain(a, b, c1, c2)
        cases.append((f"chain-{k}", prob, oracle))
    cases.append(("interval", *p_interval()))
    return cases


SUITE = oracle_suite()


def test_suite_has_twenty_problems():
    assert len(SUITE) == 20


def test_grid_oracle_agrees_with_closed_form():
    # the brute-force oracle is itself checked against the analytic optimum
    _, oracle, exact = p_chain(0.7, 1.1, 1.3, 0.6)
    assert abs(oracle - exact) < 1e-8
    _, oracle = p_interval()
    assert abs(oracle - (1 - np.sqrt(5)) / 2) < 1e-8


@pytest.mark.parametrize("name,prob,opt", SUITE, ids=[c[0] for c in SUITE])
def test_oracle_suite(name, prob, opt):
    sol = solve(prob)
    assert sol.status == "Optimal", sol.message
    assert abs(sol.pobj - opt) <= 1e-6
    for X in sol.x_blocks:
        assert psd_project_check(X)[0]
    assert sol.pobj >= sol.dobj - 1e-6  # weak duality


# ---------------------------------------------------------------------------
# status reporting


def test_fixed_one_by_one_block():
    sol = solve(make([1], [({0: np.eye(1)}, 1.0)], [np.zeros((1, 1))]))
    assert sol.status == "Optimal"
    assert sol.x_blocks[0][0, 0] == pytest.approx(1.0, abs=1e-7)


def test_zero_row_with_nonzero_rhs_is_infeasible():
    sol = solve(make([1], [({0: np.zeros((1, 1))}, 1.0)], [np.zeros((1, 1))]))
    assert sol.status == "Infeasible"


def test_infeasible_lmi():
    # X >= 0 with X11 = -1
    sol = solve(make([2], [({0: E(2, 0, 0)}, -1.0)], [np.eye(2)]))
    assert sol.status == "Infeasible"


def test_unbounded_free_direction():
    # min y with y free and X11 + y = 1: y -> -infinity
    sol = solve(make([1], [({0: np.eye(1)}, 1.0)], [np.zeros((1, 1))], np.array([[1.0]]), [1.0]))
    assert sol.status == "Unbounded"


def test_max_iters_reported():
    prob, _ = p_arrow(1.0)
    assert solve(prob, SdpOptions(max_iters=2)).status == "MaxIters"


def test_residuals_within_tolerance():
    prob, _ = p_min_eig(_random_sym(5, 5))
    sol = solve(prob)
    r = prob.apply_A(sol.x_blocks, sol.y_free if sol.y_free is not None else np.zeros(0)) - prob.b
    assert np.max(np.abs(r)) <= 1e-7 * (1 + np.max(np.abs(prob.b)))


def test_deterministic_iterates():
    prob, _ = p_chain(0.5, 0.9, 1.0, 1.0)[:2]
    a, b = solve(prob), solve(prob)
    assert a.iterations == b.iterations
    assert np.array_equal(a.x_blocks[0], b.x_blocks[0])


def test_pluggable_backend():
    calls = []

    def fake(problem, options):
        calls.append(problem.m)
        return ipm._HsdSolver(problem, options).run()

    prob, opt = p_arrow(1.0)
    ipm.set_backend(fake)
    try:
        assert solve(prob).pobj == pytest.approx(opt, abs=1e-6)
    finally:
        ipm.set_backend(None)
    assert calls == [prob.m]


# ---------------------------------------------------------------------------
# helpers


def test_extract_polynomial_examples():
    names = ["x1"]
    assert extract_polynomial(np.eye(2), [(0,), (1,)]) == parse("1 + x1^2", names)
    assert extract_polynomial(np.ones((2, 2)), [(0,), (1,)]) == parse("(1 + x1)^2", names)
    with pytest.raises(ValueError):
        extract_polynomial(np.eye(3), [(0,), (1,)])


def test_psd_project_check_examples():
    assert psd_project_check(np.eye(2)) == (True, 1.0)
    ok, lmin = psd_project_check(np.diag([1.0, -1.0]))
    assert not ok and lmin == -1.0


def test_dump_format():
    prob, _ = p_arrow(1.0)
    buf = io.StringIO()
    prob.dump(buf)
    text = buf.getvalue()
    assert text.startswith("blocks 2\nfree 0\nrows 2\n")
    assert "  0 (0,1) 0.5" in text and "objective" in text


def test_problem_shape_validation():
    with pytest.raises(ValueError):
        make([2], [({0: np.eye(2)}, 1.0)], [np.array([[0.0, 1.0], [0.0, 0.0]])])
