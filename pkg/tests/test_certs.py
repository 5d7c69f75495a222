import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clfcbf.alternate import step1, step2
from clfcbf.certs import (
    ControllerCaps,
    DegreeSpec,
    ProblemSpec,
    SpecError,
    build_step1_program,
    build_step2_program,
    c1_value,
    c2_value,
    cbf_constraint,
    clf_constraint,
    containment_constraint,
    initial_controller,
    s1_positivity,
    sos_half_basis,
)
from clfcbf.cli import resolve_problem
from clfcbf.fileio import load_problem
from clfcbf.poly import Polynomial, derivative, evaluate_many, parse
from clfcbf.soscomp import BilinearError, SosProgram, monomial_basis

X = ["x"]


def P(text, names=X):
    return parse(text, names)


def fixed(pp):
    """A ParamPolynomial without decision variables, as a plain polynomial."""
    return pp.substitute(np.zeros(0))


def is_sos(poly):
    prog = SosProgram(poly.nvars)
    degs = [sum(m) for m in poly.terms] or [0]
    prog.assert_sos(poly, monomial_basis(poly.nvars, (max(degs) + 1) // 2))
    return prog.solve().status == "Optimal"


def toy_spec(**kw):
    """Scalar integrator on |x| <= 1 inside |x| <= 2."""
    args = dict(
        varnames=X, f=[P("0")], G=[[P("1")]], w=[P("x^2 - 1")], r=P("x^2 - 4"),
        centers=[((0.0,), -1.0)], l=P("x^2"),
        degrees={"V": DegreeSpec(4, (2, 4)), "B": DegreeSpec(2, (0, 2)), "s2": DegreeSpec(2),
                 "s3": DegreeSpec(2), "s4": DegreeSpec(2), "p": DegreeSpec(3)},
    )
    args.update(kw)
    return ProblemSpec(**args)


# -- constraint polynomials -------------------------------------------------


def test_clf_constraint_examples():
    one, f, G, V, l = P("1"), [P("0")], [[P("1")]], P("x^2"), P("x^2")
    good = fixed(clf_constraint(V, one, [P("-x^3")], f, G, l))
    assert good == P("x^4") and is_sos(good)
    bad = fixed(clf_constraint(V, one, [P("x^3")], f, G, l))
    assert bad == P("-3*x^4") and not is_sos(bad)
    # V = 0 leaves -l^2
    assert not is_sos(fixed(clf_constraint(P("0"), one, [P("-x^3")], f, G, l)))


def test_clf_constraint_with_region_multiplier():
    got = fixed(clf_constraint(P("x^2"), P("1"), [P("-x")], [P("0")], [[P("1")]], P("x^2"), P("1"), P("x^2 - 4")))
    assert got == P("-x^4 + 3*x^2 - 4")


def test_cbf_constraint_example():
    got = fixed(cbf_constraint(P("x^2 - 1"), P("1"), [P("-x^3")], P("2*x^2"), [P("0")], [[P("1")]]))
    assert got == P("2*x^2") and is_sos(got)


def test_cbf_constraint_slack_shifts_constant():
    base = fixed(cbf_constraint(P("-x^2 - 1"), P("1"), [P("0")], P("1"), [P("0")], [[P("1")]]))
    assert base == P("x^2 + 1")
    from clfcbf.soscomp import as_param

    shifted = fixed(cbf_constraint(P("-x^2 - 1"), P("1"), [P("0")], P("1"), [P("0")], [[P("1")]],
                                   eps=as_param(P("-2"))))
    assert shifted == P("x^2 - 1") and not is_sos(shifted)


def test_containment_examples():
    w = P("x^2 - 1")
    assert fixed(containment_constraint(w, P("1"), w)).is_zero()
    assert fixed(containment_constraint(w * 2.0, P("2"), w)).is_zero()
    assert fixed(containment_constraint(w - 1.0, P("1"), w)) == P("-1")


def test_s1_positivity_examples():
    assert fixed(s1_positivity(P("1"), 1e-3)) == P("0.999")
    assert fixed(s1_positivity(P("x^2"), 1e-3)) == P("x^2 - 0.001")
    assert not is_sos(fixed(s1_positivity(P("x^2"), 1e-3)))


def test_bilinear_unknowns_rejected():
    prog = SosProgram(1)
    V = prog.new_poly_var([(2,)])
    p = prog.new_poly_var([(1,)])
    with pytest.raises(BilinearError):
        clf_constraint(V, P("1"), [p], [P("0")], [[P("1")]], P("x^2"))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_constraint_matches_pointwise_formula(seed):
    # -grad V . (s1 f + G p) - l^2 + s2 r, evaluated directly at random points
    rng = np.random.default_rng(seed)
    names = ["x1", "x2"]
    rnd = lambda deg: sum((float(c) * Polynomial(2, {m: 1.0}) for c, m in
                           zip(rng.normal(size=10), monomial_basis(2, deg))), Polynomial.zero(2))
    V, s1, s2, p, r = rnd(2), rnd(2), rnd(2), [rnd(1)], parse("x1^2 + x2^2 - 1", names)
    f, G, l = [rnd(1), rnd(1)], [[rnd(1)], [rnd(0)]], parse("x1^2 + x2^2", names)
    got = fixed(clf_constraint(V, s1, p, f, G, l, s2, r))
    pts = rng.uniform(-1, 1, (20, 2))
    for x in pts:
        gV = np.array([derivative(V, 0)(x), derivative(V, 1)(x)])
        fx = np.array([s1(x) * f[i](x) + G[i][0](x) * p[0](x) for i in range(2)])
        want = -gV @ fx - l(x) ** 2 + s2(x) * r(x)
        assert got(x) == pytest.approx(want, rel=1e-9, abs=1e-9)


# -- costs ------------------------------------------------------------------


def test_c2_for_converter_centers():
    spec, _ = load_problem(resolve_problem("powerconverter"))
    xc = np.array([-0.3, 0.0, 0.0])
    w1 = (xc[0] + 0.3) ** 2 + (xc[1] / 20) ** 2 + (xc[2] / 20) ** 2 - 0.25
    w2 = (xc[0] / 20) ** 2 + xc[1] ** 2 + xc[2] ** 2 - 1.44
    want = (w1 + 10.0) ** 2 + (w2 + 10.0) ** 2
    assert c2_value(spec.w, spec) == pytest.approx(want, rel=1e-14)


def test_c1_is_trace_of_diagonal_split():
    spec = toy_spec()
    # B = x^2 - 1 = [1 x] diag(-1, 1) [1 x]': trace 0
    assert c1_value([P("x^2 - 1")], spec) == pytest.approx(0.0)
    assert c1_value([P("3*x^2 + 2")], spec) == pytest.approx(5.0)
    # centered coordinates: (x - 1)^2 around center 1 has trace 1
    spec = toy_spec(centers=[((1.0,), -1.0)])
    assert c1_value([P("(x - 1)^2")], spec) == pytest.approx(1.0)


# -- spec validation --------------------------------------------------------


def test_validate_accepts_toy():
    assert toy_spec().validate() == []


def test_validate_rejects_bad_inputs():
    with pytest.raises(SpecError):
        toy_spec(l=P("x^2 + 1")).validate()
    with pytest.raises(SpecError):
        toy_spec(w=[P("x^3 - 1")]).validate()
    with pytest.raises(SpecError):
        toy_spec(centers=[]).validate()
    with pytest.raises(SpecError):
        toy_spec(G=[[]]).validate()
    names = ["x1", "x2"]
    with pytest.raises(SpecError):
        ProblemSpec(names, [parse("0", names)] * 2, [[parse("1", names)]] * 2,
                    [parse("x1^2 - x2^2 - 1", names)], parse("x1^2 + x2^2 - 4", names),
                    [((0, 0), -1.0)]).validate()


def test_validate_warns_when_allowable_leaves_region():
    warnings = toy_spec(r=P("x^2 - 0.25")).validate()
    assert len(warnings) == 1 and "operating region" in warnings[0]


# -- programs ---------------------------------------------------------------


def test_sos_half_basis():
    assert sos_half_basis(1, DegreeSpec(4, (2, 4))) == [(1,), (2,)]
    assert sos_half_basis(2, DegreeSpec(2)) == monomial_basis(2, 1)


def test_converter_program_sizes():
    spec, _ = load_problem(resolve_problem("powerconverter"))
    s1, p, pm1 = initial_controller(spec)
    s = build_step1_program(spec, s1, p, pm1).prog.stats()
    assert s["variables"] == 337 and s["constraints"] == 5188
    caps = ControllerCaps.from_initial(spec, s1, p, pm1)
    V = parse("x1^2 + x2^2 + x3^2", spec.varnames)
    s = build_step2_program(spec, V, spec.w, s1, caps, pm1).prog.stats()
    assert s["variables"] == 354 and s["constraints"] == 4893


def _sampled_nonneg(poly, lo=-2.0, hi=2.0, n=1, N=2000):
    X = np.random.default_rng(0).uniform(lo, hi, (N, n))
    return evaluate_many(poly, X).min()


def test_step1_on_toy():
    spec = toy_spec()
    res = step1(spec, P("1"), [P("-x^3")], [P("2*x^2")])
    assert res.status == "Optimal"
    assert abs(res.V(np.zeros(1))) < 1e-9
    B = res.B[0]
    assert B(np.zeros(1)) < 0
    # every certificate polynomial is nonnegative on samples
    clf = fixed(clf_constraint(res.V, P("1"), [P("-x^3")], spec.f, spec.G, spec.l, res.s2, spec.r))
    cbf = fixed(cbf_constraint(B, P("1"), [P("-x^3")], P("2*x^2"), spec.f, spec.G, res.s3[0], spec.r))
    con = fixed(containment_constraint(B, res.s4[0], spec.w[0]))
    for q in (res.V, res.s2, res.s3[0], res.s4[0], clf, cbf, con):
        assert _sampled_nonneg(q) > -1e-6
    # {B <= 0} sits inside {w <= 0}
    xs = np.linspace(-2, 2, 4001)[:, None]
    inside = evaluate_many(B, xs) <= 0
    assert np.all(np.abs(xs[inside, 0]) <= 1 + 1e-3)


def test_step1_without_barriers():
    spec = toy_spec(w=[], centers=[])
    res = step1(spec, P("1"), [P("-x^3")], [])
    assert res.status == "Optimal" and res.B == [] and res.cost == 0.0


def test_step2_on_toy():
    spec = toy_spec()
    s1, p, pm1 = P("1"), [P("-x^3")], [P("2*x^2")]
    caps = ControllerCaps.from_initial(spec, s1, p, pm1)
    res = step2(spec, P("x^2"), [P("x^2 - 1")], s1, caps=caps, pm1_prev=pm1)
    assert res.status == "Optimal"
    assert res.eps[0] <= 1e-7
    assert res.s1(np.zeros(1)) == pytest.approx(1.0, abs=1e-7)
    # the recovered controller still decreases V = x^2 away from 0
    xs = np.linspace(-2, 2, 401)
    vdot = np.array([2 * x * res.p[0](np.array([x])) / res.s1(np.array([x])) for x in xs])
    assert np.all(vdot[np.abs(xs) > 1e-2] < 0)


def test_step2_skips_trivial_barrier():
    spec = toy_spec()
    res = step2(spec, P("x^2"), [Polynomial.zero(1)], P("1"), pm1_prev=[P("3")])
    assert res.status == "Optimal"
    assert res.pm1[0] == P("3") and res.eps == [0.0]
    assert "cbf_1" in res.grams and not res.grams["cbf_1"][1].any()


def test_infeasible_step1_is_reported():
    # no input authority on an unstable state
    spec = toy_spec(f=[P("x")], G=[[P("0")]])
    res = step1(spec, P("1"), [P("0")], [P("1")])
    assert res.status == "Infeasible" and res.diagnosis
