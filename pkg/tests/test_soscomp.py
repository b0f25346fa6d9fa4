import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrierforge.models import Box
from barrierforge.polyalg import PolyMatrix, Polynomial
from barrierforge.sdp import SdpProblem, solve
from barrierforge.soscomp import (AffExpr, AsymmetryError, DegreeBoundError, OddDegreeError, SosConstraint,
                                  compile_matrix_sos, compile_scalar_sos, poly_expr)

x = Polynomial.variable(1, 0)


def _solve_scalar(p, region=None, md=0):
    prob = SdpProblem()
    frag = compile_scalar_sos(prob, SosConstraint(poly_expr(p), region, md))
    return frag, solve(prob)


def test_square_has_unit_gram():
    frag, sol = _solve_scalar(x * x)
    assert sol.ok
    assert frag.basis == [(0,), (1,)]
    G = sol.entries[frag.gram.index]
    assert G[1, 1] == pytest.approx(1.0, abs=1e-7)
    assert np.allclose(G[0], 0, atol=1e-7)


def test_quartic_round_trip(rng):
    p = x ** 4 - 2 * x ** 2 + 1
    frag, sol = _solve_scalar(p)
    assert sol.ok
    rec = frag.reconstruct(sol.entries)
    pts = rng.uniform(-2, 2, (100, 1))
    assert np.max(np.abs(rec.evaluate(pts)[:, 0, 0] - p.evaluate(pts))) <= 1e-8
    assert frag.residual(sol.entries) <= 1e-7


def test_negative_square_infeasible():
    _, sol = _solve_scalar(-x * x)
    assert sol.status == "infeasible"


def test_odd_leading_degree_rejected():
    with pytest.raises(OddDegreeError):
        _solve_scalar(x ** 3 + x)


def test_box_multiplier_makes_nonnegative_on_interval():
    # 1 - x^2 >= 0 only on [-1, 1]
    frag, sol = _solve_scalar(1 - x * x, Box((-1.0,), (1.0,)), md=0)
    assert sol.ok
    assert frag.residual(sol.entries) <= 1e-7
    _, bad = _solve_scalar(1 - x * x)
    assert bad.status == "infeasible"


def test_constant_psd_matrix():
    M = np.diag([1.0, 2.0])
    prob = SdpProblem()
    frag = compile_matrix_sos(prob, SosConstraint(AffExpr.constant(M, 1), None, 0, "matrix"))
    sol = solve(prob)
    assert sol.ok
    G = sol.entries[frag.gram.index]
    assert np.allclose(G, M, atol=1e-7)


def _xy_matrix(off, diag):
    return poly_expr(PolyMatrix.from_entries([[diag[0], off], [off, diag[1]]]))


def test_diagonally_dominant_on_interval():
    one = Polynomial.constant(1, 1.0)
    expr = _xy_matrix(x, (one, one))
    # oracle: eigenvalues 1 +- x on a 1000-point grid
    g = np.linspace(-1, 1, 1000)
    assert np.min(1 - np.abs(g)) >= 0
    prob = SdpProblem()
    frag = compile_matrix_sos(prob, SosConstraint(expr, Box((-1.0,), (1.0,)), 0, "matrix"))
    sol = solve(prob)
    assert sol.ok
    assert frag.residual(sol.entries) <= 1e-7


def test_sign_indefinite_entry_infeasible():
    expr = _xy_matrix(Polynomial(1), (x, Polynomial.constant(1, 1.0)))
    prob = SdpProblem()
    compile_matrix_sos(prob, SosConstraint(expr, None, 0, "matrix"))
    assert solve(prob).status == "infeasible"


def test_asymmetric_matrix_rejected():
    M = poly_expr(PolyMatrix.from_entries([[Polynomial.constant(1, 1.0), x], [Polynomial(1), Polynomial.constant(1, 1.0)]]))
    with pytest.raises(AsymmetryError):
        compile_matrix_sos(SdpProblem(), SosConstraint(M, None, 0, "matrix"))


def test_matrix_degree_guard():
    one = Polynomial.constant(1, 1.0)
    expr = _xy_matrix(x ** 3, (one, one))
    with pytest.raises(DegreeBoundError):
        compile_matrix_sos(SdpProblem(), SosConstraint(expr, None, 0, "matrix"), max_degree=2)


def test_multiplier_degree_must_be_even():
    with pytest.raises(ValueError):
        SosConstraint(poly_expr(x * x), None, 1)


def test_degenerate_box_uses_free_multiplier():
    # x1^2 + x2^2 - 4 >= 0 on the point-like box {2} x {0}
    x1, x2 = Polynomial.variable(2, 0), Polynomial.variable(2, 1)
    prob = SdpProblem()
    frag = compile_scalar_sos(prob, SosConstraint(poly_expr(x1 * x1 + x2 * x2 - 4), Box((2.0, 0.0), (2.0, 0.0)), 2))
    sol = solve(prob)
    assert sol.ok and len(frag.eq) == 2
    assert frag.residual(sol.entries) <= 1e-7


def test_variable_count_is_deterministic():
    def count():
        prob = SdpProblem()
        compile_scalar_sos(prob, SosConstraint(poly_expr(x ** 4 + 1), Box((-1.0,), (1.0,)), 2))
        return prob.stats()
    assert count() == count()


@settings(max_examples=20, deadline=None)
@given(roots=st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=3), c=st.floats(0.0, 2.0))
def test_sum_of_squares_round_trip(roots, c):
    p = Polynomial.constant(1, 1.0)
    for r in roots:
        p = p * (x - r)
    p = p * p + c
    frag, sol = _solve_scalar(p)
    assert sol.ok
    # reconstruction error relative to the coefficient scale
    scale = max(abs(v) for v in p.terms.values())
    assert frag.residual(sol.entries) <= 1e-7 * max(1.0, scale)
