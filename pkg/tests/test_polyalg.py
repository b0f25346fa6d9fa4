from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrierforge.models import LORENZ_ORDER, benchmark_dictionary
from barrierforge.polyalg import (Dictionary, PolyMatrix, Polynomial, SingularThetaError, build_dictionary,
                                  dictionary_size, eval_monomials, factorize_theta, monomials_up_to,
                                  theta_left_pinv)


def test_lorenz_dictionary_with_override():
    d = build_dictionary(3, 2, LORENZ_ORDER)
    assert d.M == 9
    assert [list(m) for m in d.entries] == LORENZ_ORDER


def test_single_variable_dictionary():
    d = build_dictionary(1, 1)
    assert d.M == 1 and d.entries == ((1,),)


def test_duffing_dictionary_size():
    assert build_dictionary(2, 3).M == 9


def test_override_must_be_permutation():
    with pytest.raises(ValueError):
        build_dictionary(2, 2, [[1, 0], [0, 1], [1, 1]])


def test_dictionary_rejects_constant_and_missing_linear_block():
    with pytest.raises(ValueError):
        Dictionary([(0, 0), (1, 0), (0, 1)])
    with pytest.raises(ValueError):
        Dictionary([(1, 0), (1, 1)])


@pytest.mark.parametrize("n,d", [(1, 1), (1, 4), (2, 3), (3, 2), (4, 3)])
def test_dictionary_cardinality(n, d):
    assert build_dictionary(n, d).M == comb(n + d, d) - 1 == dictionary_size(n, d)


def test_lorenz_theta_layout():
    d, th = benchmark_dictionary("lorenz_fully")
    row = d.entries.index((1, 0, 1))
    assert th.entry(row, 0) == Polynomial.variable(3, 2)
    assert th.entry(row, 1).is_zero() and th.entry(row, 2).is_zero()


def test_theta_identity_for_linear_dictionary():
    th = factorize_theta(build_dictionary(2, 1))
    assert np.array_equal(th.evaluate(np.array([0.3, -2.0])), np.eye(2))


def test_theta_rejects_bad_divisor():
    with pytest.raises(ValueError):
        factorize_theta(Dictionary([(1, 0), (0, 1), (2, 0)]), [0, 1, 1])


@pytest.mark.parametrize("name", ["lorenz_fully", "spacecraft_binary", "duffing_binary"])
def test_theta_factorization_identity(name, rng):
    d, th = benchmark_dictionary(name)
    x = rng.uniform(-3, 3, (1000, d.n))
    lhs = np.einsum("kmn,kn->km", th.evaluate(x), x)
    # oracle: monomials evaluated with plain powers
    R = np.prod(x[:, None, :] ** np.array(d.entries)[None], axis=2)
    assert np.max(np.abs(lhs - R)) <= 1e-12 * max(1.0, np.abs(R).max())


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 3), dmax=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_theta_identity_random_dictionary(n, dmax, seed):
    r = np.random.default_rng(seed)
    full = monomials_up_to(n, dmax, dmin=1)
    extra = [m for m in full if sum(m) > 1]
    keep = [m for m in extra if r.random() < 0.6]
    d = Dictionary([m for m in full if sum(m) == 1] + keep, n)
    th = factorize_theta(d)
    x = r.uniform(-2, 2, (50, n))
    lhs = np.einsum("kmn,kn->km", th.evaluate(x), x)
    assert np.allclose(lhs, d.evaluate(x), rtol=0, atol=1e-12 * 8 ** dmax)


def test_left_pinv_identity_rows():
    th = factorize_theta(build_dictionary(3, 1))
    assert np.allclose(theta_left_pinv(th, np.ones(3)), np.eye(3))


def test_left_pinv_lorenz_and_origin():
    d, th = benchmark_dictionary("lorenz_fully")
    for x in (np.ones(3), np.zeros(3)):
        pinv = theta_left_pinv(th, x)
        assert np.max(np.abs(pinv @ th.evaluate(x) - np.eye(3))) <= 1e-12
        # QR-free oracle
        T = th.evaluate(x)
        assert np.allclose(pinv, np.linalg.pinv(T), atol=1e-12)


def test_left_pinv_singular():
    th = PolyMatrix(2, 2, 2, {(1, 0): np.eye(2)})
    with pytest.raises(SingularThetaError):
        theta_left_pinv(th, np.zeros(2))


polys = st.dictionaries(st.tuples(st.integers(0, 3), st.integers(0, 3)),
                        st.floats(-5, 5, allow_nan=False).filter(lambda v: abs(v) > 1e-3), max_size=5)


@settings(max_examples=60, deadline=None)
@given(a=polys, b=polys)
def test_polynomial_ring_ops_match_evaluation(a, b):
    p, q = Polynomial(2, a), Polynomial(2, b)
    x = np.random.default_rng(0).uniform(-1.5, 1.5, (20, 2))
    pv, qv = p.evaluate(x), q.evaluate(x)
    scale = 1.0 + np.abs(pv * qv) + np.abs(pv) + np.abs(qv)
    assert np.all(np.abs((p * q).evaluate(x) - pv * qv) <= 1e-10 * scale)
    assert np.all(np.abs((p + q).evaluate(x) - (pv + qv)) <= 1e-10 * scale)
    assert (p * q).allclose(q * p) and (p + q).allclose(q + p)


def test_polynomial_drops_zero_terms():
    x = Polynomial.variable(1, 0)
    assert (x - x).is_zero() and (x - x).terms == {}


def test_polymatrix_product_and_transpose(rng):
    x, y = Polynomial.variable(2, 0), Polynomial.variable(2, 1)
    A = PolyMatrix.from_entries([[x, y * y], [Polynomial.constant(2, 2.0), x * y]])
    K = rng.standard_normal((3, 2))
    pts = rng.standard_normal((10, 2))
    lhs = (K @ A).evaluate(pts)
    assert np.allclose(lhs, np.einsum("ij,kjl->kil", K, A.evaluate(pts)))
    assert np.allclose((A @ A.T).evaluate(pts), A.evaluate(pts) @ np.transpose(A.evaluate(pts), (0, 2, 1)))
    assert PolyMatrix.from_json(2, A.to_json()).allclose(A)


def test_eval_monomials_broadcast():
    x = np.arange(12.0).reshape(2, 3, 2)
    out = eval_monomials(np.array([[1, 0], [2, 1]]), x)
    assert out.shape == (2, 3, 2)
    assert np.allclose(out[..., 1], x[..., 0] ** 2 * x[..., 1])
