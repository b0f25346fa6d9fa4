import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrierforge.sdp import (SdpProblem, SdpSettings, SymmetryError, lambda_max_structured, smat, solve, svec)


def _trace_min_problem():
    p = SdpProblem()
    X = p.add_psd("X", 3)
    p.add_equality([X.entry(0, 0)], [1.0], 1.0)
    p.set_objective([X.entry(i, i) for i in range(3)], [1.0] * 3)
    return p


def test_trace_minimization():
    sol = solve(_trace_min_problem())
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(1.0, abs=1e-7)
    E = np.zeros((3, 3))
    E[0, 0] = 1
    assert np.allclose(sol["X"], E, atol=1e-6)


def test_negative_diagonal_is_infeasible():
    p = SdpProblem()
    X = p.add_psd("X", 2)
    p.add_equality([X.entry(0, 0)], [1.0], -1.0)
    assert solve(p).status == "infeasible"


def _min_inner_product(C):
    k = C.shape[0]
    p = SdpProblem()
    X = p.add_psd("X", k)
    p.add_equality([X.entry(i, i) for i in range(k)], [1.0] * k, 1.0)
    cols, vals = [], []
    for i in range(k):
        for j in range(i, k):
            cols.append(X.entry(i, j))
            vals.append(C[i, j] if i == j else 2 * C[i, j])
    p.set_objective(cols, vals)
    return p


@pytest.mark.parametrize("backend", ["internal", "cvxopt"])
def test_min_inner_product_equals_smallest_eigenvalue(backend, rng):
    if backend == "cvxopt":
        pytest.importorskip("cvxopt")
    B = rng.standard_normal((3, 3))
    C = B @ B.T + 0.1 * np.eye(3)
    sol = solve(_min_inner_product(C), SdpSettings(backend=backend))
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(np.linalg.eigvalsh(C)[0], abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(k=st.integers(2, 6), seed=st.integers(0, 10**6))
def test_certified_solutions_pass_independent_checks(k, seed):
    r = np.random.default_rng(seed)
    B = r.standard_normal((k, k))
    C = B + B.T
    sol = solve(_min_inner_product(C))
    assert sol.ok
    A, b = _min_inner_product(C).equality_system()
    assert np.max(np.abs(A @ sol.entries - b)) <= 1e-7
    assert np.linalg.eigvalsh(sol["X"])[0] >= -1e-8
    assert sol.objective == pytest.approx(np.linalg.eigvalsh(C)[0], abs=1e-6)


def test_repeat_solves_agree(rng):
    B = rng.standard_normal((4, 4))
    p = _min_inner_product(B + B.T)
    a, b = solve(p), solve(p)
    assert abs(a.objective - b.objective) <= 1e-9


def test_mixed_cones():
    p = SdpProblem()
    X = p.add_psd("X", 2)
    a = p.add_nonneg("a", 2)
    f = p.add_free("f")
    p.add_equality([X.entry(0, 1)], [1.0], 1.0)
    p.add_equality([a[0], X.entry(0, 0)], [1.0, -1.0], 0.0)
    p.add_equality([f[0], a[1]], [1.0, 1.0], 3.0)
    p.set_objective([X.entry(0, 0), X.entry(1, 1), a[1]], [1.0, 1.0, 1.0])
    sol = solve(p)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(2.0, abs=1e-6)
    assert sol["f"][0] == pytest.approx(3.0, abs=1e-6)


def test_feasibility_without_objective():
    p = SdpProblem()
    X = p.add_psd("X", 3)
    p.add_equality([X.entry(i, i) for i in range(3)], [1.0] * 3, 1.0)
    p.add_equality([X.entry(0, 1)], [1.0], 0.3)
    sol = solve(p)
    assert sol.ok
    assert sol["X"][0, 1] == pytest.approx(0.3, abs=1e-7)
    assert np.linalg.eigvalsh(sol["X"])[0] >= -1e-8


def test_settings_json_round_trip():
    s = SdpSettings(max_iters=50, eig_tol=1e-7)
    assert SdpSettings.from_json(s.to_json()) == s


def test_dump_format(tmp_path):
    p = _trace_min_problem()
    path = tmp_path / "dump.txt"
    p.dump(path)
    lines = path.read_text().splitlines()
    assert lines[0].split()[:4] == ["0", "X", "0", "0"]
    assert any(line.startswith("0 rhs") for line in lines)
    assert sum(line.startswith("objective") for line in lines) == 3


def test_svec_round_trip(rng):
    B = rng.standard_normal((4, 4))
    S = B + B.T
    assert np.allclose(smat(svec(S), 4), S)
    assert svec(S) @ svec(S) == pytest.approx(np.sum(S * S))


def test_lambda_max_examples():
    assert lambda_max_structured(lambda v: -v, 100) == pytest.approx(-1.0, abs=1e-8)
    d = np.arange(1.0, 6.0)
    assert lambda_max_structured(lambda v: d * v, 5) == pytest.approx(5.0, abs=1e-8)


def test_lambda_max_matches_dense(rng):
    B = rng.standard_normal((80, 80))
    M = B + B.T
    assert lambda_max_structured(lambda v: M @ v, 80) == pytest.approx(np.linalg.eigvalsh(M)[-1], rel=1e-8)


def test_lambda_max_rejects_nonsymmetric():
    M = np.triu(np.ones((5, 5)))
    with pytest.raises(SymmetryError):
        lambda_max_structured(lambda v: M @ v, 5)


def test_lambda_max_deterministic(rng):
    B = rng.standard_normal((30, 30))
    M = B + B.T
    assert lambda_max_structured(lambda v: M @ v, 30) == lambda_max_structured(lambda v: M @ v, 30)
