import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrierforge.models import BENCHMARKS, Box, Region, Topology, build_benchmark, make_topology


def test_lorenz_fully_subsystem_data():
    net = build_benchmark("lorenz_fully", 4)
    s = net.subsystems[0]
    assert np.array_equal(s.D, -1e-5 * np.eye(3))
    assert s.X.boxes[0] == Box((-20,) * 3, (20,) * 3)
    assert s.X0.boxes[0] == Box((-3,) * 3, (3,) * 3)


def test_duffing_second_row():
    s = build_benchmark("duffing_binary", 7).subsystems[0]
    col = {m: r for r, m in enumerate(s.dictionary.entries)}
    row = s.A[1]
    assert (row[col[(1, 0)]], row[col[(0, 1)]], row[col[(3, 0)]]) == (2.0, -0.5, -0.01)
    assert np.count_nonzero(row) == 3


def test_chen_line_coupling():
    net = build_benchmark("chen_line", 3)
    M = net.topology.dense()
    assert np.all(M[:3] == 0)
    x = np.arange(9.0)
    w = net.topology.matvec(x).reshape(3, 3)
    assert np.array_equal(w[1], x[:3]) and np.array_equal(w[2], x[3:6])
    assert np.array_equal(net.subsystems[1].D, -0.005 * np.eye(3))


def test_binary_requires_full_tree():
    with pytest.raises(ValueError):
        build_benchmark("duffing_binary", 6)


def test_spacecraft_needs_inertias():
    with pytest.raises(ValueError):
        build_benchmark("spacecraft_binary", 3, {"inertias": [1.0, 2.0]})


def test_line_two_nodes():
    top = make_topology("line", 2, 1)
    assert np.array_equal(top.matvec(np.array([3.0, 5.0])), [0.0, 3.0])


def test_star_three_nodes():
    top = make_topology("star", 3, 2)
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert np.array_equal(top.matvec(x), [0, 0, 1, 2, 1, 2])


def test_fully_matches_dense(rng):
    top = make_topology("fully", 3, 3)
    dense = np.kron(np.ones((3, 3)) - np.eye(3), np.eye(3))
    x = rng.standard_normal(9)
    assert np.max(np.abs(top.matvec(x) - dense @ x)) <= 1e-14
    assert np.max(np.abs(top.rmatvec(x) - dense.T @ x)) <= 1e-14


def test_matvec_dimension_mismatch():
    with pytest.raises(ValueError):
        make_topology("ring", 3, 2).matvec(np.ones(5))


@pytest.mark.parametrize("kind,N,expected", [("ring", 6, 6), ("line", 6, 5), ("star", 6, 5), ("binary", 7, 6),
                                             ("fully", 5, 20)])
def test_block_counts(kind, N, expected):
    top = make_topology(kind, N, 2)
    assert top.nnz_blocks == expected
    assert np.all(np.diag(top.scalar_pattern.toarray()) == 0)


@pytest.mark.parametrize("name", sorted(BENCHMARKS))
def test_network_rhs_matches_stacked_subsystems(name, rng):
    N = 7 if BENCHMARKS[name]["topology"] == "binary" else 4
    net = build_benchmark(name, N)
    x = rng.uniform(-2, 2, (N, net.n))
    u = rng.uniform(-1, 1, (N, net.m))
    w = net.topology.matvec(x.ravel()).reshape(N, net.n)
    stacked = np.concatenate([s.rhs(x[i], u[i], w[i]) for i, s in enumerate(net.subsystems)])
    assert np.max(np.abs(net.rhs(x.ravel(), u.ravel()) - stacked)) <= 1e-12 * max(1, np.abs(stacked).max())


def test_public_handle_hides_drift():
    s = build_benchmark("duffing_binary", 3).subsystems[0]
    h = s.public()
    assert not hasattr(h, "A") and not hasattr(h, "B")
    assert h.n == 2 and h.m == 2


def test_region_membership_matches_polynomial_description(rng):
    reg = Region([((-1, -2), (1, 0.5)), ((2, -1), (3, 1))])
    pts = rng.uniform(-4, 4, (10000, 2))
    by_poly = np.zeros(len(pts), dtype=bool)
    for b in reg.boxes:
        vals = np.stack([p.evaluate(pts) for p in b.constraint_polys()], axis=1)
        by_poly |= np.all(vals >= 0, axis=1)
    assert np.array_equal(by_poly, reg.contains(pts))


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        Box((1.0,), (0.0,))


def test_topology_json_round_trip():
    top = make_topology("binary", 15, 2)
    again = Topology.from_json(top.to_json())
    assert np.array_equal(again.dense(), top.dense())


@settings(max_examples=25, deadline=None)
@given(N=st.integers(2, 9), perm_seed=st.integers(0, 1000))
def test_permuted_topology_is_conjugate(N, perm_seed):
    top = make_topology("ring", N, 2)
    perm = np.random.default_rng(perm_seed).permutation(N)
    P = np.kron(np.eye(N)[perm], np.eye(2))
    assert np.allclose(top.permuted(perm).dense(), P.T @ top.dense() @ P)
