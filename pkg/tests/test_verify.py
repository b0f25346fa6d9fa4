import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from barrierforge.models import Region, build_benchmark, representative_subsystem
from barrierforge.verify import (
    FIXTURE_IDS,
    GridSpec,
    check_levels,
    fixture_network,
    load_fixture,
    quadratic_box_extrema,
    region_grid,
    sample_initial_states,
    simulate_network_closed_loop,
    verify_csc,
)


@pytest.mark.parametrize("bench", FIXTURE_IDS)
def test_fixture_level_conditions(bench):
    fix = load_fixture(bench)
    model = representative_subsystem(build_benchmark(bench, 3))
    reports = verify_csc(fix, model)
    assert [r.condition for r in reports] == ["6a", "6b"]
    for r in reports:
        assert r.passed, r.to_json()


@pytest.mark.parametrize("bench", FIXTURE_IDS)
def test_fixture_decay_without_coupling(bench):
    fix = load_fixture(bench)
    model = representative_subsystem(build_benchmark(bench, 3))
    (r,) = verify_csc(fix, model, grids=GridSpec(x_per_axis=20), conditions=("7@w=0",))
    assert r.condition == "7@w=0"
    assert r.worst_margin > 0


def test_fixture_coefficients():
    fix = load_fixture("duffing_binary")
    assert fix.S.terms == {(2, 0): 10.4512, (1, 1): -5.3106, (0, 2): 8.7529}
    np.testing.assert_allclose(fix.P, [[10.4512, -2.6553], [-2.6553, 8.7529]])
    star = load_fixture("spacecraft_star")
    assert star.network["eta"] == 2.56e5 and star.network["mu"] == 2.65e5
    assert len(fix.checksum) == 64


def test_unknown_fixture_raises():
    with pytest.raises(KeyError):
        load_fixture("van_der_pol")


def test_trivial_norm_certificate():
    cert = SimpleNamespace(eta=0.0, mu=4.0, n=2, storage=lambda x: np.sum(np.asarray(x) ** 2, axis=-1))
    model = SimpleNamespace(X0=Region.box([0, 0], [0, 0]), Xa=Region.box([2, -1], [3, 1]))
    a, b = check_levels(cert, model, GridSpec(x_per_axis=9))
    assert a.passed and a.worst_margin == 0.0
    assert b.passed and b.worst_margin == pytest.approx(0.0, abs=1e-15)
    cert.mu = 4.5
    assert not check_levels(cert, model, GridSpec(x_per_axis=9))[1].passed


def test_grid_extrema_agree_with_exact():
    fix = load_fixture("lorenz_ring")
    model = representative_subsystem(build_benchmark("lorenz_ring", 3))
    b = model.X0.boxes[0]
    pts = region_grid(model.X0, 50)
    exact_max = quadratic_box_extrema(fix.P, b.lower, b.upper)[1]
    assert fix.storage(pts).max() == pytest.approx(exact_max, rel=1e-6)
    a, _ = check_levels(fix, model)
    assert a.detail["extreme"] == pytest.approx(exact_max, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 3))
def test_box_extrema_bound_random_samples(seed, n):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n))
    P = L @ L.T + 0.1 * np.eye(n)
    lo = rng.uniform(-3, 1, size=n)
    hi = lo + rng.uniform(0.1, 3, size=n)
    vmin, vmax = quadratic_box_extrema(P, lo, hi)
    xs = rng.uniform(lo, hi, size=(2000, n))
    vals = np.einsum("ki,ij,kj->k", xs, P, xs)
    assert vals.min() >= vmin - 1e-9 and vals.max() <= vmax + 1e-9
    corners = np.array(np.meshgrid(*zip(lo, hi))).reshape(n, -1).T
    assert vmax == pytest.approx(np.einsum("ki,ij,kj->k", corners, P, corners).max(), rel=1e-12)


def test_report_serializes():
    fix = load_fixture("chen_line")
    model = representative_subsystem(build_benchmark("chen_line", 3))
    r = verify_csc(fix, model, GridSpec(x_per_axis=10))[0]
    data = json.loads(json.dumps(r.to_json()))
    assert data["verdict"] == "pass" and data["samples"] == 1000


def test_origin_stays_at_origin():
    net = build_benchmark("duffing_binary", 3)
    cbc = fixture_network(load_fixture("duffing_binary"), 3)
    rep = simulate_network_closed_loop(net, cbc, np.zeros((1, 3, 2)), horizon=0.05, dt=1e-3)
    assert rep.max_B == 0.0 and rep.unsafe_count == 0
    assert rep.decay_fraction == 1.0


def test_short_closed_loop_run_and_csv(tmp_path):
    net = build_benchmark("duffing_binary", 3)
    cbc = fixture_network(load_fixture("duffing_binary"), 3)
    x0 = sample_initial_states(net, 8, seed=3)
    rep = simulate_network_closed_loop(net, cbc, x0, horizon=0.5, dt=1e-3, dump_every=50, dump_samples=(0, 1))
    assert rep.unsafe_count == 0
    assert rep.max_B <= cbc.eta
    rep.to_csv(tmp_path / "safety.csv")
    rep.dump_csv(tmp_path / "traj.csv")
    rows = list(csv.DictReader((tmp_path / "safety.csv").open()))
    assert len(rows) == 8 and set(rows[0]) >= {"sample_id", "unsafe_entered", "max_B"}
    traj = list(csv.reader((tmp_path / "traj.csv").open()))
    assert traj[0] == ["t", "sample_id", "subsystem", "x1", "x2", "B"]
    assert len(traj) - 1 == 11 * 2 * 3


def test_simulation_is_deterministic():
    net = build_benchmark("duffing_binary", 3)
    cbc = fixture_network(load_fixture("duffing_binary"), 3)
    x0 = sample_initial_states(net, 4, seed=9)
    np.testing.assert_array_equal(x0, sample_initial_states(net, 4, seed=9))
    a = simulate_network_closed_loop(net, cbc, x0, horizon=0.2)
    b = simulate_network_closed_loop(net, cbc, x0, horizon=0.2)
    assert a.rows == b.rows


def test_initial_states_outside_region_rejected():
    net = build_benchmark("duffing_binary", 3)
    cbc = fixture_network(load_fixture("duffing_binary"), 3)
    with pytest.raises(ValueError):
        simulate_network_closed_loop(net, cbc, np.full((1, 3, 2), 1e3), horizon=0.01)


def test_open_loop_lorenz_reaches_unsafe_set():
    net = build_benchmark("lorenz_ring", 3)
    cbc = fixture_network(load_fixture("lorenz_ring"), 3)
    x0 = sample_initial_states(net, 5, seed=0)
    rep = simulate_network_closed_loop(net, cbc, x0, horizon=2.0, open_loop=True, on_divergence="drop")
    assert rep.unsafe_count >= 1
