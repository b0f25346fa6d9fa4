"""End-to-end acceptance checks, one per criterion, each printing a single verdict line."""

import json
import math
import time

import numpy as np
import pytest

from barrierforge import cli
from barrierforge.certsynth import compute_levels, synthesize_csc
from barrierforge.composer import assemble_cbc, check_composition
from barrierforge.datagen import NoiseSpec, collect_trajectory
from barrierforge.models import build_benchmark, representative_subsystem
from barrierforge.polyalg import Polynomial
from barrierforge.sdp import SdpProblem, solve
from barrierforge.soscomp import SosConstraint, compile_scalar_sos, poly_expr
from barrierforge.verify import (FIXTURE_IDS, fixture_network, load_fixture, sample_initial_states,
                                 simulate_network_closed_loop, verify_csc)

TIMES: dict = {}


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {k}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def duffing_synth():
    net = build_benchmark("duffing_binary", 7)
    model = representative_subsystem(net)
    t0 = time.perf_counter()
    rec = collect_trajectory(model, 18, 0.01, NoiseSpec(0.08), seed=0)
    cert = synthesize_csc(rec, model.public(), lam=0.99, pi=1.0)
    cert.eta, cert.mu = compute_levels(cert.P, model.X0, model.Xa)
    TIMES["synth"] = time.perf_counter() - t0
    return net, model, rec, cert


def test_criterion_1_data_identity(report, rng):
    t0 = time.perf_counter()
    model = representative_subsystem(build_benchmark("duffing_binary", 3))
    rec = collect_trajectory(model, 18, 0.01, NoiseSpec(0.08), seed=0)
    N0T = rec.N0T(model.dictionary)
    pinv = np.linalg.pinv(N0T)
    lhs_mat = rec.X1T - model.D @ rec.W0T - rec.hidden["Phi"]
    xs = rng.uniform(-2, 2, size=(1000, model.n))
    Th = model.theta.evaluate(xs)
    Q = np.einsum("tm,kmn->ktn", pinv, Th)
    F = np.einsum("ut,ktn->kun", rec.U0T, Q)
    lhs = np.einsum("it,ktn,kn->ki", lhs_mat, Q, xs)
    rhs = np.einsum("im,kmn,kn->ki", model.A, Th, xs) + np.einsum("iu,kun,kn->ki", model.B, F, xs)
    err = float(np.max(np.linalg.norm(lhs - rhs, axis=1)))
    dt = time.perf_counter() - t0
    report(1, err <= 1e-9 and dt < 5, f"max residual {err:.2e} (<= 1e-9), {dt:.2f}s (< 5s)")


def test_criterion_2_sos_round_trip(report, rng):
    t0 = time.perf_counter()
    x = Polynomial.variable(1, 0)
    p = x ** 4 - 2 * x ** 2 + 1
    prob = SdpProblem()
    frag = compile_scalar_sos(prob, SosConstraint(poly_expr(p)))
    sol = solve(prob)
    pts = rng.uniform(-3, 3, size=(100, 1))
    res = float(np.max(np.abs(frag.reconstruct(sol.entries).evaluate(pts)[:, 0, 0] - p.evaluate(pts))))
    prob2 = SdpProblem()
    compile_scalar_sos(prob2, SosConstraint(poly_expr(-(x * x))))
    bad = solve(prob2)
    dt = time.perf_counter() - t0
    ok = sol.ok and res <= 1e-8 and bad.status == "infeasible" and dt < 5
    report(2, ok, f"quartic {sol.status}, Gram residual {res:.2e}; -x^2 {bad.status}; {dt:.2f}s")


def test_criterion_3_synthesis_and_verification(report, duffing_synth):
    net, model, rec, cert = duffing_synth
    t0 = time.perf_counter()
    reports = verify_csc(cert, model)
    total = TIMES["synth"] + time.perf_counter() - t0
    TIMES["criterion3"] = total
    worst = {r.condition: r.worst_margin for r in reports}
    ok = set(worst) == {"6a", "6b", "7"} and min(worst.values()) >= -1e-6 and total <= 120
    report(3, ok, "worst margins " + ", ".join(f"{k}={v:.3g}" for k, v in worst.items())
           + f"; eta={cert.eta:.6g} mu={cert.mu:.6g}; {total:.1f}s (<= 120s)")


def test_criterion_4_composition(report, duffing_synth):
    net, _, _, cert = duffing_synth
    top = net.topology
    certs = [cert] * top.N
    t0 = time.perf_counter()
    chk = check_composition(top, certs)
    cbc = assemble_cbc(certs, chk, top) if chk.passes else None
    dt = time.perf_counter() - t0
    M = top.dense()
    I = np.eye(top.N)
    Z11, Z12, Z22 = (np.kron(I, getattr(cert, k)) for k in ("Z11", "Z12", "Z22"))
    dense = M.T @ Z11 @ M + M.T @ Z12 + Z12.T @ M + Z22
    oracle = float(np.linalg.eigvalsh(0.5 * (dense + dense.T))[-1])
    oracle_pass = oracle <= chk.psd_tol and chk.level_ok
    gap = abs(chk.lambda_max - oracle)
    ok = gap <= 1e-8 and oracle_pass == chk.passes and (cbc is None or cbc.mu > cbc.eta) and dt <= 10
    report(4, ok, f"lambda_max {chk.lambda_max:.10g} vs dense {oracle:.10g} (gap {gap:.1e}); "
           f"passes={chk.passes}; {'mu>eta' if cbc is not None and cbc.mu > cbc.eta else 'no cbc'}; {dt:.2f}s")


def test_criterion_5_fixtures(report):
    t0 = time.perf_counter()
    failures = []
    for name in FIXTURE_IDS:
        fix = load_fixture(name)
        model = representative_subsystem(build_benchmark(name, 3))
        for r in verify_csc(fix, model):
            if not r.passed:
                failures.append(f"{name}:{r.condition}")
    fix = load_fixture("lorenz_fully")
    a, b = verify_csc(fix, representative_subsystem(build_benchmark("lorenz_fully", 3)))
    example = a.detail["extreme"] <= 98.21 * 1.01 and b.detail["extreme"] >= 100.61 * 0.99
    dt = time.perf_counter() - t0
    ok = not failures and example and dt <= 60
    report(5, ok, f"{len(FIXTURE_IDS)} fixtures, failures {failures or 'none'}; lorenz_fully max {a.detail['extreme']:.4g}"
           f" min {b.detail['extreme']:.4g}; {dt:.1f}s")


def test_criterion_6_closed_loop_safety(report):
    net = build_benchmark("duffing_binary", 7)
    cbc = fixture_network(load_fixture("duffing_binary"), 7)
    x0 = sample_initial_states(net, 120, seed=0)
    rep = simulate_network_closed_loop(net, cbc, x0, horizon=20.0, dt=1e-3)
    ok = (rep.unsafe_count == 0 and rep.max_B <= cbc.eta * (1 + 1e-6) and rep.decay_fraction >= 0.999
          and rep.runtime <= 120)
    report(6, ok, f"unsafe {rep.unsafe_count}/120; max B {rep.max_B:.5g} <= eta {cbc.eta:.6g}; "
           f"decay fraction {rep.decay_fraction:.5f}; {rep.runtime:.1f}s")


def test_criterion_7_open_loop_violation(report):
    net = build_benchmark("lorenz_ring", 5)
    cbc = fixture_network(load_fixture("lorenz_ring"), 5)
    x0 = sample_initial_states(net, 120, seed=0)
    rep = simulate_network_closed_loop(net, cbc, x0, horizon=20.0, dt=1e-3, open_loop=True, on_divergence="mark")
    first = min((r["first_unsafe_time"] for r in rep.rows if r["unsafe_entered"]), default=math.inf)
    ok = rep.unsafe_count >= 1 and rep.runtime <= 60
    report(7, ok, f"{rep.unsafe_count}/120 trajectories enter the unsafe set, first at t={first:.3f}; "
           f"{rep.runtime:.1f}s")


def _gram_side(nstates: int, T: int, degree: int, internal: bool) -> int:
    s = nstates + T + (nstates if internal else 0)
    return math.comb(nstates + degree, degree) * s


def test_criterion_8_complexity(report, tmp_path):
    t0 = time.perf_counter()
    res = cli.run_bench([7, 63, 255, 1023], {}, tmp_path, cli.RunManifest(command="bench"))
    dt = time.perf_counter() - t0
    # leading-order prediction: one Gram block on N n states against N blocks on n states
    model = representative_subsystem(build_benchmark("duffing_binary", 3))
    n, M, T = model.n, model.dictionary.M, 18
    d = math.ceil(max(model.theta.degree, 2) / 2)
    k_sub = _gram_side(n, T, d, True)
    k_mono = _gram_side(3 * n, max(3 * T, 3 * M + 1), d, False)
    predicted = (k_mono * (k_mono + 1) / 2) / (3 * k_sub * (k_sub + 1) / 2)
    factor = res["monolithic_factor_N3"]
    ok = (res["compositional_r2"] >= 0.999 and res["time_growth"] <= 1.5 * res["size_growth"]
          and abs(factor / predicted - 1) <= 0.1 and res["monolithic_N3"] > res["per_subsystem_vars"] and dt <= 300)
    report(8, ok, f"R2 {res['compositional_r2']:.6f}; time growth {res['time_growth']:.2f} vs N growth "
           f"{res['size_growth']:.0f}; N=3 factor {factor:.2f} vs predicted {predicted:.2f}; {dt:.1f}s")


def test_criterion_9_determinism(report, tmp_path, duffing_synth):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"benchmark": "duffing_binary", "N": 7, "T": 18, "tau": 0.01, "phi_bar": 0.08,
                               "lambda": 0.99, "pi": 1.0, "seed": 0, "workers": 1}))
    t0 = time.perf_counter()
    codes = [cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / f"run{k}")]) for k in (0, 1)]
    dt = time.perf_counter() - t0
    files = sorted(p.name for p in (tmp_path / "run0").glob("cert_*.json"))
    same = bool(files) and all((tmp_path / "run0" / f).read_bytes() == (tmp_path / "run1" / f).read_bytes()
                               for f in files)
    budget = 2 * 120.0
    ratio = dt / TIMES["criterion3"] if "criterion3" in TIMES else float("nan")
    ok = codes == [0, 0] and same and dt <= budget
    report(9, ok, f"exit codes {codes}; {len(files)} certificate file(s) bit-identical: {same}; "
           f"{dt:.1f}s (<= {budget:.0f}s, {ratio:.2f}x measured criterion 3)")
