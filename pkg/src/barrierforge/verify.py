"""Ground-truth checks of certificates against the simulator-side models."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .composer import BarrierCertificate, controller_poly
from .datagen import DivergenceError
from .models import NetworkModel, Region, SubsystemModel, make_topology
from .polyalg import PolyMatrix, Polynomial, eval_monomials

FIXTURE_IDS = ("lorenz_fully", "lorenz_ring", "spacecraft_binary", "spacecraft_star", "chen_line", "duffing_binary")


@dataclass
class VerificationReport:
    condition: str
    samples: int
    worst_margin: float
    argmin: list
    tol: float
    runtime: float
    seed: int = 0
    detail: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "pass" if self.worst_margin >= -self.tol else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> dict:
        return {"condition": self.condition, "samples": self.samples, "worst_margin": self.worst_margin,
                "argmin": self.argmin, "tol": self.tol, "verdict": self.verdict, "runtime": self.runtime,
                "seed": self.seed, **self.detail}


# ---------------------------------------------------------------------------
# fixtures


@dataclass
class FixtureCertificate:
    benchmark: str
    n: int
    S: Polynomial
    controllers: list
    eta_i: float
    mu_i: float
    network: dict
    checksum: str

    @property
    def P(self) -> np.ndarray:
        P = np.zeros((self.n, self.n))
        for mono, c in self.S.terms.items():
            idx = [k for k, e in enumerate(mono) for _ in range(e)]
            if len(idx) != 2:
                raise ValueError("storage function is not a quadratic form")
            i, j = idx
            if i == j:
                P[i, i] += c
            else:
                P[i, j] += c / 2
                P[j, i] += c / 2
        return P

    @property
    def eta(self) -> float:
        return self.eta_i

    @property
    def mu(self) -> float:
        return self.mu_i

    @property
    def lam(self) -> float:
        return float(self.network["lambda"])

    @property
    def m(self) -> int:
        return len(self.controllers)

    @property
    def controller_poly(self) -> PolyMatrix:
        return PolyMatrix.from_entries([[p] for p in self.controllers])

    def storage(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)


def _fixture_checksum(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def load_fixture(benchmark: str) -> FixtureCertificate:
    if benchmark not in FIXTURE_IDS:
        raise KeyError(f"unknown fixture {benchmark!r}; choose from {list(FIXTURE_IDS)}")
    raw = json.loads(resources.files("barrierforge").joinpath("data").joinpath(f"{benchmark}.json").read_text())
    body = {k: v for k, v in raw.items() if k != "checksum"}
    if _fixture_checksum(body) != raw["checksum"]:
        raise ValueError(f"fixture {benchmark} fails its checksum")
    n = int(raw["n"])
    S = Polynomial(n, {tuple(m): c for m, c in raw["S"]})
    ctrls = [Polynomial(n, {tuple(m): c for m, c in terms}) for terms in raw["controllers"]]
    return FixtureCertificate(benchmark=raw["benchmark"], n=n, S=S, controllers=ctrls, eta_i=float(raw["eta_i"]),
                              mu_i=float(raw["mu_i"]), network=dict(raw["network"]), checksum=raw["checksum"])


def fixture_network(fix: FixtureCertificate, N: int) -> BarrierCertificate:
    """Network certificate built from N copies of a bundled reference certificate on its benchmark topology."""
    from .models import BENCHMARKS

    top = make_topology(BENCHMARKS[fix.benchmark]["topology"], N, fix.n)
    return BarrierCertificate(certs=[fix] * N, topology=top, eta=N * fix.eta_i, mu=N * fix.mu_i, lam=fix.lam)


# ---------------------------------------------------------------------------
# grid checks


@dataclass
class GridSpec:
    x_per_axis: int = 50
    w_per_axis: int = 11
    chunk: int = 4096


def region_grid(region: Region, per_axis: int) -> np.ndarray:
    return np.vstack([b.grid(per_axis) for b in region.boxes])


def _report(cond, values, pts, tol, t0, **detail) -> VerificationReport:
    k = int(np.argmin(values))
    return VerificationReport(condition=cond, samples=int(values.size), worst_margin=float(values[k]),
                              argmin=[float(v) for v in np.atleast_1d(pts[k]).ravel()], tol=tol,
                              runtime=time.perf_counter() - t0, detail=detail)


def _local_controller(cert):
    poly = controller_poly(cert)
    mons = list(poly.coeffs) or [(0,) * poly.nvars]
    coef = np.stack([poly.coeffs.get(m, np.zeros((poly.rows, 1)))[:, 0] for m in mons])
    mons = np.array(mons)
    return lambda x: eval_monomials(mons, x) @ coef


def check_levels(cert, model: SubsystemModel, grids: GridSpec | None = None, slack: float = 0.0,
                 tol: float = 1e-6) -> list[VerificationReport]:
    """Initial-set bound max S <= eta and unsafe-set bound min S >= mu on grids.

    The accepted violation is ``tol + slack * |level|``.
    """
    g = grids or GridSpec()
    out = []
    t0 = time.perf_counter()
    pts = region_grid(model.X0, g.x_per_axis)
    margin = cert.eta - cert.storage(pts)
    out.append(_report("6a", margin, pts, tol + slack * abs(cert.eta), t0, level=cert.eta,
                       extreme=float(cert.eta - margin.min())))
    t0 = time.perf_counter()
    pts = region_grid(model.Xa, g.x_per_axis)
    margin = cert.storage(pts) - cert.mu
    out.append(_report("6b", margin, pts, tol + slack * abs(cert.mu), t0, level=cert.mu,
                       extreme=float(cert.mu + margin.min())))
    return out


def check_dissipation(cert, model: SubsystemModel, grids: GridSpec | None = None, tol: float = 1e-6,
                      zero_supply: bool = False) -> VerificationReport:
    """Lie-derivative inequality over an X grid with one u per x and w swept over a W grid.

    margin(x, w) = ([w;x]^T Z [w;x] - lam S(x) - dS/dt(x, u(x), w)) / (1 + |S(x)|).
    With ``zero_supply`` only w = 0 is used and the supply term is dropped.
    """
    g = grids or GridSpec()
    t0 = time.perf_counter()
    if cert.n != model.n:
        raise ValueError(f"certificate has n = {cert.n}, model has n = {model.n}")
    P = cert.P
    X = region_grid(model.X, g.x_per_axis)
    if zero_supply:
        Wg = np.zeros((1, model.n))
        Z11 = Z12 = Z22 = np.zeros((model.n, model.n))
    else:
        Wg = region_grid(model.W, g.w_per_axis)
        Z11, Z12, Z22 = cert.Z11, cert.Z12, cert.Z22
    ctrl = _local_controller(cert)
    quad_w = np.einsum("qi,ij,qj->q", Wg, Z11, Wg)
    worst, where = np.inf, None
    for s in range(0, X.shape[0], g.chunk):
        x = X[s:s + g.chunk]
        S = np.einsum("ki,ij,kj->k", x, P, x)
        u = ctrl(x)
        f0 = model.rhs(x, u, np.zeros_like(x))
        c = np.einsum("ki,ij,kj->k", x, Z22, x) - cert.lam * S - 2.0 * np.einsum("ki,ij,kj->k", x, P, f0)
        b = 2.0 * x @ Z12.T - 2.0 * (x @ P) @ model.D
        M = (c[:, None] + quad_w[None, :] + b @ Wg.T) / (1.0 + np.abs(S))[:, None]
        k = np.unravel_index(int(np.argmin(M)), M.shape)
        if M[k] < worst:
            worst = float(M[k])
            where = np.concatenate([x[k[0]], Wg[k[1]]])
    n_pts = X.shape[0] * Wg.shape[0]
    return VerificationReport(condition="7@w=0" if zero_supply else "7", samples=n_pts, worst_margin=worst,
                              argmin=[float(v) for v in where], tol=tol, runtime=time.perf_counter() - t0)


def verify_csc(cert, model: SubsystemModel, grids: GridSpec | None = None, tol: float = 1e-6,
               slack: float | None = None, conditions: Sequence[str] | None = None) -> list[VerificationReport]:
    """Grid verification of the level bounds and the dissipation inequality.

    Fixtures default to 1% level slack and skip the dissipation check (they carry no supply rate).
    """
    if cert.n != model.n:
        raise ValueError(f"certificate has n = {cert.n}, model has n = {model.n}")
    is_fixture = isinstance(cert, FixtureCertificate)
    if slack is None:
        slack = 0.01 if is_fixture else 0.0
    if conditions is None:
        conditions = ("6a", "6b") if is_fixture else ("6a", "6b", "7")
    reports = [r for r in check_levels(cert, model, grids, slack, tol) if r.condition in conditions]
    if "7" in conditions:
        reports.append(check_dissipation(cert, model, grids, tol))
    if "7@w=0" in conditions:
        reports.append(check_dissipation(cert, model, grids, tol, zero_supply=True))
    return reports


def quadratic_box_extrema(P: np.ndarray, lower, upper) -> tuple[float, float]:
    """Exact min and max of x^T P x over a box by enumerating the faces' critical points."""
    P = 0.5 * (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T)
    lo, hi = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    n = lo.size
    best_min, best_max = np.inf, -np.inf
    # each face fixes a subset of coordinates to a bound and leaves the rest free
    for code in np.ndindex(*(3,) * n):
        fixed = [k for k in range(n) if code[k] < 2]
        free = [k for k in range(n) if code[k] == 2]
        x = np.zeros(n)
        for k in fixed:
            x[k] = lo[k] if code[k] == 0 else hi[k]
        if free:
            Pff = P[np.ix_(free, free)]
            rhs = -P[np.ix_(free, fixed)] @ x[fixed] if fixed else np.zeros(len(free))
            try:
                xf = np.linalg.solve(Pff, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.any(xf < lo[free] - 1e-12) or np.any(xf > hi[free] + 1e-12):
                continue
            x[free] = xf
        v = float(x @ P @ x)
        best_min, best_max = min(best_min, v), max(best_max, v)
    return best_min, best_max


# ---------------------------------------------------------------------------
# closed-loop simulation


@dataclass
class SafetyReport:
    rows: list
    eta: float
    lam: float
    decay_violations: int
    decay_total: int
    horizon: float
    dt: float
    open_loop: bool
    runtime: float = 0.0
    dump: np.ndarray | None = None
    dump_header: list | None = None

    @property
    def unsafe_count(self) -> int:
        return int(sum(r["unsafe_entered"] for r in self.rows))

    @property
    def max_B(self) -> float:
        return float(max(r["max_B"] for r in self.rows))

    @property
    def decay_fraction(self) -> float:
        return 1.0 - self.decay_violations / max(self.decay_total, 1)

    def summary(self) -> dict:
        return {"samples": len(self.rows), "unsafe_count": self.unsafe_count, "max_B": self.max_B, "eta": self.eta,
                "decay_fraction": self.decay_fraction, "open_loop": self.open_loop, "horizon": self.horizon,
                "dt": self.dt, "runtime": self.runtime,
                "diverged": int(sum(r["diverged"] for r in self.rows))}

    def to_csv(self, path) -> Path:
        path = Path(path)
        keys = ["sample_id", "unsafe_entered", "max_B", "min_decay_margin", "first_unsafe_time", "diverged"]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for r in self.rows:
                w.writerow([r[k] for k in keys])
        return path

    def dump_csv(self, path) -> Path | None:
        if self.dump is None:
            return None
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.dump_header)
            for row in self.dump:
                w.writerow([int(v) if k in (1, 2) else repr(float(v)) for k, v in enumerate(row)])
        return path


def sample_initial_states(net: NetworkModel, K: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.empty((K, net.N, net.n))
    for i, s in enumerate(net.subsystems):
        out[:, i, :] = s.X0.sample(rng, K)
    return out


def simulate_network_closed_loop(net: NetworkModel, cbc: BarrierCertificate, x0_samples, horizon: float = 20.0,
                                 dt: float = 1e-3, open_loop: bool = False, dump_every: int | None = None,
                                 dump_samples: Sequence[int] = (0,), blowup: float = 1e6,
                                 on_divergence: str = "raise") -> SafetyReport:
    """Fixed-step RK4 on the coupled network for a batch of initial states (K, N, n).

    Unsafe entry means some subsystem state lies in its unsafe region at a
    sampled instant.  The decay check compares the one-step finite difference
    of B against -lam B + 1e-3 max(1, B).
    """
    t_start = time.perf_counter()
    X = np.array(x0_samples, dtype=float)
    if X.ndim != 3 or X.shape[1:] != (net.N, net.n):
        raise ValueError(f"initial states must have shape (K, {net.N}, {net.n})")
    if cbc.N != net.N:
        raise ValueError("network certificate and network sizes differ")
    K = X.shape[0]
    for i, s in enumerate(net.subsystems):
        if not np.all(s.X0.contains(X[:, i, :])):
            raise ValueError(f"initial states of subsystem {i} leave its initial region")
    steps = int(round(horizon / dt))
    lam = cbc.lam
    zeros_u = np.zeros((K, net.N, net.m))

    unsafe_groups = []
    for rep, idx in net._groups:
        unsafe_groups.append((rep.Xa, idx))

    def unsafe(Xs):
        hit = np.zeros(Xs.shape[0], dtype=bool)
        for reg, idx in unsafe_groups:
            if reg.empty:
                continue
            hit |= np.any(reg.contains(Xs[:, idx, :]), axis=-1)
        return hit

    def f(Xs):
        u = zeros_u[: Xs.shape[0]] if open_loop else cbc.controller(Xs)
        return net.rhs_blocks(Xs, u)

    entered = unsafe(X)
    first_t = np.where(entered, 0.0, np.nan)
    B = cbc.value(X)
    maxB = B.copy()
    min_decay = np.full(K, np.inf)
    viol = 0
    total = 0
    alive = np.ones(K, dtype=bool)
    dump_rows = []
    dump_ids = [s for s in dump_samples if s < K]

    def record(t, Xs, Bs):
        for s in dump_ids:
            for i in range(net.N):
                dump_rows.append([t, s, i, *Xs[s, i], Bs[s]])

    if dump_every:
        record(0.0, X, B)
    for k in range(steps):
        Xa_ = X[alive]
        k1 = f(Xa_)
        k2 = f(Xa_ + 0.5 * dt * k1)
        k3 = f(Xa_ + 0.5 * dt * k2)
        k4 = f(Xa_ + dt * k3)
        Xn = Xa_ + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        bad = ~np.all(np.isfinite(Xn), axis=(1, 2)) | (np.max(np.abs(np.nan_to_num(Xn, nan=np.inf)), axis=(1, 2)) > blowup)
        if np.any(bad):
            if on_divergence == "raise":
                raise DivergenceError((k + 1) * dt)
            ids = np.flatnonzero(alive)[bad]
            alive[ids] = False
            Xn = Xn[~bad]
            Xa_ = Xa_[~bad]
        # strongly contracting loops drive cubic terms into subnormals, which are very slow
        Xn[np.abs(Xn) < 1e-100] = 0.0
        ids = np.flatnonzero(alive)
        B0 = B[ids]
        B1 = cbc.value(Xn)
        margin = -lam * B0 + 1e-3 * np.maximum(1.0, B0) - (B1 - B0) / dt
        viol += int(np.sum(margin < 0))
        total += ids.size
        min_decay[ids] = np.minimum(min_decay[ids], margin)
        X[ids] = Xn
        B[ids] = B1
        maxB[ids] = np.maximum(maxB[ids], B1)
        hit = unsafe(Xn)
        newly = hit & ~entered[ids]
        first_t[ids[newly]] = (k + 1) * dt
        entered[ids] |= hit
        if dump_every and (k + 1) % dump_every == 0:
            record((k + 1) * dt, X, B)
    rows = [{"sample_id": s, "unsafe_entered": int(entered[s]), "max_B": float(maxB[s]),
             "min_decay_margin": float(min_decay[s]), "first_unsafe_time": float(first_t[s]) if entered[s] else "",
             "diverged": int(not alive[s])} for s in range(K)]
    header = ["t", "sample_id", "subsystem"] + [f"x{j + 1}" for j in range(net.n)] + ["B"]
    return SafetyReport(rows=rows, eta=cbc.eta, lam=lam, decay_violations=viol, decay_total=total, horizon=horizon,
                        dt=dt, open_loop=open_loop, runtime=time.perf_counter() - t_start,
                        dump=np.array(dump_rows) if dump_every else None, dump_header=header)
