"""Simulation of hidden subsystems and collection of single noisy trajectories."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .models import SubsystemModel
from .polyalg import Dictionary


class DivergenceError(RuntimeError):
    def __init__(self, t: float, msg: str = ""):
        self.time = float(t)
        super().__init__(msg or f"state left the blow-up box at t = {t:.6g}")


class RankConditionError(ValueError):
    pass


def rk4_step(f: Callable, t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _as_signal(sig, dim: int) -> Callable[[float], np.ndarray]:
    if sig is None:
        zero = np.zeros(dim)
        return lambda t: zero
    if callable(sig):
        return sig
    const = np.asarray(sig, dtype=float)
    return lambda t: const


def simulate(model: SubsystemModel, x0, u_signal=None, w_signal=None, dt: float = 1e-3,
             horizon: float = 1.0, blowup: float = 1e6, t0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step RK4 path of one subsystem.

    ``u_signal``/``w_signal`` are constants, callables of time, or None (zero).
    Returns (times, states) with states of shape (steps + 1, n).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.array(x0, dtype=float)
    u_of = _as_signal(u_signal, model.m)
    w_of = _as_signal(w_signal, model.n)
    steps = int(round(horizon / dt))

    def f(t, xx):
        return model.rhs(xx, u_of(t), w_of(t))

    times = t0 + dt * np.arange(steps + 1)
    path = np.empty((steps + 1, x.size))
    path[0] = x
    for k in range(steps):
        x = rk4_step(f, times[k], x, dt)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > blowup:
            raise DivergenceError(times[k + 1])
        path[k + 1] = x
    return times, path


@dataclass(frozen=True)
class NoiseSpec:
    phi_bar: float
    distribution: str = "uniform_ball"

    def __post_init__(self):
        if self.phi_bar < 0:
            raise ValueError("phi_bar must be non-negative")
        if self.distribution not in ("uniform_ball", "scaled_gaussian_clipped"):
            raise ValueError(f"unknown noise distribution {self.distribution!r}")

    def draw(self, rng: np.random.Generator, n: int, T: int) -> np.ndarray:
        """Columns phi_k with ||phi_k||^2 <= phi_bar."""
        radius = np.sqrt(self.phi_bar)
        if radius == 0.0:
            return np.zeros((n, T))
        g = rng.standard_normal((n, T))
        if self.distribution == "uniform_ball":
            g /= np.maximum(np.linalg.norm(g, axis=0), 1e-300)
            r = radius * rng.random(T) ** (1.0 / n)
            out = g * r
        else:
            out = g * (radius / (2.0 * np.sqrt(n)))
            norms = np.linalg.norm(out, axis=0)
            scale = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
            out = out * scale
        # guard against rounding pushing a draw past the bound
        norms = np.linalg.norm(out, axis=0)
        over = norms > radius
        out[:, over] *= radius / norms[over] * (1 - 1e-15)
        return out


@dataclass
class TrajectoryRecord:
    tau: float
    t0: float
    T: int
    U0T: np.ndarray
    W0T: np.ndarray
    X0T: np.ndarray
    X1T: np.ndarray
    Psi: np.ndarray
    seed: int
    phi_bar: float
    hidden: dict = field(default_factory=dict, repr=False)
    _n0t: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.X0T.shape[0]

    @property
    def m(self) -> int:
        return self.U0T.shape[0]

    def N0T(self, dictionary: Dictionary) -> np.ndarray:
        key = dictionary.entries
        if key not in self._n0t:
            self._n0t[key] = build_N0T(self, dictionary)
        return self._n0t[key]

    @property
    def PsiPsiT(self) -> np.ndarray:
        return self.Psi @ self.Psi.T

    def times(self) -> np.ndarray:
        return self.t0 + self.tau * np.arange(self.T)

    def save_csv(self, path: str | Path) -> tuple[Path, Path]:
        """Samples as CSV plus a JSON sidecar holding Psi and metadata."""
        path = Path(path)
        n, m = self.n, self.m
        header = (["t"] + [f"u_{i + 1}" for i in range(m)] + [f"w_{i + 1}" for i in range(n)]
                  + [f"x_{i + 1}" for i in range(n)] + [f"xdot_{i + 1}" for i in range(n)])
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k, t in enumerate(self.times()):
                row = [t, *self.U0T[:, k], *self.W0T[:, k], *self.X0T[:, k], *self.X1T[:, k]]
                writer.writerow([repr(float(v)) for v in row])
        side = path.with_suffix(".json")
        side.write_text(json.dumps({
            "tau": self.tau, "t0": self.t0, "T": self.T, "seed": self.seed,
            "phi_bar": self.phi_bar, "Psi": self.Psi.tolist(),
        }, indent=1))
        return path, side

    @classmethod
    def load_csv(cls, path: str | Path) -> "TrajectoryRecord":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with path.open() as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(v) for v in r] for r in reader])
        m = sum(h.startswith("u_") for h in header)
        n = sum(h.startswith("x_") for h in header)
        cols = rows.T
        U = cols[1:1 + m]
        W = cols[1 + m:1 + m + n]
        X = cols[1 + m + n:1 + m + 2 * n]
        Xd = cols[1 + m + 2 * n:1 + m + 3 * n]
        return cls(tau=meta["tau"], t0=meta["t0"], T=int(meta["T"]), U0T=U, W0T=W, X0T=X, X1T=Xd,
                   Psi=np.array(meta["Psi"]), seed=int(meta["seed"]), phi_bar=float(meta["phi_bar"]))


def noise_envelope(n: int, T: int, phi_bar: float) -> np.ndarray:
    """Psi = sqrt(phi_bar T) [I_n | 0], so Psi Psi^T = phi_bar T I_n."""
    Psi = np.zeros((n, T))
    k = min(n, T)
    Psi[np.arange(k), np.arange(k)] = np.sqrt(phi_bar * T)
    return Psi


def build_N0T(record: TrajectoryRecord, dictionary: Dictionary) -> np.ndarray:
    if dictionary.n != record.n:
        raise ValueError("dictionary and record state dimensions differ")
    return dictionary.evaluate(record.X0T.T).T.copy()


@dataclass(frozen=True)
class RankReport:
    full_row_rank: bool
    smallest_singular_value: float
    largest_singular_value: float


def check_rank(N0T, rtol: float = 1e-8) -> RankReport:
    N0T = np.atleast_2d(np.asarray(N0T, dtype=float))
    sv = np.linalg.svd(N0T, compute_uv=False)
    rows = N0T.shape[0]
    if sv.size < rows:
        smin = 0.0
    else:
        smin = float(sv[rows - 1])
    smax = float(sv[0]) if sv.size else 0.0
    return RankReport(bool(smax > 0 and smin > rtol * smax), smin, smax)


def collect_trajectory(model: SubsystemModel, T: int, tau: float, noise: NoiseSpec, seed: int,
                       t0: float = 0.0, substeps: int = 50, start_region: str = "X0",
                       max_attempts: int = 10) -> TrajectoryRecord:
    """Excite the hidden subsystem with piecewise-constant (u, w) and sample it.

    X1T holds the exact right-hand side at each sample instant plus a noise
    draw.  A draw is repeated (same generator, fresh numbers) when the sample
    matrix misses full row rank or the state leaves X.
    """
    M = model.dictionary.M
    if T < M + 1:
        raise RankConditionError(f"T = {T} is below the minimum sample size M + 1 = {M + 1}")
    rng = np.random.default_rng(seed)
    n, m = model.n, model.m
    Ubox, Wbox = model.U.hull(), model.W.hull()
    start = model.X0 if start_region == "X0" else model.X
    h = tau / substeps
    last_reason = ""
    for _ in range(max_attempts):
        x = start.sample(rng, 1)[0]
        U = Ubox.sample(rng, T).T
        W = Wbox.sample(rng, T).T
        Phi = noise.draw(rng, n, T)
        X0T = np.empty((n, T))
        X1T = np.empty((n, T))
        escaped = False
        for k in range(T):
            u, w = U[:, k], W[:, k]
            X0T[:, k] = x
            X1T[:, k] = model.rhs(x, u, w) + Phi[:, k]
            if k == T - 1:
                break
            f = lambda t, xx: model.rhs(xx, u, w)  # noqa: E731
            for j in range(substeps):
                x = rk4_step(f, t0 + k * tau + j * h, x, h)
            if not model.X.contains(x):
                escaped = True
                break
        if escaped:
            last_reason = "state left X during collection"
            continue
        rec = TrajectoryRecord(tau=tau, t0=t0, T=T, U0T=U, W0T=W, X0T=X0T, X1T=X1T,
                               Psi=noise_envelope(n, T, noise.phi_bar), seed=seed, phi_bar=noise.phi_bar,
                               hidden={"Phi": Phi})
        if check_rank(rec.N0T(model.dictionary)).full_row_rank:
            return rec
        last_reason = "sample matrix is rank deficient"
    if last_reason.startswith("state"):
        raise DivergenceError(t0 + T * tau, f"collection failed after {max_attempts} attempts: {last_reason}")
    raise RankConditionError(f"collection failed after {max_attempts} attempts: {last_reason}")
