"""Compositional assembly of a network barrier certificate from subsystem certificates."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .certsynth import StorageCertificate
from .models import Topology
from .polyalg import PolyMatrix, eval_monomials
from .sdp import lambda_max_structured


class CompositionRefused(RuntimeError):
    pass


class RetriesExhausted(RuntimeError):
    def __init__(self, message: str, attempts: list[dict]):
        super().__init__(message)
        self.attempts = attempts


def _stack_blocks(certs: Sequence[StorageCertificate]):
    """Per-block supply matrices, collapsed to one copy when every block shares a certificate."""
    ns = {c.n for c in certs}
    if len(ns) != 1:
        raise ValueError("all certificates must share one state dimension")
    first = certs[0]
    if all(c is first for c in certs):
        return True, (first.Z11, first.Z12, first.Z21, first.Z22)
    return False, tuple(np.stack([getattr(c, k) for c in certs]) for k in ("Z11", "Z12", "Z21", "Z22"))


def _blockdiag(shared: bool, Z: np.ndarray, xb: np.ndarray) -> np.ndarray:
    if shared:
        return xb @ Z.T
    return np.einsum("kij,kj->ki", Z, xb)


class ZComp:
    """Block-diagonal supply matrix acting on [w; x] with w, x stacked over subsystems."""

    def __init__(self, certs: Sequence[StorageCertificate]):
        if not certs:
            raise ValueError("no certificates")
        self.N = len(certs)
        self.n = certs[0].n
        self.shared, (self.Z11, self.Z12, self.Z21, self.Z22) = _stack_blocks(certs)

    @property
    def dim(self) -> int:
        return 2 * self.N * self.n

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.size != self.dim:
            raise ValueError(f"expected a vector of length {self.dim}")
        half = self.N * self.n
        w = v[:half].reshape(self.N, self.n)
        x = v[half:].reshape(self.N, self.n)
        top = _blockdiag(self.shared, self.Z11, w) + _blockdiag(self.shared, self.Z12, x)
        bot = _blockdiag(self.shared, self.Z21, w) + _blockdiag(self.shared, self.Z22, x)
        return np.concatenate([top.ravel(), bot.ravel()])

    def dense(self) -> np.ndarray:
        """Column-by-column probe; meant for small N."""
        eye = np.eye(self.dim)
        return np.column_stack([self.matvec(eye[:, k]) for k in range(self.dim)])


def build_zcomp(certs: Sequence[StorageCertificate]) -> ZComp:
    return ZComp(certs)


def composed_operator(top: Topology, certs: Sequence[StorageCertificate]) -> tuple[Callable, int]:
    """v -> M^T Z11 M v + M^T Z12 v + Z21 M v + Z22 v on stacked states."""
    if len(certs) != top.N:
        raise ValueError(f"{len(certs)} certificates for a topology with N = {top.N}")
    z = ZComp(certs)
    if any(d != z.n for d in top.dims):
        raise ValueError("certificate and topology state dimensions differ")
    N, n = z.N, z.n

    def matvec(v):
        xb = np.asarray(v, dtype=float).reshape(N, n)
        mx = top.apply_blocks(xb)
        a = _blockdiag(z.shared, z.Z11, mx) + _blockdiag(z.shared, z.Z12, xb)
        out = top.apply_blocks(a, transpose=True)
        out += _blockdiag(z.shared, z.Z21, mx) + _blockdiag(z.shared, z.Z22, xb)
        return out.ravel()

    return matvec, N * n


@dataclass
class CompositionCheck:
    passes: bool
    lambda_max: float
    level_ok: bool
    psd_tol: float
    eta: float
    mu: float
    runtime: float = 0.0

    @property
    def level_margin(self) -> float:
        return self.mu - self.eta

    def to_json(self) -> dict:
        return {"passes": self.passes, "lambda_max": self.lambda_max, "psd_tol": self.psd_tol,
                "level_ok": self.level_ok, "level_margin": self.level_margin, "runtime": self.runtime}


def check_composition(top: Topology, certs: Sequence[StorageCertificate], psd_tol: float = 1e-8,
                      tol: float = 1e-8, seed: int = 0) -> CompositionCheck:
    t0 = time.perf_counter()
    matvec, dim = composed_operator(top, certs)
    lmax = lambda_max_structured(matvec, dim, tol=tol, seed=seed)
    if any(c.eta is None or c.mu is None for c in certs):
        raise ValueError("certificates need eta and mu before composition")
    eta = math.fsum(c.eta for c in certs)
    mu = math.fsum(c.mu for c in certs)
    level_ok = eta < mu
    return CompositionCheck(passes=bool(lmax <= psd_tol and level_ok), lambda_max=float(lmax), level_ok=level_ok,
                            psd_tol=psd_tol, eta=eta, mu=mu, runtime=time.perf_counter() - t0)


def controller_poly(cert) -> PolyMatrix:
    """u(x) = U0T H(x) P x as an (m x 1) polynomial column."""
    given = getattr(cert, "controller_poly", None)
    if given is not None:
        return given
    n = cert.n
    xcol = PolyMatrix(n, 1, n, {tuple(int(i == k) for i in range(n)): np.eye(n)[:, [k]] for k in range(n)})
    return (cert.U0T @ cert.H @ cert.P) @ xcol


@dataclass
class BarrierCertificate:
    certs: list
    topology: Topology
    eta: float
    mu: float
    lam: float
    check: CompositionCheck | None = None
    _ctrl: dict = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return len(self.certs)

    def value(self, xb) -> np.ndarray:
        """B(x) = sum_i x_i^T P_i x_i for block states (..., N, n)."""
        xb = np.asarray(xb, dtype=float)
        first = self.certs[0]
        if all(c is first for c in self.certs):
            return np.einsum("...ki,ij,...kj->...", xb, first.P, xb)
        Ps = np.stack([c.P for c in self.certs])
        return np.einsum("...ki,kij,...kj->...", xb, Ps, xb)

    def _controller(self, cert) -> tuple[np.ndarray, np.ndarray]:
        key = id(cert)
        if key not in self._ctrl:
            poly = controller_poly(cert)
            mons = list(poly.coeffs) or [(0,) * poly.nvars]
            coef = np.stack([poly.coeffs.get(m, np.zeros((poly.rows, 1)))[:, 0] for m in mons])
            self._ctrl[key] = (np.array(mons), coef)
        return self._ctrl[key]

    def controller(self, xb) -> np.ndarray:
        """Stacked decentralized inputs, (..., N, m)."""
        xb = np.asarray(xb, dtype=float)
        groups: dict[int, list[int]] = {}
        for i, c in enumerate(self.certs):
            groups.setdefault(id(c), []).append(i)
        if len(groups) == 1:
            mons, coef = self._controller(self.certs[0])
            return eval_monomials(mons, xb) @ coef
        out = None
        for idx in groups.values():
            mons, coef = self._controller(self.certs[idx[0]])
            u = eval_monomials(mons, xb[..., idx, :]) @ coef
            if out is None:
                out = np.zeros(xb.shape[:-1] + (coef.shape[1],))
            out[..., idx, :] = u
        return out

    def to_json(self, cert_refs: Sequence[str] | None = None) -> dict:
        return {
            "topology": self.topology.to_json(),
            "certificates": list(cert_refs) if cert_refs is not None else None,
            "eta": self.eta, "mu": self.mu, "lambda": self.lam,
            "check": None if self.check is None else self.check.to_json(),
        }


def assemble_cbc(certs: Sequence[StorageCertificate], check: CompositionCheck, topology: Topology) -> BarrierCertificate:
    if not check.passes:
        raise CompositionRefused(
            f"composition check failed (lambda_max = {check.lambda_max:.3e}, level_ok = {check.level_ok})")
    return BarrierCertificate(certs=list(certs), topology=topology, eta=math.fsum(c.eta for c in certs),
                              mu=math.fsum(c.mu for c in certs), lam=min(c.lam for c in certs), check=check)


def save_network(cbc: BarrierCertificate, path, cert_refs: Sequence[str]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cbc.to_json(cert_refs), indent=1, sort_keys=True))
    return path


def load_network(path) -> BarrierCertificate:
    """Rebuild from a network file; certificate references are resolved relative to it."""
    path = Path(path)
    data = json.loads(path.read_text())
    top = Topology.from_json(data["topology"])
    cache: dict[str, StorageCertificate] = {}
    certs = []
    for ref in data["certificates"]:
        p = (path.parent / ref) if not Path(ref).is_absolute() else Path(ref)
        key = str(p.resolve())
        if key not in cache:
            cache[key] = StorageCertificate.load(p)
        certs.append(cache[key])
    chk = data.get("check")
    check = None
    if chk:
        check = CompositionCheck(passes=chk["passes"], lambda_max=chk["lambda_max"], level_ok=chk["level_ok"],
                                 psd_tol=chk["psd_tol"], eta=data["eta"], mu=data["mu"], runtime=chk.get("runtime", 0.0))
    return BarrierCertificate(certs=certs, topology=top, eta=data["eta"], mu=data["mu"], lam=data["lambda"], check=check)


@dataclass
class RetryConfig:
    increment: float = 0.25
    max_retries: int = 3


def retry_policy(failure: dict, config: RetryConfig | None = None) -> dict:
    """Next synthesis settings after a failed composition: larger T, fresh seed.

    ``failure`` carries at least {"T", "seed"} and optionally "attempts" (a list
    of earlier settings).  Raises RetriesExhausted past the retry budget.
    """
    cfg = config or RetryConfig()
    attempts = list(failure.get("attempts", []))
    attempts.append({k: failure[k] for k in ("T", "seed") if k in failure} | {"reason": failure.get("reason", "")})
    if len(attempts) > cfg.max_retries:
        raise RetriesExhausted(f"composition failed after {cfg.max_retries} retries", attempts)
    T_new = math.ceil(failure["T"] * (1.0 + cfg.increment) - 1e-9)
    seed_new = int(np.random.SeedSequence([int(failure["seed"]), len(attempts)]).generate_state(1)[0])
    return {"T": T_new, "seed": seed_new, "attempts": attempts, "retry": len(attempts)}
