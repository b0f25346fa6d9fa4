"""Per-subsystem synthesis of quadratic control storage certificates from one trajectory.

Stage one solves the dissipation SDP for (H, S, alpha, Zbar); stage two fixes
P = S^-1 and computes the level sets eta (over X0) and mu (over Xa).
"""

from __future__ import annotations

import json
import math
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import NoiseSpec, RankConditionError, TrajectoryRecord, check_rank, collect_trajectory
from .models import Box, NetworkModel, Region, SubsystemHandle, SubsystemModel
from .polyalg import Dictionary, PolyMatrix, Polynomial, monomials_up_to, theta_left_pinv
from .sdp import SdpProblem, SdpSettings, solve
from .soscomp import AffExpr, SosConstraint, add_zero_constraint, compile_matrix_sos, compile_scalar_sos, poly_expr

log = logging.getLogger(__name__)


class InfeasibleError(RuntimeError):
    def __init__(self, message: str, attempts: list[dict]):
        super().__init__(message)
        self.attempts = attempts


class ConditioningError(RuntimeError):
    pass


@dataclass
class SynthSettings:
    lam: float = 0.99
    pi: float = 1.0
    eps: float = 1e-6
    objective: str = "shape"  # "shape" bounds cond(S); "feasibility" only asks S >= eps I
    trace_weight: float = 1e-3
    dissipation_multiplier_degree: int = 0
    level_multiplier_degree: int = 2
    max_multiplier_degree: int = 4
    h_extra_degree: int = 0
    max_matrix_degree: int = 2
    cond_max: float = 1e10
    sdp: SdpSettings = field(default_factory=SdpSettings)

    def to_json(self) -> dict:
        d = asdict(self)
        d["sdp"] = self.sdp.to_json()
        return d

    @classmethod
    def from_json(cls, data: dict) -> "SynthSettings":
        data = dict(data)
        sdp = SdpSettings.from_json(data.pop("sdp", {}))
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(sdp=sdp, **known)


# ---------------------------------------------------------------------------
# certificate


@dataclass
class StorageCertificate:
    P: np.ndarray
    S_inv: np.ndarray
    H: PolyMatrix
    Zbar11: np.ndarray
    Zbar12: np.ndarray
    Zbar22: np.ndarray
    alpha: float
    pi: float
    lam: float
    U0T: np.ndarray
    eta: float | None = None
    mu: float | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.U0T.shape[0]

    @property
    def T(self) -> int:
        return self.U0T.shape[1]

    @property
    def Zbar21(self) -> np.ndarray:
        return self.Zbar12.T

    @property
    def Z11(self) -> np.ndarray:
        return self.Zbar11

    @property
    def Z12(self) -> np.ndarray:
        return self.Zbar12 @ self.P

    @property
    def Z21(self) -> np.ndarray:
        return self.Z12.T

    @property
    def Z22(self) -> np.ndarray:
        return self.P @ self.Zbar22 @ self.P

    @property
    def Q(self) -> PolyMatrix:
        return self.H @ self.P

    @property
    def F(self) -> PolyMatrix:
        return self.U0T @ self.Q

    def storage(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def supply_matrix(self) -> np.ndarray:
        """Z = [[Z11, Z12], [Z21, Z22]] acting on [w; x]."""
        return np.block([[self.Z11, self.Z12], [self.Z21, self.Z22]])

    def to_json(self) -> dict:
        return {
            "n": self.n, "m": self.m, "T": self.T,
            "P": self.P.tolist(), "S": self.S_inv.tolist(),
            "H": self.H.to_json(),
            "Zbar11": self.Zbar11.tolist(), "Zbar12": self.Zbar12.tolist(), "Zbar21": self.Zbar21.tolist(),
            "Zbar22": self.Zbar22.tolist(),
            "Z11": self.Z11.tolist(), "Z12": self.Z12.tolist(), "Z21": self.Z21.tolist(), "Z22": self.Z22.tolist(),
            "alpha": self.alpha, "pi": self.pi, "lambda": self.lam, "eta": self.eta, "mu": self.mu,
            "U0T": self.U0T.tolist(), "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "StorageCertificate":
        if isinstance(data, str):
            data = json.loads(data)
        n = int(data["n"])
        return cls(
            P=np.array(data["P"], float), S_inv=np.array(data["S"], float),
            H=PolyMatrix.from_json(n, data["H"]),
            Zbar11=np.array(data["Zbar11"], float), Zbar12=np.array(data["Zbar12"], float),
            Zbar22=np.array(data["Zbar22"], float), alpha=float(data["alpha"]), pi=float(data["pi"]),
            lam=float(data["lambda"]), U0T=np.array(data["U0T"], float),
            eta=None if data.get("eta") is None else float(data["eta"]),
            mu=None if data.get("mu") is None else float(data["mu"]),
            provenance=dict(data.get("provenance", {})),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "StorageCertificate":
        return cls.from_json(Path(path).read_text())


def eval_local_controller(cert: StorageCertificate, U0T, x) -> np.ndarray:
    """u = U0T H(x) P x for one state (n,) or a batch (K, n)."""
    x = np.asarray(x, dtype=float)
    U0T = np.asarray(U0T, dtype=float)
    Hx = cert.H.evaluate(x)
    Px = x @ cert.P.T
    if x.ndim == 1:
        return U0T @ (Hx @ Px)
    return np.einsum("mt,ktn,kn->km", U0T, Hx, Px)


# ---------------------------------------------------------------------------
# dissipation SDP


@dataclass
class DissipationLayout:
    hmons: list
    H: dict
    S: AffExpr
    S_entries: np.ndarray  # index matrix of the PSD part of S
    S_offset: float
    alpha: int
    Zbar11: np.ndarray
    Zbar12: np.ndarray
    Y22: np.ndarray
    t: int | None
    fragment: object
    block: AffExpr

    def H_value(self, entries: np.ndarray, nvars: int) -> PolyMatrix:
        return PolyMatrix(*self.H[self.hmons[0]].shape, nvars, {m: entries[idx] for m, idx in self.H.items()})


def _sym_index(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, n), dtype=np.int64)
    iu, ju = np.triu_indices(n)
    out[iu, ju] = idx
    out[ju, iu] = idx
    return out


def assemble_dissipation_problem(record: TrajectoryRecord, D, dictionary: Dictionary, theta: PolyMatrix,
                                 region_X: Region | Box, lam: float, pi: float, degrees: dict | None = None,
                                 settings: SynthSettings | None = None) -> tuple[SdpProblem, DissipationLayout]:
    st = settings or SynthSettings()
    degrees = dict(degrees or {})
    if lam <= 0 or pi <= 0:
        raise ValueError("lambda and pi must be positive")
    n, T = record.n, record.T
    N0T = record.N0T(dictionary)
    if T < dictionary.M + 1:
        raise RankConditionError(f"T = {T} is below the minimum sample size M + 1 = {dictionary.M + 1}")
    if not check_rank(N0T).full_row_rank:
        raise RankConditionError("sample matrix lacks full row rank")
    D = np.atleast_2d(np.asarray(D, dtype=float))
    md = int(degrees.get("dissipation", st.dissipation_multiplier_degree))
    hdeg = theta.degree + int(degrees.get("h_extra", st.h_extra_degree))
    hmons = monomials_up_to(n, hdeg)

    prob = SdpProblem()
    prob.metadata.update(kind="dissipation", n=n, T=T, M=dictionary.M, lam=lam, pi=pi, multiplier_degree=md)
    Hidx = {m: prob.add_free(f"H[{''.join(map(str, m))}]", T * n).reshape(T, n) for m in hmons}
    H = sum((AffExpr.entries(Hidx[m], n, mono=m) for m in hmons[1:]), AffExpr.entries(Hidx[hmons[0]], n, mono=hmons[0]))
    I = np.eye(n)
    t_idx = None
    if st.objective == "shape":
        K1 = prob.add_psd("S_excess", n)
        S = AffExpr.psd(K1, n) + AffExpr.constant(I, n)
        S_entries, S_offset = K1.index, 1.0
        t_idx = int(prob.add_free("t")[0])
        K2 = prob.add_psd("S_gap", n)
    elif st.objective == "feasibility":
        Sh = prob.add_psd("S_hat", n)
        S = AffExpr.psd(Sh, n) + AffExpr.constant(st.eps * I, n)
        S_entries, S_offset = Sh.index, st.eps
    else:
        raise ValueError(f"unknown objective {st.objective!r}")
    alpha = int(prob.add_nonneg("alpha")[0])
    Z11 = _sym_index(prob.add_free("Zbar11", n * (n + 1) // 2), n)
    Z12 = prob.add_free("Zbar12", n * n).reshape(n, n)
    Y22 = prob.add_psd("negZbar22", n)

    # data-consistency equality: N0T H(x) = Theta(x) S
    add_zero_constraint(prob, H.lmul(N0T) - S.lmul(theta), "consistency")
    if st.objective == "shape":
        add_zero_constraint(prob, AffExpr.scalar(t_idx, I, n) - S - AffExpr.psd(K2, n), "shape")

    XD = record.X1T - D @ record.W0T
    XH = H.lmul(XD)
    G = XH + XH.T + AffExpr.scalar(alpha, record.PsiPsiT, n) + AffExpr.constant(pi * I, n) + lam * S
    Zb11 = AffExpr.entries(Z11, n)
    Zb12 = AffExpr.entries(Z12, n)
    Zb22 = -AffExpr.psd(Y22, n)
    block = AffExpr.bmat([
        [Zb22 - G, H.T, Zb12.T],
        [H, AffExpr.scalar(alpha, np.eye(T), n), None],
        [Zb12, None, Zb11 - AffExpr.constant(D.T @ D / pi, n)],
    ])
    frag = compile_matrix_sos(prob, SosConstraint(block, region_X, md, "matrix"), "dissipation",
                              max_degree=st.max_matrix_degree)
    if st.objective == "shape":
        diag11 = [int(Z11[i, i]) for i in range(n)]
        prob.set_objective([t_idx] + diag11, [1.0] + [st.trace_weight] * n)
    layout = DissipationLayout(hmons=hmons, H=Hidx, S=S, S_entries=S_entries, S_offset=S_offset, alpha=alpha,
                               Zbar11=Z11, Zbar12=Z12, Y22=Y22.index, t=t_idx, fragment=frag, block=block)
    return prob, layout


def _region_box(region) -> Box:
    if isinstance(region, Box):
        return region
    return region.boxes[0] if len(region.boxes) == 1 else region.hull()


def synthesize_csc(record: TrajectoryRecord, handle: SubsystemHandle, lam: float | None = None,
                   pi: float | None = None, degrees: dict | None = None,
                   settings: SynthSettings | None = None) -> StorageCertificate:
    st = settings or SynthSettings()
    lam = st.lam if lam is None else float(lam)
    pi = st.pi if pi is None else float(pi)
    degrees = dict(degrees or {})
    md = int(degrees.get("dissipation", st.dissipation_multiplier_degree))
    attempts = []
    n = handle.n
    while True:
        degs = dict(degrees, dissipation=md)
        prob, lay = assemble_dissipation_problem(record, handle.D, handle.dictionary, handle.theta,
                                                 _region_box(handle.X), lam, pi, degs, st)
        sol = solve(prob, st.sdp)
        attempts.append({"lambda": lam, "pi": pi, "degrees": degs, "status": sol.status,
                         "iterations": sol.iterations, "message": sol.message, **prob.stats()})
        log.info("dissipation SDP %s in %d iterations (%.2fs)", sol.status, sol.iterations, sol.runtime)
        if sol.ok:
            break
        if md + 2 > st.max_multiplier_degree:
            raise InfeasibleError(f"dissipation SDP {sol.status} for lambda={lam}, pi={pi}", attempts)
        md += 2
    e = sol.entries
    S = e[lay.S_entries] + lay.S_offset * np.eye(n)
    S = 0.5 * (S + S.T)
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > st.cond_max:
        raise ConditioningError(f"S is near-singular (condition number {cond:.3g})")
    P = np.linalg.inv(S)
    P = 0.5 * (P + P.T)
    Zbar22 = -e[lay.Y22]
    cert = StorageCertificate(
        P=P, S_inv=S, H=lay.H_value(e, n), Zbar11=e[lay.Zbar11].copy(), Zbar12=e[lay.Zbar12].copy(),
        Zbar22=0.5 * (Zbar22 + Zbar22.T), alpha=float(e[lay.alpha]), pi=pi, lam=lam, U0T=record.U0T.copy(),
        provenance={"seed": record.seed, "benchmark": handle.name, "tau": record.tau, "phi_bar": record.phi_bar,
                    "T": record.T, "attempts": attempts},
    )
    return cert


# ---------------------------------------------------------------------------
# level sets


def _level_sdp(P: np.ndarray, box: Box, which: str, md: int, sdp: SdpSettings) -> float:
    n = P.shape[0]
    xs = [Polynomial.variable(n, i) for i in range(n)]
    quad = Polynomial(n)
    for i in range(n):
        for j in range(n):
            quad = quad + float(P[i, j]) * xs[i] * xs[j]
    prob = SdpProblem()
    lvl = int(prob.add_free(which)[0])
    level = AffExpr.scalar(lvl, [[1.0]], n)
    if which == "eta":
        expr = level - poly_expr(quad)
        prob.set_objective([lvl], [1.0])
    else:
        expr = poly_expr(quad) - level
        prob.set_objective([lvl], [-1.0])
    compile_scalar_sos(prob, SosConstraint(expr, box, md), which)
    sol = solve(prob, sdp)
    if not sol.ok:
        raise InfeasibleError(f"level-set SDP for {which} returned {sol.status}", [{"box": box.to_json()}])
    return float(sol.entries[lvl])


def compute_levels(P, X0: Region, Xa: Region, degrees: dict | int | None = None,
                   settings: SynthSettings | None = None) -> tuple[float, float]:
    st = settings or SynthSettings()
    if isinstance(degrees, int):
        md = degrees
    else:
        md = int((degrees or {}).get("level", st.level_multiplier_degree))
    P = np.asarray(P, dtype=float)
    if np.linalg.eigvalsh(0.5 * (P + P.T))[0] <= 0:
        raise ValueError("P must be positive definite")
    if Xa.empty:
        raise ValueError("unsafe set is empty, so mu is unbounded")
    eta = max(_level_sdp(P, b, "eta", md, st.sdp) for b in X0.boxes)
    mu = min(_level_sdp(P, b, "mu", md, st.sdp) for b in Xa.boxes)
    return eta, mu


def consistency_residual(cert: StorageCertificate, record: TrajectoryRecord, dictionary: Dictionary,
                         theta: PolyMatrix, samples: int = 1000, seed: int = 0, box: Box | None = None) -> float:
    """max_x |N0T H(x) - Theta(x) P^-1| over random points."""
    rng = np.random.default_rng(seed)
    n = cert.n
    box = box or Box((-1.0,) * n, (1.0,) * n)
    xs = box.sample(rng, samples)
    N0T = record.N0T(dictionary)
    lhs = np.einsum("mt,ktn->kmn", N0T, cert.H.evaluate(xs))
    rhs = theta.evaluate(xs) @ cert.S_inv
    return float(np.max(np.abs(lhs - rhs)))


def constancy_residual(cert: StorageCertificate, record: TrajectoryRecord, dictionary: Dictionary,
                       theta: PolyMatrix, samples: int = 100, seed: int = 0, box: Box | None = None) -> float:
    """max_x |lambda Theta^+(x) N0T H(x) - lambda S| at random points."""
    rng = np.random.default_rng(seed)
    n = cert.n
    box = box or Box((-1.0,) * n, (1.0,) * n)
    N0T = record.N0T(dictionary)
    worst = 0.0
    for x in box.sample(rng, samples):
        val = cert.lam * theta_left_pinv(theta, x) @ N0T @ cert.H.evaluate(x)
        worst = max(worst, float(np.max(np.abs(val - cert.lam * cert.S_inv))))
    return worst


# ---------------------------------------------------------------------------
# network-level orchestration


@dataclass
class GroupResult:
    members: list
    cert: StorageCertificate
    record: TrajectoryRecord


def _group_seed(seed: int, group: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(group)]).generate_state(1)[0])


def _synth_task(args) -> tuple[StorageCertificate, TrajectoryRecord]:
    model, T, tau, noise, seed, st = args
    rec = collect_trajectory(model, T, tau, noise, seed)
    cert = synthesize_csc(rec, model.public(), settings=st)
    eta, mu = compute_levels(cert.P, model.X0, model.Xa, settings=st)
    cert.eta, cert.mu = eta, mu
    return cert, rec


def _widest_member(net: NetworkModel, idx) -> SubsystemModel:
    """Group member with the largest internal-input box, so the excitation covers every neighbour."""
    def vol(s):
        h = s.W.hull()
        return float(np.prod(np.subtract(h.upper, h.lower)))
    return max((net.subsystems[i] for i in idx), key=vol)


def synthesize_network(net: NetworkModel, T: int, tau: float, noise: NoiseSpec, seed: int,
                       settings: SynthSettings | None = None, workers: int = 1) -> list[GroupResult]:
    """One certificate per group of identical subsystems (the homogeneous fast path).

    Groups are solved in a process pool when ``workers`` > 1; results keep
    group order, so output does not depend on scheduling.
    """
    st = settings or SynthSettings()
    tasks = [(_widest_member(net, idx), T, tau, noise, _group_seed(seed, g), st)
             for g, (_, idx) in enumerate(net._groups)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_synth_task, tasks))
    else:
        outs = [_synth_task(t) for t in tasks]
    return [GroupResult(members=[int(i) for i in idx], cert=c, record=r)
            for (_, idx), (c, r) in zip(net._groups, outs)]


def expand_groups(results: Sequence[GroupResult], N: int) -> list[StorageCertificate]:
    certs: list = [None] * N
    for gr in results:
        for i in gr.members:
            certs[i] = gr.cert
    if any(c is None for c in certs):
        raise ValueError("groups do not cover every subsystem")
    return certs


def with_lambda(cert: StorageCertificate, lam: float) -> StorageCertificate:
    return replace(cert, lam=float(lam))


# ---------------------------------------------------------------------------
# problem-size bookkeeping


def _ncomb(n: int, d: int) -> int:
    """Number of monomials of degree <= d in n variables."""
    return math.comb(n + d, d)


def dissipation_variable_count(n: int, T: int, h_degree: int, multiplier_degree: int = 0,
                               internal_inputs: bool = True, objective: str = "shape") -> int:
    """Scalar decision variables of the dissipation program, without assembling it.

    ``internal_inputs=False`` drops the supply-rate blocks, which is the shape of a
    single closed network program.
    """
    tri = n * (n + 1) // 2
    count = T * n * _ncomb(n, h_degree)
    count += 2 * tri + 1 if objective == "shape" else tri
    count += 1  # alpha
    s = n + T
    if internal_inputs:
        count += tri + n * n + tri
        s += n
    d = math.ceil(max(h_degree, multiplier_degree + 2) / 2)
    k = _ncomb(n, d) * s
    count += k * (k + 1) // 2
    if multiplier_degree == 0:
        count += n
    else:
        km = _ncomb(n, multiplier_degree // 2)
        count += n * km * (km + 1) // 2
    return count


def monolithic_variable_count(N: int, n: int, M: int, T_per: int, h_degree: int, multiplier_degree: int = 0) -> int:
    """One program over the whole network: N n states, N M dictionary entries, N T_per samples."""
    T = max(N * T_per, N * M + 1)
    return dissipation_variable_count(N * n, T, h_degree, multiplier_degree, internal_inputs=False)
