"""Dense semidefinite programming.

Problems are stated over scalar "entries": free scalars, nonnegative scalars and
the upper-triangular entries X_ij (i <= j) of symmetric PSD matrix variables.
Linear equalities and an optional linear objective act on these entries.

The internal solver is a homogeneous self-dual primal-dual interior-point
method with Nesterov-Todd scaling and a Mehrotra predictor-corrector.  Free
variables are eliminated through an augmented Schur system, so each
iteration factors one dense matrix of size (#equalities + #free).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# problem container


@dataclass
class VarBlock:
    name: str
    kind: str  # "free" | "nonneg" | "psd"
    dim: int
    offset: int

    @property
    def size(self) -> int:
        return self.dim * (self.dim + 1) // 2 if self.kind == "psd" else self.dim


class PsdVar:
    """Handle for a symmetric matrix variable; maps (i, j) to entry indices."""

    def __init__(self, block: VarBlock):
        self.block = block
        k = block.dim
        iu, ju = np.triu_indices(k)
        idx = np.empty((k, k), dtype=np.int64)
        ent = block.offset + np.arange(iu.size)
        idx[iu, ju] = ent
        idx[ju, iu] = ent
        self.index = idx

    @property
    def name(self) -> str:
        return self.block.name

    @property
    def dim(self) -> int:
        return self.block.dim

    def entry(self, i: int, j: int) -> int:
        return int(self.index[i, j])


class SdpProblem:
    def __init__(self):
        self.blocks: list[VarBlock] = []
        self._names: dict[str, VarBlock] = {}
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._rhs: list[np.ndarray] = []
        self._labels: list[str] = []
        self.n_equalities = 0
        self.objective: dict[int, float] = {}
        self.metadata: dict = {}

    # variables ----------------------------------------------------------------
    @property
    def n_entries(self) -> int:
        return sum(b.size for b in self.blocks)

    def _add(self, name: str, kind: str, dim: int) -> VarBlock:
        if name in self._names:
            raise ValueError(f"duplicate variable name {name!r}")
        if dim < 1:
            raise ValueError("variable dimension must be positive")
        blk = VarBlock(name, kind, int(dim), self.n_entries)
        self.blocks.append(blk)
        self._names[name] = blk
        return blk

    def add_free(self, name: str, count: int = 1) -> np.ndarray:
        blk = self._add(name, "free", count)
        return blk.offset + np.arange(count)

    def add_nonneg(self, name: str, count: int = 1) -> np.ndarray:
        blk = self._add(name, "nonneg", count)
        return blk.offset + np.arange(count)

    def add_psd(self, name: str, dim: int) -> PsdVar:
        return PsdVar(self._add(name, "psd", dim))

    def block(self, name: str) -> VarBlock:
        return self._names[name]

    @property
    def psd_vars(self) -> list[VarBlock]:
        return [b for b in self.blocks if b.kind == "psd"]

    @property
    def scalar_vars(self) -> list[VarBlock]:
        return [b for b in self.blocks if b.kind != "psd"]

    # constraints --------------------------------------------------------------
    def add_equality(self, cols: Sequence[int], vals: Sequence[float], rhs: float, label: str = "") -> None:
        self.add_equalities(sp.csr_matrix((np.asarray(vals, float), (np.zeros(len(cols), int), np.asarray(cols, int))),
                                          shape=(1, self.n_entries)), np.array([rhs], float), label)

    def add_equalities(self, mat, rhs, label: str = "") -> None:
        """Rows of ``mat`` (k x n_entries, any scipy sparse or dense) times entries == rhs."""
        coo = sp.coo_matrix(mat)
        rhs = np.asarray(rhs, dtype=float).ravel()
        if coo.shape[0] != rhs.size:
            raise ValueError("row count and rhs length differ")
        if coo.shape[1] > self.n_entries or (coo.nnz and coo.col.max() >= self.n_entries):
            raise ValueError("equality references an undeclared variable entry")
        self._rows.append(coo.row.astype(np.int64) + self.n_equalities)
        self._cols.append(coo.col.astype(np.int64))
        self._vals.append(coo.data.astype(float))
        self._rhs.append(rhs)
        self._labels.extend([label] * rhs.size)
        self.n_equalities += rhs.size

    def set_objective(self, cols: Sequence[int], vals: Sequence[float]) -> None:
        """Minimize sum vals[k] * entry[cols[k]]."""
        self.objective = {}
        for c, v in zip(cols, vals):
            self.objective[int(c)] = self.objective.get(int(c), 0.0) + float(v)

    def equality_system(self) -> tuple[sp.csr_matrix, np.ndarray]:
        n = self.n_entries
        if not self._rows:
            return sp.csr_matrix((0, n)), np.zeros(0)
        A = sp.csr_matrix((np.concatenate(self._vals), (np.concatenate(self._rows), np.concatenate(self._cols))),
                          shape=(self.n_equalities, n))
        A.sum_duplicates()
        A.eliminate_zeros()
        return A, np.concatenate(self._rhs)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_entries)
        for k, v in self.objective.items():
            c[k] += v
        return c

    @property
    def has_objective(self) -> bool:
        return any(v != 0.0 for v in self.objective.values())

    def stats(self) -> dict:
        return {
            "entries": self.n_entries,
            "equalities": self.n_equalities,
            "psd_blocks": [b.dim for b in self.psd_vars],
            "free": sum(b.size for b in self.blocks if b.kind == "free"),
            "nonneg": sum(b.size for b in self.blocks if b.kind == "nonneg"),
        }

    def locate(self, entry: int) -> tuple[str, int, int]:
        """(variable name, row, col) of an entry index."""
        for b in self.blocks:
            if b.offset <= entry < b.offset + b.size:
                k = entry - b.offset
                if b.kind == "psd":
                    iu, ju = np.triu_indices(b.dim)
                    return b.name, int(iu[k]), int(ju[k])
                return b.name, k, 0
        raise IndexError(entry)

    def dump(self, path) -> None:
        """Sparse text dump: one line per nonzero (constraint, var, row, col, value)."""
        A, b = self.equality_system()
        coo = A.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lookup = {}
        with open(path, "w") as fh:
            for k in order:
                e = int(coo.col[k])
                if e not in lookup:
                    lookup[e] = self.locate(e)
                name, r, c = lookup[e]
                fh.write(f"{int(coo.row[k])} {name} {r} {c} {coo.data[k]!r}\n")
            for i, v in enumerate(b):
                if v != 0.0:
                    fh.write(f"{i} rhs 0 0 {v!r}\n")
            for e, v in sorted(self.objective.items()):
                name, r, c = self.locate(e)
                fh.write(f"objective {name} {r} {c} {v!r}\n")


# ---------------------------------------------------------------------------
# solutions and settings


@dataclass
class SdpSettings:
    max_iters: int = 200
    feas_tol: float = 1e-9
    gap_tol: float = 1e-9
    eig_tol: float = 1e-8
    step_frac: float = 0.98
    infeas_tol: float = 1e-9
    infeas_threshold: float = 1e12
    reduced_tol: float = 1e-7
    reduced_gap_tol: float = 1e-5
    backend: str = "internal"
    verbose: bool = False

    @classmethod
    def from_json(cls, data: dict | str) -> "SdpSettings":
        if isinstance(data, str):
            data = json.loads(data)
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SdpSolution:
    status: str  # optimal | feasible | infeasible | unbounded | numerical_failure
    entries: np.ndarray | None
    values: dict = field(default_factory=dict)
    objective: float | None = None
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    gap: float = np.inf
    iterations: int = 0
    min_eigs: dict = field(default_factory=dict)
    certificate: np.ndarray | None = None
    runtime: float = 0.0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")

    def __getitem__(self, name):
        return self.values[name]


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# symmetric-vector helpers


def svec(X: np.ndarray) -> np.ndarray:
    k = X.shape[0]
    iu = np.triu_indices(k)
    scale = np.where(iu[0] == iu[1], 1.0, SQRT2)
    return X[iu] * scale


def smat(v: np.ndarray, k: int) -> np.ndarray:
    iu = np.triu_indices(k)
    scale = np.where(iu[0] == iu[1], 1.0, 1.0 / SQRT2)
    X = np.zeros((k, k))
    X[iu] = v * scale
    return X + np.triu(X, 1).T


def _svec_kron(V: np.ndarray) -> np.ndarray:
    """Matrix of U -> V U V acting on svec coordinates."""
    k = V.shape[0]
    i, j = np.triu_indices(k)
    a = np.where(i == j, 1.0, SQRT2)
    t = V[np.ix_(i, i)] * V[np.ix_(j, j)] + V[np.ix_(i, j)] * V[np.ix_(j, i)]
    return (0.5 * a[:, None] * a[None, :]) * t


def _factor(X: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(0.5 * (X + X.T))
        return Q * np.sqrt(np.maximum(w, 1e-300))


# ---------------------------------------------------------------------------
# internal interior-point solver


class _Cones:
    """Layout of the conic part: one nonnegative block then PSD blocks (svec)."""

    def __init__(self, nl: int, sdims: list[int]):
        self.nl = nl
        self.sdims = sdims
        self.slices = []
        off = nl
        for k in sdims:
            sz = k * (k + 1) // 2
            self.slices.append(slice(off, off + sz))
            off += sz
        self.size = off
        self.degree = nl + sum(sdims)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.size)
        e[: self.nl] = 1.0
        for k, sl in zip(self.sdims, self.slices):
            e[sl] = svec(np.eye(k))
        return e


class _Scaling:
    def __init__(self, cones: _Cones, x: np.ndarray, z: np.ndarray):
        self.cones = cones
        nl = cones.nl
        xl, zl = x[:nl], z[:nl]
        self.wl = np.sqrt(xl / zl)
        self.lam_l = np.sqrt(xl * zl)
        self.R, self.Rinv, self.lam_s, self.V = [], [], [], []
        for k, sl in zip(cones.sdims, cones.slices):
            L1 = _factor(smat(x[sl], k))
            L2 = _factor(smat(z[sl], k))
            U, s, Vt = np.linalg.svd(L2.T @ L1)
            s = np.maximum(s, 1e-300)
            isq = 1.0 / np.sqrt(s)
            R = (L1 @ Vt.T) * isq
            Rinv = (U.T * isq[:, None]) @ L2.T
            self.R.append(R)
            self.Rinv.append(Rinv)
            self.lam_s.append(s)
            self.V.append(R @ R.T)

    def D(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        nl = self.cones.nl
        out[:nl] = self.wl ** 2 * v[:nl]
        for k, sl, V in zip(self.cones.sdims, self.cones.slices, self.V):
            M = smat(v[sl], k)
            out[sl] = svec(V @ M @ V)
        return out

    def WT(self, v: np.ndarray) -> np.ndarray:
        """W^T applied to a scaled-space vector."""
        out = np.empty_like(v)
        nl = self.cones.nl
        out[:nl] = self.wl * v[:nl]
        for k, sl, R in zip(self.cones.sdims, self.cones.slices, self.R):
            out[sl] = svec(R @ smat(v[sl], k) @ R.T)
        return out

    def scale_x(self, dx: np.ndarray) -> list:
        """W^{-T} dx in scaled space, PSD blocks returned as matrices."""
        out = [dx[: self.cones.nl] / self.wl]
        for k, sl, Ri in zip(self.cones.sdims, self.cones.slices, self.Rinv):
            out.append(Ri @ smat(dx[sl], k) @ Ri.T)
        return out

    def scale_z(self, dz: np.ndarray) -> list:
        out = [self.wl * dz[: self.cones.nl]]
        for k, sl, R in zip(self.cones.sdims, self.cones.slices, self.R):
            out.append(R.T @ smat(dz[sl], k) @ R)
        return out

    def lam_sq(self) -> list:
        return [self.lam_l ** 2] + [np.diag(s ** 2) for s in self.lam_s]

    def solve_lam(self, r: list) -> np.ndarray:
        """xi with lambda o xi = r, packed as a flat cone vector."""
        out = np.empty(self.cones.size)
        nl = self.cones.nl
        out[:nl] = r[0] / self.lam_l
        for k, sl, s, rr in zip(self.cones.sdims, self.cones.slices, self.lam_s, r[1:]):
            out[sl] = svec(2.0 * rr / (s[:, None] + s[None, :]))
        return out

    def max_step(self, scaled: list) -> float:
        """Largest alpha keeping lambda + alpha * d inside the cone."""
        amax = np.inf
        d = scaled[0]
        neg = d < 0
        if np.any(neg):
            amax = min(amax, float(np.min(-self.lam_l[neg] / d[neg])))
        for s, M in zip(self.lam_s, scaled[1:]):
            isq = 1.0 / np.sqrt(s)
            rho = np.linalg.eigvalsh((M * isq[:, None]) * isq[None, :])[0]
            if rho < 0:
                amax = min(amax, -1.0 / rho)
        return amax


def _jordan(a: list, b: list) -> list:
    out = [a[0] * b[0]]
    for A, B in zip(a[1:], b[1:]):
        P = A @ B
        out.append(0.5 * (P + P.T))
    return out


def _ruiz(A: sp.csr_matrix, groups: np.ndarray, iters: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Row scaling r and column scaling c (constant within each group)."""
    m, n = A.shape
    r = np.ones(m)
    c = np.ones(n)
    ngroups = int(groups.max()) + 1 if n else 0
    absA = abs(A).tocsr()
    for _ in range(iters):
        S = sp.diags(r) @ absA @ sp.diags(c)
        rmax = S.max(axis=1).toarray().ravel() if m else np.zeros(0)
        rmax[rmax == 0] = 1.0
        r /= np.sqrt(rmax)
        S = sp.diags(r) @ absA @ sp.diags(c)
        cmax = S.max(axis=0).toarray().ravel() if n else np.zeros(0)
        gmax = np.zeros(ngroups)
        np.maximum.at(gmax, groups, cmax)
        gmax[gmax == 0] = 1.0
        c /= np.sqrt(gmax[groups])
    return r, c


def _ipm(A: sp.csr_matrix, b: np.ndarray, c: np.ndarray, nf: int, cones: _Cones, st: SdpSettings) -> dict:
    m = A.shape[0]
    ntot = A.shape[1]
    Af = A[:, :nf].tocsc()
    Ac = A[:, nf:].tocsc()
    cf, cc = c[:nf], c[nf:]
    AfT = Af.T.tocsr()
    AcT = Ac.T.tocsr()
    Ac_l = Ac[:, : cones.nl]
    Ac_s = [Ac[:, sl] for sl in cones.slices]

    e = cones.identity()
    xf = np.zeros(nf)
    xc = e.copy()
    z = e.copy()
    y = np.zeros(m)
    tau = kappa = 1.0
    nu = cones.degree

    nb = 1.0 + np.linalg.norm(b)
    nc = 1.0 + np.linalg.norm(c)
    status = "numerical_failure"
    msg = "iteration limit reached"
    info = {}
    best = None
    it = 0
    for it in range(st.max_iters + 1):
        Ax = Af @ xf + Ac @ xc
        rp = b * tau - Ax
        ATy_f = AfT @ y
        ATy_c = AcT @ y
        rd_f = ATy_f - cf * tau
        rd_c = ATy_c + z - cc * tau
        cx = float(cf @ xf + cc @ xc)
        by = float(b @ y)
        rg = kappa - by + cx
        compl = float(xc @ z)
        mu = (compl + tau * kappa) / (nu + 1)

        pres = np.linalg.norm(rp) / tau / nb
        dres = np.sqrt(np.linalg.norm(rd_f) ** 2 + np.linalg.norm(rd_c) ** 2) / tau / nc
        pcost, dcost = cx / tau, by / tau
        relgap = max(abs(pcost - dcost), compl / tau ** 2) / (1.0 + abs(pcost))
        info = dict(pres=pres, dres=dres, gap=relgap, pcost=pcost, dcost=dcost, tau=tau, kappa=kappa, mu=mu)
        if st.verbose:
            print(f"{it:3d} pres {pres:.2e} dres {dres:.2e} gap {relgap:.2e} pcost {pcost:.6e} "
                  f"tau {tau:.2e} kappa {kappa:.2e} t {time.perf_counter():.2f}")
        if pres <= st.feas_tol and dres <= st.feas_tol and relgap <= st.gap_tol:
            status, msg = "optimal", "converged"
            break
        # best iterate among those meeting the reduced feasibility target, ranked by gap
        if pres <= st.reduced_tol and dres <= st.reduced_tol and (best is None or relgap < best[0]):
            best = (relgap, xf.copy(), xc.copy(), y.copy(), z.copy(), tau, kappa, dict(info), it)
        if best is not None and best[0] <= st.reduced_gap_tol:
            if it - best[8] >= 8 or pres > 100 * max(best[7]["pres"], st.feas_tol):
                msg = "stalled"
                break
        # Farkas-type certificates when tau has collapsed relative to kappa
        if by > 0:
            pinf = np.sqrt(np.linalg.norm(ATy_f) ** 2 + np.linalg.norm(ATy_c + z) ** 2) / by
            if pinf <= st.infeas_tol or (tau < 1e-3 * kappa and by / max(tau, 1e-300) > st.infeas_threshold):
                status, msg = "infeasible", "dual ray certifies primal infeasibility"
                info["ray"] = y / by
                break
        if cx < 0:
            dinf = np.linalg.norm(Ax) / (-cx)
            if dinf <= st.infeas_tol:
                status, msg = "unbounded", "primal ray certifies dual infeasibility"
                break
        if it == st.max_iters:
            break

        try:
            W = _Scaling(cones, xc, z)
            Msch = sp.csr_matrix(Ac_l @ sp.diags(W.wl ** 2) @ Ac_l.T).toarray() if cones.nl else np.zeros((m, m))
            for k, As, V in zip(cones.sdims, Ac_s, W.V):
                K = _svec_kron(V)
                AK = As @ K  # (m x sk) dense
                Msch += (As @ AK.T).T if sp.issparse(As) else AK @ As.T
            Msch = 0.5 * (Msch + Msch.T)
            KKT = np.zeros((m + nf, m + nf))
            KKT[:m, :m] = Msch
            if nf:
                AfD = Af.toarray()
                KKT[:m, m:] = AfD
                KKT[m:, :m] = AfD.T
            scale = max(1.0, float(np.max(np.abs(np.diag(Msch)))) if m else 1.0)
            reg = np.concatenate([np.full(m, 1e-14 * scale), np.full(nf, -1e-12)])
            lu = sla.lu_factor(KKT + np.diag(reg), check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            msg = f"factorization failed: {exc}"
            break

        def ksolve(rhs):
            sol = sla.lu_solve(lu, rhs, check_finite=False)
            for _ in range(8):
                res = rhs - KKT @ sol
                if np.linalg.norm(res) <= 1e-14 * (1 + np.linalg.norm(rhs)):
                    break
                sol = sol + sla.lu_solve(lu, res, check_finite=False)
            return sol

        Dcc = W.D(cc)
        sol2 = ksolve(np.concatenate([b + Ac @ Dcc, cf]))
        dy2, dxf2 = sol2[:m], sol2[m:]
        dxc2 = W.D(AcT @ dy2 - cc)
        denom = -kappa / tau - (b @ dy2) + (cf @ dxf2 + cc @ dxc2)
        Drd = W.D(rd_c)

        def newton(eta, xi, rtau):
            WTxi = W.WT(xi)
            rhs1 = np.concatenate([eta * rp - Ac @ (WTxi + eta * Drd), -eta * rd_f])
            sol1 = ksolve(rhs1)
            dy1, dxf1 = sol1[:m], sol1[m:]
            dxc1 = WTxi + eta * Drd + W.D(AcT @ dy1)
            num = -eta * rg + (b @ dy1) - (cf @ dxf1 + cc @ dxc1) - rtau / tau
            dtau = num / denom
            dy = dy1 + dtau * dy2
            dxf = dxf1 + dtau * dxf2
            dxc = dxc1 + dtau * dxc2
            dz = -eta * rd_c - AcT @ dy + cc * dtau
            dkappa = (rtau - kappa * dtau) / tau
            return dxf, dxc, dy, dz, dtau, dkappa

        def step_len(dxc, dz, dtau, dkappa):
            sx = W.scale_x(dxc)
            sz = W.scale_z(dz)
            a = min(W.max_step(sx), W.max_step(sz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a, sx, sz

        lam = [W.lam_l] + [np.diag(s) for s in W.lam_s]
        lsq = W.lam_sq()
        xi_aff = W.solve_lam([-v for v in lsq])
        d_aff = newton(1.0, xi_aff, -tau * kappa)
        a_aff, sx, sz = step_len(d_aff[1], d_aff[3], d_aff[4], d_aff[5])
        a_aff = min(1.0, a_aff)
        sigma = (1.0 - a_aff) ** 3
        corr = _jordan(sx, sz)
        rc = []
        for k, (L2, C) in enumerate(zip(lsq, corr)):
            target = sigma * mu * (np.ones_like(L2) if k == 0 else np.eye(L2.shape[0]))
            rc.append(target - L2 - C)
        xi = W.solve_lam(rc)
        rtau = sigma * mu - tau * kappa - d_aff[4] * d_aff[5]
        dxf, dxc, dy, dz, dtau, dkappa = newton(1.0 - sigma, xi, rtau)
        amax, _, _ = step_len(dxc, dz, dtau, dkappa)
        alpha = min(1.0, st.step_frac * amax)
        if not np.isfinite(alpha) or alpha <= 1e-12:
            msg = "step length collapsed"
            break
        xf = xf + alpha * dxf
        xc = xc + alpha * dxc
        y = y + alpha * dy
        z = z + alpha * dz
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa
        del lam

    if status == "numerical_failure" and best is not None and best[0] <= st.reduced_gap_tol:
        _, xf, xc, y, z, tau, kappa, info, _ = best
        status, msg = "optimal", f"reduced accuracy ({msg})"
    return dict(status=status, msg=msg, x=np.concatenate([xf, xc]), y=y, z=z, tau=tau, kappa=kappa,
                iterations=it, info=info)


def _standard_form(problem: SdpProblem):
    """Permute entries into [free | nonneg | psd-svec] solver coordinates."""
    order_free, order_l, psd_blocks = [], [], []
    for blk in problem.blocks:
        idx = blk.offset + np.arange(blk.size)
        if blk.kind == "free":
            order_free.append(idx)
        elif blk.kind == "nonneg":
            order_l.append(idx)
        else:
            psd_blocks.append(blk)
    perm = [*order_free, *order_l]
    sdims = []
    scale = [np.ones(sum(len(p) for p in perm))]
    for blk in psd_blocks:
        k = blk.dim
        perm.append(blk.offset + np.arange(blk.size))
        iu = np.triu_indices(k)
        scale.append(np.where(iu[0] == iu[1], 1.0, SQRT2))
        sdims.append(k)
    perm = np.concatenate(perm) if perm else np.zeros(0, dtype=np.int64)
    svscale = np.concatenate(scale)
    nf = sum(len(p) for p in order_free)
    nl = sum(len(p) for p in order_l)
    return perm, svscale, nf, nl, sdims


def _unpack(problem: SdpProblem, entries: np.ndarray) -> dict:
    out = {}
    for blk in problem.blocks:
        v = entries[blk.offset: blk.offset + blk.size]
        if blk.kind == "psd":
            k = blk.dim
            X = np.zeros((k, k))
            iu = np.triu_indices(k)
            X[iu] = v
            X = X + np.triu(X, 1).T
            out[blk.name] = X
        else:
            out[blk.name] = v.copy()
    return out


def _finalize(problem: SdpProblem, entries: np.ndarray, status: str, st: SdpSettings, **kw) -> SdpSolution:
    A, b = problem.equality_system()
    values = _unpack(problem, entries)
    min_eigs = {blk.name: float(np.linalg.eigvalsh(values[blk.name])[0]) for blk in problem.psd_vars}
    nonneg_min = min((float(values[blk.name].min()) for blk in problem.blocks if blk.kind == "nonneg"), default=0.0)
    pres = float(np.max(np.abs(A @ entries - b))) if A.shape[0] else 0.0
    c = problem.objective_vector()
    sol = SdpSolution(status=status, entries=entries, values=values, objective=float(c @ entries),
                      primal_residual=pres, min_eigs=min_eigs, **kw)
    if sol.ok:
        worst = min([nonneg_min] + list(min_eigs.values()))
        if pres > 1e-7 or worst < -st.eig_tol:
            sol.message = (f"{sol.message}; solution rejected by independent re-check "
                           f"(equality residual {pres:.2e}, min eigenvalue {worst:.2e})")
            sol.status = "numerical_failure"
    return sol


def _polish(A: sp.csr_matrix, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Minimum-norm correction of x onto {Ax = b}."""
    r = b - A @ x
    if not r.size or np.max(np.abs(r)) == 0.0:
        return x
    dx = sla.lstsq(A.toarray(), r, lapack_driver="gelsy", check_finite=False)[0]
    return x + dx


def solve(problem: SdpProblem, settings: SdpSettings | None = None) -> SdpSolution:
    """Solve with the backend named in settings ("internal" or "cvxopt")."""
    st = settings or SdpSettings()
    t0 = time.perf_counter()
    if st.backend == "cvxopt":
        sol = _solve_cvxopt(problem, st)
    elif st.backend == "internal":
        sol = _solve_internal(problem, st)
    else:
        raise ValueError(f"unknown SDP backend {st.backend!r}")
    sol.runtime = time.perf_counter() - t0
    return sol


def _solve_internal(problem: SdpProblem, st: SdpSettings) -> SdpSolution:
    A0, b0 = problem.equality_system()
    c0 = problem.objective_vector()
    # rows without entries must be trivially satisfied
    nnz_rows = np.diff(A0.indptr)
    empty = nnz_rows == 0
    if np.any(np.abs(b0[empty]) > 1e-12):
        return SdpSolution("infeasible", None, message="an equality has no variables but a nonzero right-hand side")
    A0, b0 = A0[~empty], b0[~empty]

    perm, svscale, nf, nl, sdims = _standard_form(problem)
    cones = _Cones(nl, sdims)
    # solver coordinates: xs = svscale * entries[perm]
    A = (A0[:, perm] @ sp.diags(1.0 / svscale)).tocsr()
    c = c0[perm] / svscale
    groups = np.concatenate([np.arange(nf + nl)] + [np.full(sl.stop - sl.start, nf + nl + i)
                                                    for i, sl in enumerate(cones.slices)]).astype(int)
    r, cs = _ruiz(A, groups)
    As = (sp.diags(r) @ A @ sp.diags(cs)).tocsr()
    bs = r * b0
    cs_vec = cs * c
    bscale = max(1.0, np.max(np.abs(bs)) if bs.size else 1.0)
    cscale = max(1.0, np.max(np.abs(cs_vec)) if cs_vec.size else 1.0)
    out = _ipm(As, bs / bscale, cs_vec / cscale, nf, cones, st)
    tau = out["tau"]
    xs = out["x"] / tau * bscale * cs
    entries = np.zeros(problem.n_entries)
    entries[perm] = xs / svscale
    info = out["info"]
    kw = dict(iterations=out["iterations"], dual_residual=info.get("dres", np.inf), gap=info.get("gap", np.inf),
              message=out["msg"])
    if out["status"] == "optimal":
        entries = _polish(A0, b0, entries)
        status = "optimal" if problem.has_objective else "feasible"
        return _finalize(problem, entries, status, st, **kw)
    if out["status"] == "infeasible":
        ray = np.zeros(problem.n_equalities)
        ray[np.flatnonzero(~empty)] = r * out["info"]["ray"]
        sol = SdpSolution("infeasible", None, certificate=ray, **kw)
        return sol
    if out["status"] == "unbounded":
        return SdpSolution("unbounded", None, **kw)
    sol = _finalize(problem, entries, "numerical_failure", st, **kw)
    sol.primal_residual = info.get("pres", np.inf)
    return sol


def _solve_cvxopt(problem: SdpProblem, st: SdpSettings) -> SdpSolution:
    try:
        import cvxopt
        from cvxopt import solvers
    except ImportError as exc:  # pragma: no cover
        raise SolverError("cvxopt backend requested but cvxopt is not installed") from exc
    A0, b0 = problem.equality_system()
    c0 = problem.objective_vector()
    n = problem.n_entries
    Gi, Gj, Gv = [], [], []
    row = 0
    dims = {"l": 0, "q": [], "s": []}
    for blk in problem.blocks:
        if blk.kind == "nonneg":
            for k in range(blk.size):
                Gi.append(row); Gj.append(blk.offset + k); Gv.append(-1.0)
                row += 1
            dims["l"] += blk.size
    # nonneg rows must precede PSD rows in cvxopt's layout
    for blk in problem.blocks:
        if blk.kind == "psd":
            k = blk.dim
            pv = PsdVar(blk)
            for jcol in range(k):
                for irow in range(k):
                    if irow >= jcol:
                        Gi.append(row + jcol * k + irow)
                        Gj.append(pv.entry(irow, jcol))
                        Gv.append(-1.0)
            row += k * k
            dims["s"].append(k)
    G = cvxopt.spmatrix(Gv, Gi, Gj, (row, n))
    h = cvxopt.matrix(0.0, (row, 1))
    Acoo = A0.tocoo()
    Acv = cvxopt.spmatrix(Acoo.data.tolist(), Acoo.row.tolist(), Acoo.col.tolist(), A0.shape)
    opts = {"show_progress": st.verbose, "abstol": 1e-9, "reltol": 1e-9, "feastol": 1e-9,
            "maxiters": min(st.max_iters, 500)}
    try:
        res = solvers.conelp(cvxopt.matrix(c0), G, h, dims, Acv, cvxopt.matrix(b0), options=opts)
    except (ValueError, ArithmeticError) as exc:
        return SdpSolution("numerical_failure", None, message=f"cvxopt: {exc}")
    status = res["status"]
    if status == "optimal":
        entries = _polish(A0, b0, np.array(res["x"]).ravel())
        return _finalize(problem, entries, "optimal" if problem.has_objective else "feasible", st,
                         iterations=int(res["iterations"]), message="cvxopt")
    if status == "primal infeasible":
        return SdpSolution("infeasible", None, certificate=np.array(res["y"]).ravel(), message="cvxopt")
    if status == "dual infeasible":
        return SdpSolution("unbounded", None, message="cvxopt")
    entries = np.array(res["x"]).ravel() if res["x"] is not None else None
    return SdpSolution("numerical_failure", entries, message=f"cvxopt: {status}")


# ---------------------------------------------------------------------------
# largest eigenvalue of a symmetric operator


class SymmetryError(ValueError):
    pass


def check_symmetric(matvec: Callable, dim: int, probes: int = 3, tol: float = 1e-10, seed: int = 7) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        u = rng.standard_normal(dim)
        v = rng.standard_normal(dim)
        Au, Av = matvec(u), matvec(v)
        lhs, rhs = float(v @ Au), float(u @ Av)
        scale = max(1.0, np.linalg.norm(Au) * np.linalg.norm(v), np.linalg.norm(Av) * np.linalg.norm(u))
        if abs(lhs - rhs) > tol * scale:
            raise SymmetryError(f"operator is not symmetric: <v,Au> = {lhs:.6g}, <u,Av> = {rhs:.6g}")


def lambda_max_structured(matvec: Callable, dim: int, tol: float = 1e-8, seed: int = 0,
                          max_iter: int | None = None, check: bool = True) -> float:
    """Largest eigenvalue of a symmetric operator by Lanczos with full reorthogonalization.

    Stops when the Ritz residual of the top Ritz pair drops below
    ``tol`` times the largest Ritz value magnitude.
    """
    if dim < 1:
        raise ValueError("dimension must be positive")
    if check:
        check_symmetric(matvec, dim)
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    kmax = dim if max_iter is None else min(dim, max_iter)
    Q = np.empty((kmax + 1, dim))
    Q[0] = q
    alpha, beta = [], []
    theta = None
    for k in range(kmax):
        w = np.asarray(matvec(Q[k]), dtype=float)
        a = float(Q[k] @ w)
        alpha.append(a)
        w = w - a * Q[k]
        if k > 0:
            w = w - beta[-1] * Q[k - 1]
        for _ in range(2):
            w -= Q[: k + 1].T @ (Q[: k + 1] @ w)
        bnorm = float(np.linalg.norm(w))
        if k == 0:
            vals, vecs = np.array([a]), np.array([[1.0]])
        else:
            vals, vecs = sla.eigh_tridiagonal(np.array(alpha), np.array(beta))
        theta = float(vals[-1])
        resid = bnorm * abs(vecs[-1, -1])
        scale = max(abs(vals[0]), abs(vals[-1]), 1e-300)
        if bnorm <= 1e-14 * scale or resid <= tol * scale * 1e-2:
            return theta
        beta.append(bnorm)
        Q[k + 1] = w / bnorm
    return float(theta)
