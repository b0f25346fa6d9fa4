"""Compilation of scalar and matrix sum-of-squares constraints into SDP equalities.

A constraint states that a polynomial matrix M(x), affine in SDP decision
entries, is positive semidefinite on a box.  It is certified by

    v^T M(x) v - sum_k phi_k(x) b_k(x) |v|^2 - sum_k psi_k(x) e_k(x) |v|^2
        = (z(x) (x) v)^T G (z(x) (x) v),      G >= 0,

where b_k >= 0 describe the non-degenerate box axes, e_k = 0 the degenerate
ones, phi_k are SOS (Gram-parameterized) and psi_k are free polynomials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .models import Box, Region
from .polyalg import Monomial, PolyMatrix, Polynomial, mono_degree, mono_mul, monomials_up_to
from .sdp import PsdVar, SdpProblem


class OddDegreeError(ValueError):
    """The leading form has odd degree, so no SOS decomposition can exist."""


class DegreeBoundError(ValueError):
    pass


class AsymmetryError(ValueError):
    pass


def _pad(L: sp.csr_matrix, ncols: int) -> sp.csr_matrix:
    if L.shape[1] == ncols:
        return L
    return sp.csr_matrix((L.data, L.indices, L.indptr), shape=(L.shape[0], ncols))


class AffExpr:
    """Polynomial matrix in x whose coefficients are affine in SDP entries.

    Per monomial the coefficient is ``const + reshape(lin @ entries)`` with
    ``lin`` of shape (rows * cols, n_entries) in row-major flattening.
    """

    def __init__(self, rows: int, cols: int, nvars: int, const=None, lin=None, nent: int = 0):
        self.rows, self.cols, self.nvars = int(rows), int(cols), int(nvars)
        self.nent = int(nent)
        self.const: dict[Monomial, np.ndarray] = dict(const or {})
        self.lin: dict[Monomial, sp.csr_matrix] = {}
        for m, L in (lin or {}).items():
            L = sp.csr_matrix(L)
            self.nent = max(self.nent, L.shape[1])
            self.lin[m] = L
        for m in list(self.lin):
            self.lin[m] = _pad(self.lin[m], self.nent)

    # constructors ---------------------------------------------------------------
    @classmethod
    def zeros(cls, rows: int, cols: int, nvars: int) -> "AffExpr":
        return cls(rows, cols, nvars)

    @classmethod
    def constant(cls, mat, nvars: int) -> "AffExpr":
        if isinstance(mat, PolyMatrix):
            return cls(mat.rows, mat.cols, nvars, {m: c.copy() for m, c in mat.coeffs.items()})
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        return cls(mat.shape[0], mat.shape[1], nvars, {(0,) * nvars: mat.copy()})

    @classmethod
    def entries(cls, index, nvars: int, coef=1.0, mono: Monomial | None = None, nent: int = 0) -> "AffExpr":
        """Matrix whose (i, j) element is coef[i, j] * entry[index[i, j]] (index < 0 means zero)."""
        index = np.atleast_2d(np.asarray(index, dtype=np.int64))
        r, c = index.shape
        coef = np.broadcast_to(np.asarray(coef, dtype=float), (r, c))
        flat = index.ravel()
        keep = flat >= 0
        rows = np.arange(r * c)[keep]
        nent = max(nent, int(flat.max()) + 1 if keep.any() else 0)
        L = sp.csr_matrix((coef.ravel()[keep], (rows, flat[keep])), shape=(r * c, nent))
        mono = (0,) * nvars if mono is None else tuple(mono)
        return cls(r, c, nvars, lin={mono: L}, nent=nent)

    @classmethod
    def psd(cls, var: PsdVar, nvars: int) -> "AffExpr":
        return cls.entries(var.index, nvars)

    @classmethod
    def scalar(cls, idx: int, mat, nvars: int) -> "AffExpr":
        """entry[idx] times a constant matrix."""
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        index = np.where(mat != 0.0, idx, -1)
        return cls.entries(index, nvars, coef=mat)

    # structure -----------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def monomials(self) -> list[Monomial]:
        mons = set(m for m, c in self.const.items() if np.any(c != 0.0))
        mons |= set(m for m, L in self.lin.items() if L.nnz)
        return sorted(mons, key=lambda m: (mono_degree(m), tuple(-e for e in m)))

    @property
    def degree(self) -> int:
        return max((mono_degree(m) for m in self.monomials()), default=0)

    def _coef(self, m: Monomial, nent: int) -> tuple[np.ndarray, sp.csr_matrix]:
        c = self.const.get(m)
        if c is None:
            c = np.zeros((self.rows, self.cols))
        L = self.lin.get(m)
        L = sp.csr_matrix((self.rows * self.cols, nent)) if L is None else _pad(L, nent)
        return c, L

    # arithmetic ----------------------------------------------------------------
    def _lift(self, other) -> "AffExpr":
        if isinstance(other, AffExpr):
            return other
        if isinstance(other, PolyMatrix):
            return AffExpr.constant(other, self.nvars)
        return AffExpr.constant(np.broadcast_to(np.asarray(other, float), self.shape), self.nvars)

    def __add__(self, other) -> "AffExpr":
        other = self._lift(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        nent = max(self.nent, other.nent)
        const = {m: c.copy() for m, c in self.const.items()}
        for m, c in other.const.items():
            const[m] = const[m] + c if m in const else c.copy()
        lin = {m: _pad(L, nent) for m, L in self.lin.items()}
        for m, L in other.lin.items():
            L = _pad(L, nent)
            lin[m] = lin[m] + L if m in lin else L
        return AffExpr(self.rows, self.cols, self.nvars, const, lin, nent)

    __radd__ = __add__

    def __neg__(self) -> "AffExpr":
        return self * -1.0

    def __sub__(self, other) -> "AffExpr":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "AffExpr":
        return self._lift(other) + (-self)

    def __mul__(self, s: float) -> "AffExpr":
        s = float(s)
        return AffExpr(self.rows, self.cols, self.nvars, {m: s * c for m, c in self.const.items()},
                       {m: s * L for m, L in self.lin.items()}, self.nent)

    __rmul__ = __mul__

    @property
    def T(self) -> "AffExpr":
        r, c = self.rows, self.cols
        # new flat (j, i) <- old flat (i, j)
        perm = (np.arange(r * c).reshape(r, c).T).ravel()
        return AffExpr(c, r, self.nvars, {m: C.T.copy() for m, C in self.const.items()},
                       {m: L[perm] for m, L in self.lin.items()}, self.nent)

    def lmul(self, K) -> "AffExpr":
        """K @ self for a constant matrix or a constant PolyMatrix K."""
        if isinstance(K, PolyMatrix):
            out = AffExpr.zeros(K.rows, self.cols, self.nvars)
            for mk, Ck in K.coeffs.items():
                out = out + self.lmul(Ck).shift(mk)
            return out
        K = np.atleast_2d(np.asarray(K, dtype=float))
        if K.shape[1] != self.rows:
            raise ValueError("shape mismatch in left product")
        kr = sp.kron(sp.csr_matrix(K), sp.identity(self.cols, format="csr"), format="csr")
        return AffExpr(K.shape[0], self.cols, self.nvars, {m: K @ C for m, C in self.const.items()},
                       {m: kr @ L for m, L in self.lin.items()}, self.nent)

    def rmul(self, R) -> "AffExpr":
        """self @ R for a constant matrix R."""
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if R.shape[0] != self.cols:
            raise ValueError("shape mismatch in right product")
        kr = sp.kron(sp.identity(self.rows, format="csr"), sp.csr_matrix(R.T), format="csr")
        return AffExpr(self.rows, R.shape[1], self.nvars, {m: C @ R for m, C in self.const.items()},
                       {m: kr @ L for m, L in self.lin.items()}, self.nent)

    def shift(self, mono: Monomial) -> "AffExpr":
        """Multiply every coefficient by the monomial x^mono."""
        mono = tuple(mono)
        return AffExpr(self.rows, self.cols, self.nvars, {mono_mul(m, mono): c for m, c in self.const.items()},
                       {mono_mul(m, mono): L for m, L in self.lin.items()}, self.nent)

    @staticmethod
    def bmat(blocks: Sequence[Sequence["AffExpr | None"]]) -> "AffExpr":
        heights = []
        for row in blocks:
            hs = {b.rows for b in row if b is not None}
            if len(hs) != 1:
                raise ValueError("inconsistent block heights")
            heights.append(hs.pop())
        widths = []
        for j in range(len(blocks[0])):
            ws = {row[j].cols for row in blocks if row[j] is not None}
            if len(ws) != 1:
                raise ValueError("inconsistent block widths")
            widths.append(ws.pop())
        R, C = sum(heights), sum(widths)
        ro = np.concatenate([[0], np.cumsum(heights)])
        co = np.concatenate([[0], np.cumsum(widths)])
        first = next(b for row in blocks for b in row if b is not None)
        out = AffExpr.zeros(R, C, first.nvars)
        for bi, row in enumerate(blocks):
            for bj, blk in enumerate(row):
                if blk is None:
                    continue
                ii, jj = np.meshgrid(np.arange(blk.rows), np.arange(blk.cols), indexing="ij")
                big = ((ro[bi] + ii) * C + (co[bj] + jj)).ravel()
                sel = sp.csr_matrix((np.ones(big.size), (big, np.arange(big.size))), shape=(R * C, big.size))
                const = {}
                for m, c in blk.const.items():
                    full = np.zeros((R, C))
                    full[ro[bi]:ro[bi + 1], co[bj]:co[bj + 1]] = c
                    const[m] = full
                lin = {m: (sel @ L).tocsr() for m, L in blk.lin.items()}
                out = out + AffExpr(R, C, blk.nvars, const, lin, blk.nent)
        return out

    # evaluation ----------------------------------------------------------------
    def value(self, entries: np.ndarray) -> PolyMatrix:
        entries = np.asarray(entries, dtype=float)
        coeffs: dict[Monomial, np.ndarray] = {}
        for m in set(self.const) | set(self.lin):
            c, L = self._coef(m, self.nent)
            coeffs[m] = c + (L @ entries[: self.nent]).reshape(self.rows, self.cols)
        return PolyMatrix(self.rows, self.cols, self.nvars, coeffs)

    def asymmetry(self) -> float:
        """Largest coefficient of self - self^T (constants and linear maps)."""
        if self.rows != self.cols:
            return np.inf
        tr = self.T
        worst = 0.0
        for m in set(self.const) | set(self.lin) | set(tr.lin):
            c1, L1 = self._coef(m, self.nent)
            c2, L2 = tr._coef(m, self.nent)
            worst = max(worst, float(np.max(np.abs(c1 - c2), initial=0.0)))
            d = (L1 - L2)
            if d.nnz:
                worst = max(worst, float(np.max(np.abs(d.data))))
        return worst

    def symmetrized(self) -> "AffExpr":
        return 0.5 * (self + self.T)


def add_zero_constraint(problem: SdpProblem, expr: AffExpr, label: str = "") -> int:
    """Impose expr(x) == 0 identically (every coefficient); returns rows added."""
    nent = problem.n_entries
    added = 0
    for m in sorted(set(expr.const) | set(expr.lin)):
        c, L = expr._coef(m, nent)
        keep = np.flatnonzero((np.diff(L.indptr) > 0) | (c.ravel() != 0.0))
        if keep.size:
            problem.add_equalities(L[keep], -c.ravel()[keep], label)
            added += keep.size
    return added


# ---------------------------------------------------------------------------
# SOS constraints


@dataclass
class SosConstraint:
    expr: AffExpr
    region: Region | Box | None = None
    multiplier_degree: int = 2
    kind: str = "scalar"

    def __post_init__(self):
        if self.multiplier_degree < 0 or self.multiplier_degree % 2:
            raise ValueError("multiplier degree must be a non-negative even integer")
        if self.kind not in ("scalar", "matrix"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "scalar" and self.expr.shape != (1, 1):
            raise ValueError("scalar constraint needs a 1x1 expression")
        if self.kind == "matrix" and self.expr.rows != self.expr.cols:
            raise ValueError("matrix constraint needs a square expression")


@dataclass
class SosFragment:
    name: str
    expr: AffExpr
    size: int
    basis: list
    gram: PsdVar
    box: Box | None
    ineq: list = field(default_factory=list)  # (b_k polynomial, basis, handle) ; handle PsdVar or index array
    eq: list = field(default_factory=list)  # (e_k polynomial, monomials, index array)
    rows: int = 0

    def multiplier_polys(self, entries: np.ndarray) -> list[Polynomial]:
        out = []
        for _, basis, handle in self.ineq:
            out.append(_sos_poly(basis, handle, entries, self.expr.nvars))
        for _, mons, idx in self.eq:
            out.append(Polynomial(self.expr.nvars, {m: float(entries[i]) for m, i in zip(mons, idx)}))
        return out

    def reconstruct(self, entries: np.ndarray) -> PolyMatrix:
        """Gram part plus multiplier terms, as a polynomial matrix."""
        s, nv = self.size, self.expr.nvars
        G = entries[self.gram.index]
        coeffs: dict[Monomial, np.ndarray] = {}
        for p, zp in enumerate(self.basis):
            for q, zq in enumerate(self.basis):
                m = mono_mul(zp, zq)
                blk = G[p * s:(p + 1) * s, q * s:(q + 1) * s]
                coeffs[m] = coeffs[m] + blk if m in coeffs else blk.copy()
        out = PolyMatrix(s, s, nv, coeffs)
        polys = [b for b, _, _ in self.ineq] + [e for e, _, _ in self.eq]
        eye = np.eye(s)
        for b, phi in zip(polys, self.multiplier_polys(entries)):
            prod = b * phi
            out = out + PolyMatrix(s, s, nv, {m: c * eye for m, c in prod.terms.items()})
        return out

    def residual(self, entries: np.ndarray) -> float:
        target = self.expr.value(entries)
        target = 0.5 * (target + target.T)
        diff = target - self.reconstruct(entries)
        return max((float(np.max(np.abs(c))) for c in diff.coeffs.values()), default=0.0)


def _sos_poly(basis, handle, entries, nvars) -> Polynomial:
    if isinstance(handle, PsdVar):
        Q = entries[handle.index]
        terms: dict[Monomial, float] = {}
        for p, zp in enumerate(basis):
            for q, zq in enumerate(basis):
                m = mono_mul(zp, zq)
                terms[m] = terms.get(m, 0.0) + Q[p, q]
        return Polynomial(nvars, terms)
    return Polynomial(nvars, {(0,) * nvars: float(entries[int(handle[0])])})


def _as_box(region) -> Box | None:
    if region is None:
        return None
    if isinstance(region, Box):
        return region
    if len(region.boxes) != 1:
        raise ValueError("SOS constraints take a single box; split unions into one constraint per box")
    return region.boxes[0]


def compile_sos(problem: SdpProblem, c: SosConstraint, name: str = "sos",
                max_matrix_degree: int = 2) -> SosFragment:
    expr = c.expr
    s = expr.rows
    nv = expr.nvars
    if c.kind == "matrix":
        asym = expr.asymmetry()
        if asym > 1e-10:
            raise AsymmetryError(f"matrix expression is asymmetric (max coefficient {asym:.3g})")
    box = _as_box(c.region)
    if box is not None and box.n != nv:
        raise ValueError("region dimension differs from the expression's variable count")
    deg = expr.degree
    if c.kind == "matrix" and deg > max_matrix_degree:
        raise DegreeBoundError(f"matrix expression has degree {deg} > bound {max_matrix_degree}")
    md = c.multiplier_degree
    ineq_axes = [] if box is None else [k for k in range(nv) if k not in box.degenerate_axes()]
    eq_axes = [] if box is None else box.degenerate_axes()
    top = max(deg, md + 2 if ineq_axes else 0)
    if c.kind == "scalar" and deg % 2 == 1 and deg >= top:
        raise OddDegreeError(f"leading form has odd degree {deg}; no SOS certificate can exist")
    d = math.ceil(top / 2)
    basis = monomials_up_to(nv, d)
    nz = len(basis)
    gram = problem.add_psd(f"{name}.gram", nz * s)
    allm = monomials_up_to(nv, 2 * d)
    gpos = {m: i for i, m in enumerate(allm)}
    ti, tj = np.triu_indices(s)
    npairs = ti.size
    pidx = np.zeros((s, s), dtype=np.int64)
    pidx[ti, tj] = np.arange(npairs)
    diag_rows = pidx[np.arange(s), np.arange(s)]

    R, Cc, V = [], [], []
    # Gram side (enters with a minus sign)
    gvals = -np.where(ti == tj, 1.0, 2.0)
    for p, zp in enumerate(basis):
        for q, zq in enumerate(basis):
            g = gpos[mono_mul(zp, zq)]
            R.append(g * npairs + np.arange(npairs))
            Cc.append(gram.index[p * s + ti, q * s + tj])
            V.append(gvals)
    # inequality multipliers
    ineq = []
    bpolys = box.constraint_polys() if box is not None else []
    for k in ineq_axes:
        b = bpolys[k]
        if md == 0:
            handle = problem.add_nonneg(f"{name}.phi{k}")
            mb = [(0,) * nv]
            pairs = [((0,) * nv, int(handle[0]))]
        else:
            mb = monomials_up_to(nv, md // 2)
            handle = problem.add_psd(f"{name}.phi{k}", len(mb))
            pairs = [(mono_mul(zp, zq), handle.index[p, q]) for p, zp in enumerate(mb) for q, zq in enumerate(mb)]
        for mono, ent in pairs:
            for bm, bc in b.terms.items():
                g = gpos[mono_mul(mono, bm)]
                R.append(g * npairs + diag_rows)
                Cc.append(np.full(s, ent))
                V.append(np.full(s, -bc))
        ineq.append((b, mb, handle))
    # equality multipliers for degenerate axes
    eq = []
    for k in eq_axes:
        e = Polynomial.variable(nv, k) - box.lower[k]
        mons = monomials_up_to(nv, 2 * d - 1)
        idx = problem.add_free(f"{name}.psi{k}", len(mons))
        for mono, ent in zip(mons, idx):
            for em, ec in e.terms.items():
                g = gpos[mono_mul(mono, em)]
                R.append(g * npairs + diag_rows)
                Cc.append(np.full(s, ent))
                V.append(np.full(s, -ec))
        eq.append((e, mons, idx))

    nent = problem.n_entries
    nrows = len(allm) * npairs
    A = sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(Cc))), shape=(nrows, nent))
    rhs = np.zeros(nrows)
    # expression side: pair (a, b) collects M[a, b] + M[b, a] (a < b) or M[a, a]
    flat_ab = ti * s + tj
    flat_ba = tj * s + ti
    off = ti != tj
    selm = sp.csr_matrix((np.concatenate([np.ones(npairs), np.ones(int(off.sum()))]),
                          (np.concatenate([np.arange(npairs), np.arange(npairs)[off]]),
                           np.concatenate([flat_ab, flat_ba[off]]))), shape=(npairs, s * s))
    blocks = []
    for m in set(expr.const) | set(expr.lin):
        if m not in gpos:
            raise DegreeBoundError(f"monomial {m} exceeds the Gram basis degree")
        cm, Lm = expr._coef(m, nent)
        g = gpos[m]
        rhs[g * npairs:(g + 1) * npairs] -= selm @ cm.ravel()
        blocks.append((g, selm @ Lm))
    if blocks:
        rows_e, cols_e, vals_e = [], [], []
        for g, L in blocks:
            L = L.tocoo()
            rows_e.append(L.row + g * npairs)
            cols_e.append(L.col)
            vals_e.append(L.data)
        A = A + sp.csr_matrix((np.concatenate(vals_e), (np.concatenate(rows_e), np.concatenate(cols_e))),
                              shape=(nrows, nent))
    A = A.tocsr()
    A.sum_duplicates()
    problem.add_equalities(A, rhs, name)
    return SosFragment(name=name, expr=expr, size=s, basis=basis, gram=gram, box=box, ineq=ineq, eq=eq, rows=nrows)


def compile_scalar_sos(problem: SdpProblem, c: SosConstraint, name: str = "sos") -> SosFragment:
    if c.kind != "scalar":
        raise ValueError("compile_scalar_sos needs kind = scalar")
    return compile_sos(problem, c, name)


def compile_matrix_sos(problem: SdpProblem, c: SosConstraint, name: str = "msos",
                       max_degree: int = 2) -> SosFragment:
    if c.kind != "matrix":
        raise ValueError("compile_matrix_sos needs kind = matrix")
    return compile_sos(problem, c, name, max_matrix_degree=max_degree)


def poly_expr(p: Polynomial | PolyMatrix) -> AffExpr:
    """Constant polynomial (matrix) as an expression."""
    if isinstance(p, Polynomial):
        return AffExpr(1, 1, p.nvars, {m: np.array([[c]]) for m, c in p.terms.items()})
    return AffExpr.constant(p, p.nvars)
