"""Multivariate polynomial algebra, monomial dictionaries and the Theta factorization.

Monomials are plain tuples of non-negative exponents.  A ``Polynomial`` maps
monomials to float coefficients; a ``PolyMatrix`` stores one dense coefficient
matrix per monomial, which keeps products with constant matrices cheap.
"""

from __future__ import annotations

import itertools
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np

Monomial = tuple


class SingularThetaError(ValueError):
    """Raised when Theta(x) loses full column rank at a point."""

    def __init__(self, x):
        self.point = np.asarray(x, dtype=float)
        super().__init__(f"Theta(x) is rank deficient at x = {self.point.tolist()}")


def mono_degree(m: Monomial) -> int:
    return int(sum(m))


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(i + j for i, j in zip(a, b))


def mono_str(m: Monomial, names: Sequence[str] | None = None) -> str:
    if names is None:
        names = [f"x{i + 1}" for i in range(len(m))]
    parts = []
    for name, e in zip(names, m):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(f"{name}^{e}")
    return "*".join(parts) if parts else "1"


def monomials_up_to(n: int, dmax: int, dmin: int = 0) -> list[Monomial]:
    """All monomials with dmin <= degree <= dmax, graded-lex order (x1 > x2 > ...)."""
    def compositions(d: int, k: int):
        if k == 1:
            yield (d,)
            return
        for first in range(d, -1, -1):
            for rest in compositions(d - first, k - 1):
                yield (first,) + rest

    out: list[Monomial] = []
    for d in range(dmin, dmax + 1):
        out.extend(compositions(d, n))
    return out


def eval_monomials(exps: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate monomials (rows of ``exps``) at points ``x`` of shape (..., n).

    Returns an array of shape (..., len(exps)).
    """
    x = np.asarray(x, dtype=float)
    exps = np.asarray(exps, dtype=int)
    if exps.size == 0:
        return np.ones(x.shape[:-1] + (0,))
    dmax = int(exps.max()) if exps.size else 0
    # powers[..., k, d] = x_k ** d, built by repeated multiplication (exact for small ints)
    powers = np.ones(x.shape + (dmax + 1,))
    for d in range(1, dmax + 1):
        powers[..., d] = powers[..., d - 1] * x
    n = exps.shape[1]
    out = np.ones(x.shape[:-1] + (exps.shape[0],))
    for k in range(n):
        out *= powers[..., k, :][..., exps[:, k]]
    return out


class Polynomial:
    """Sparse real polynomial in ``nvars`` variables."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Mapping[Monomial, float] | None = None):
        self.nvars = int(nvars)
        clean: dict[Monomial, float] = {}
        for m, c in (terms or {}).items():
            m = tuple(int(e) for e in m)
            if len(m) != self.nvars or any(e < 0 for e in m):
                raise ValueError(f"bad monomial {m} for {self.nvars} variables")
            c = float(c)
            if c != 0.0:
                clean[m] = clean.get(m, 0.0) + c
        self.terms = {m: c for m, c in clean.items() if c != 0.0}

    @classmethod
    def constant(cls, nvars: int, c: float) -> "Polynomial":
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def variable(cls, nvars: int, i: int) -> "Polynomial":
        m = [0] * nvars
        m[i] = 1
        return cls(nvars, {tuple(m): 1.0})

    @classmethod
    def from_monomial(cls, m: Monomial, c: float = 1.0) -> "Polynomial":
        return cls(len(m), {tuple(m): c})

    @property
    def degree(self) -> int:
        return max((mono_degree(m) for m in self.terms), default=0)

    def coefficient(self, m: Monomial) -> float:
        return self.terms.get(tuple(m), 0.0)

    def is_zero(self) -> bool:
        return not self.terms

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("variable count mismatch")
            return other
        return Polynomial.constant(self.nvars, float(other))

    def __add__(self, other):
        other = self._coerce(other)
        terms = dict(self.terms)
        for m, c in other.terms.items():
            terms[m] = terms.get(m, 0.0) + c
        return Polynomial(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.nvars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, Polynomial):
            s = float(other)
            return Polynomial(self.nvars, {m: s * c for m, c in self.terms.items()})
        other = self._coerce(other)
        terms: dict[Monomial, float] = {}
        for (ma, ca), (mb, cb) in itertools.product(self.terms.items(), other.terms.items()):
            m = mono_mul(ma, mb)
            terms[m] = terms.get(m, 0.0) + ca * cb
        return Polynomial(self.nvars, terms)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if k < 0:
            raise ValueError("negative power")
        out = Polynomial.constant(self.nvars, 1.0)
        for _ in range(k):
            out = out * self
        return out

    def __call__(self, x):
        return self.evaluate(x)

    def evaluate(self, x) -> np.ndarray | float:
        """Evaluate at a point (shape (n,)) or a batch of points (shape (K, n))."""
        x = np.asarray(x, dtype=float)
        if not self.terms:
            return 0.0 if x.ndim == 1 else np.zeros(x.shape[0])
        mons = list(self.terms)
        coeffs = np.array([self.terms[m] for m in mons])
        vals = eval_monomials(np.array(mons), x) @ coeffs
        return float(vals) if x.ndim == 1 else vals

    def allclose(self, other: "Polynomial", atol: float = 1e-12) -> bool:
        diff = self - other
        return all(abs(c) <= atol for c in diff.terms.values())

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self.terms == other.terms

    def __hash__(self):
        return hash((self.nvars, frozenset(self.terms.items())))

    def __repr__(self):
        if not self.terms:
            return "0"
        items = sorted(self.terms.items(), key=lambda kv: (-mono_degree(kv[0]), tuple(-e for e in kv[0])))
        return " + ".join(f"{c:g}*{mono_str(m)}" for m, c in items)

    def to_json(self) -> list:
        return [[list(m), c] for m, c in sorted(self.terms.items())]

    @classmethod
    def from_json(cls, nvars: int, data: Iterable) -> "Polynomial":
        return cls(nvars, {tuple(m): c for m, c in data})


class Dictionary:
    """Ordered list of monomials forming the vector R(x)."""

    def __init__(self, entries: Iterable[Sequence[int]], n: int | None = None):
        entries = [tuple(int(e) for e in m) for m in entries]
        if not entries:
            raise ValueError("empty dictionary")
        if n is None:
            n = len(entries[0])
        self.n = int(n)
        for m in entries:
            if len(m) != self.n or any(e < 0 for e in m):
                raise ValueError(f"monomial {m} does not match {self.n} variables")
            if sum(m) < 1:
                raise ValueError("dictionary entries must have degree >= 1")
        if len(set(entries)) != len(entries):
            raise ValueError("dictionary entries must be distinct")
        linear = {tuple(1 if k == i else 0 for k in range(self.n)) for i in range(self.n)}
        if set(entries[: self.n]) != linear:
            raise ValueError("the first n dictionary entries must be the degree-1 monomials")
        self.entries: tuple[Monomial, ...] = tuple(entries)
        self.exponents = np.array(self.entries, dtype=int)

    @property
    def M(self) -> int:
        return len(self.entries)

    @property
    def degree(self) -> int:
        return int(self.exponents.sum(axis=1).max())

    def __len__(self):
        return self.M

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, Dictionary) and self.entries == other.entries

    def __repr__(self):
        return "[" + "; ".join(mono_str(m) for m in self.entries) + "]"

    def evaluate(self, x) -> np.ndarray:
        """R(x); x of shape (..., n) gives shape (..., M)."""
        return eval_monomials(self.exponents, x)

    def to_json(self) -> list:
        return [list(m) for m in self.entries]


def build_dictionary(n: int, dmax: int, order: Sequence[Sequence[int]] | None = None) -> Dictionary:
    """All monomials of degree 1..dmax in n variables.

    Default ordering is graded-lex; ``order`` overrides it with an explicit
    permutation of the same monomial set.
    """
    if n < 1 or dmax < 1:
        raise ValueError("n and dmax must be positive")
    full = monomials_up_to(n, dmax, dmin=1)
    if order is None:
        return Dictionary(full, n)
    order = [tuple(int(e) for e in m) for m in order]
    if sorted(order) != sorted(full):
        raise ValueError("ordering override must be a permutation of all monomials up to dmax")
    return Dictionary(order, n)


def dictionary_size(n: int, dmax: int) -> int:
    return comb(n + dmax, dmax) - 1


class PolyMatrix:
    """Matrix with polynomial entries, stored as {monomial: coefficient matrix}."""

    __slots__ = ("rows", "cols", "nvars", "coeffs")
    # let ndarray @ PolyMatrix fall through to __rmatmul__
    __array_ufunc__ = None

    def __init__(self, rows: int, cols: int, nvars: int, coeffs: Mapping[Monomial, np.ndarray] | None = None):
        self.rows, self.cols, self.nvars = int(rows), int(cols), int(nvars)
        self.coeffs: dict[Monomial, np.ndarray] = {}
        for m, c in (coeffs or {}).items():
            c = np.array(c, dtype=float).reshape(self.rows, self.cols)
            m = tuple(int(e) for e in m)
            if len(m) != self.nvars:
                raise ValueError("monomial length mismatch")
            if m in self.coeffs:
                self.coeffs[m] = self.coeffs[m] + c
            else:
                self.coeffs[m] = c
        self.coeffs = {m: c for m, c in self.coeffs.items() if np.any(c != 0.0)}

    @classmethod
    def constant(cls, mat, nvars: int) -> "PolyMatrix":
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        return cls(mat.shape[0], mat.shape[1], nvars, {(0,) * nvars: mat})

    @classmethod
    def from_entries(cls, grid: Sequence[Sequence[Polynomial]]) -> "PolyMatrix":
        rows, cols = len(grid), len(grid[0])
        nvars = grid[0][0].nvars
        coeffs: dict[Monomial, np.ndarray] = {}
        for i, row in enumerate(grid):
            if len(row) != cols:
                raise ValueError("ragged entry grid")
            for j, p in enumerate(row):
                for m, c in p.terms.items():
                    coeffs.setdefault(m, np.zeros((rows, cols)))[i, j] += c
        return cls(rows, cols, nvars, coeffs)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def degree(self) -> int:
        return max((mono_degree(m) for m in self.coeffs), default=0)

    def monomials(self) -> list[Monomial]:
        return sorted(self.coeffs, key=lambda m: (mono_degree(m), tuple(-e for e in m)))

    def entry(self, i: int, j: int) -> Polynomial:
        return Polynomial(self.nvars, {m: c[i, j] for m, c in self.coeffs.items()})

    @property
    def entries(self) -> list[list[Polynomial]]:
        return [[self.entry(i, j) for j in range(self.cols)] for i in range(self.rows)]

    def evaluate(self, x) -> np.ndarray:
        """Value at a point (rows x cols) or a batch (K x rows x cols)."""
        x = np.asarray(x, dtype=float)
        if not self.coeffs:
            shape = (self.rows, self.cols) if x.ndim == 1 else (x.shape[0], self.rows, self.cols)
            return np.zeros(shape)
        mons = list(self.coeffs)
        stack = np.stack([self.coeffs[m] for m in mons])
        vals = eval_monomials(np.array(mons), x)
        return np.tensordot(vals, stack, axes=(-1, 0))

    __call__ = evaluate

    @property
    def T(self) -> "PolyMatrix":
        return PolyMatrix(self.cols, self.rows, self.nvars, {m: c.T for m, c in self.coeffs.items()})

    def __add__(self, other: "PolyMatrix") -> "PolyMatrix":
        if self.shape != other.shape:
            raise ValueError("shape mismatch")
        coeffs = {m: c.copy() for m, c in self.coeffs.items()}
        for m, c in other.coeffs.items():
            coeffs[m] = coeffs[m] + c if m in coeffs else c.copy()
        return PolyMatrix(self.rows, self.cols, self.nvars, coeffs)

    def __neg__(self):
        return PolyMatrix(self.rows, self.cols, self.nvars, {m: -c for m, c in self.coeffs.items()})

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, s: float) -> "PolyMatrix":
        return PolyMatrix(self.rows, self.cols, self.nvars, {m: s * c for m, c in self.coeffs.items()})

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, PolyMatrix):
            if self.cols != other.rows:
                raise ValueError("shape mismatch")
            coeffs: dict[Monomial, np.ndarray] = {}
            for (ma, ca), (mb, cb) in itertools.product(self.coeffs.items(), other.coeffs.items()):
                m = mono_mul(ma, mb)
                prod = ca @ cb
                coeffs[m] = coeffs[m] + prod if m in coeffs else prod
            return PolyMatrix(self.rows, other.cols, self.nvars, coeffs)
        other = np.atleast_2d(np.asarray(other, dtype=float))
        if other.shape[0] != self.cols:
            raise ValueError("shape mismatch")
        return PolyMatrix(self.rows, other.shape[1], self.nvars, {m: c @ other for m, c in self.coeffs.items()})

    def __rmatmul__(self, other):
        other = np.atleast_2d(np.asarray(other, dtype=float))
        if other.shape[1] != self.rows:
            raise ValueError("shape mismatch")
        return PolyMatrix(other.shape[0], self.cols, self.nvars, {m: other @ c for m, c in self.coeffs.items()})

    def allclose(self, other: "PolyMatrix", atol: float = 1e-12) -> bool:
        diff = self - other
        return all(np.max(np.abs(c)) <= atol for c in diff.coeffs.values())

    def to_json(self) -> list:
        """Per-entry list of [monomial, coefficient] pairs, row-major."""
        return [[self.entry(i, j).to_json() for j in range(self.cols)] for i in range(self.rows)]

    @classmethod
    def from_json(cls, nvars: int, data: list) -> "PolyMatrix":
        grid = [[Polynomial.from_json(nvars, e) for e in row] for row in data]
        return cls.from_entries(grid)

    def __repr__(self):
        return f"PolyMatrix({self.rows}x{self.cols}, degree {self.degree}, {len(self.coeffs)} monomials)"


def default_divisors(dictionary: Dictionary) -> list[int]:
    """Lowest-index variable with positive exponent, per dictionary entry."""
    return [next(k for k, e in enumerate(m) if e > 0) for m in dictionary.entries]


def factorize_theta(dictionary: Dictionary, divisors: Sequence[int] | None = None) -> PolyMatrix:
    """Theta(x) with Theta(x) x = R(x).

    Row r holds R_r(x) / x_k in column k, where k is ``divisors[r]`` (default:
    the lowest-index variable appearing in the monomial).
    """
    n, M = dictionary.n, dictionary.M
    if divisors is None:
        divisors = default_divisors(dictionary)
    if len(divisors) != M:
        raise ValueError("one divisor per dictionary entry required")
    coeffs: dict[Monomial, np.ndarray] = {}
    for r, (m, k) in enumerate(zip(dictionary.entries, divisors)):
        if sum(m) < 1:
            raise ValueError("degree-0 dictionary entry cannot be factorized")
        if m[k] < 1:
            raise ValueError(f"variable x{k + 1} does not divide {mono_str(m)}")
        q = list(m)
        q[k] -= 1
        coeffs.setdefault(tuple(q), np.zeros((M, n)))[r, k] = 1.0
    return PolyMatrix(M, n, n, coeffs)


def theta_left_pinv(theta: PolyMatrix, x, rtol: float = 1e-12) -> np.ndarray:
    """Left pseudoinverse (Theta^T Theta)^-1 Theta^T at a point, via QR."""
    th = theta.evaluate(np.asarray(x, dtype=float))
    q, r = np.linalg.qr(th)
    d = np.abs(np.diag(r))
    if d.size == 0 or d.min() <= rtol * max(1.0, d.max()):
        raise SingularThetaError(x)
    return np.linalg.solve(r, q.T)
