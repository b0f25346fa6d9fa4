"""Benchmark subsystems, regions of interest, interconnection topologies and networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .polyalg import Dictionary, PolyMatrix, Polynomial, build_dictionary, factorize_theta


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi):
            raise ValueError("box bounds differ in length")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box lower bound exceeds upper bound: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n(self) -> int:
        return len(self.lower)

    def contains(self, x) -> np.ndarray | bool:
        x = np.asarray(x, dtype=float)
        lo, hi = np.array(self.lower), np.array(self.upper)
        inside = np.all((x >= lo) & (x <= hi), axis=-1)
        return bool(inside) if x.ndim == 1 else inside

    def constraint_polys(self) -> list[Polynomial]:
        """Entries (x_k - l_k)(u_k - x_k) of the box description b(x) >= 0."""
        n = self.n
        out = []
        for k, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            xk = Polynomial.variable(n, k)
            out.append((xk - lo) * (hi - xk))
        return out

    def degenerate_axes(self) -> list[int]:
        return [k for k, (lo, hi) in enumerate(zip(self.lower, self.upper)) if lo == hi]

    def grid(self, per_axis: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, per_axis) if hi > lo else np.array([lo]) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, rng: np.random.Generator, size: int | tuple = ()) -> np.ndarray:
        lo, hi = np.array(self.lower), np.array(self.upper)
        shape = (size,) if isinstance(size, int) else tuple(size)
        return lo + (hi - lo) * rng.random(shape + (self.n,))

    def to_json(self) -> list:
        return [list(self.lower), list(self.upper)]


class Region:
    """Finite union of axis-aligned boxes."""

    def __init__(self, boxes: Sequence[Box | Sequence]):
        built = []
        for b in boxes:
            built.append(b if isinstance(b, Box) else Box(tuple(b[0]), tuple(b[1])))
        if built and len({b.n for b in built}) != 1:
            raise ValueError("boxes of different dimensions")
        self.boxes: tuple[Box, ...] = tuple(built)

    @classmethod
    def box(cls, lower, upper) -> "Region":
        return cls([Box(tuple(lower), tuple(upper))])

    @classmethod
    def cube(cls, n: int, lo: float, hi: float) -> "Region":
        return cls.box([lo] * n, [hi] * n)

    @property
    def n(self) -> int:
        return self.boxes[0].n

    @property
    def empty(self) -> bool:
        return not self.boxes

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        if not self.boxes:
            return False if x.ndim == 1 else np.zeros(x.shape[:-1], dtype=bool)
        out = self.boxes[0].contains(x)
        for b in self.boxes[1:]:
            out = out | b.contains(x)
        return out

    def hull(self) -> Box:
        lo = np.min([b.lower for b in self.boxes], axis=0)
        hi = np.max([b.upper for b in self.boxes], axis=0)
        return Box(tuple(lo), tuple(hi))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Uniform draws from the hull, restricted to the union by rejection."""
        if len(self.boxes) == 1:
            return self.boxes[0].sample(rng, size)
        out = np.empty((0, self.n))
        hull = self.hull()
        while out.shape[0] < size:
            cand = hull.sample(rng, 4 * size)
            out = np.vstack([out, cand[self.contains(cand)]])
        return out[:size]

    def to_json(self) -> list:
        return [b.to_json() for b in self.boxes]

    @classmethod
    def from_json(cls, data) -> "Region":
        return cls([Box(tuple(lo), tuple(hi)) for lo, hi in data])

    def __eq__(self, other):
        return isinstance(other, Region) and self.boxes == other.boxes

    def __repr__(self):
        return " U ".join("x".join(f"[{a:g},{b:g}]" for a, b in zip(bx.lower, bx.upper)) for bx in self.boxes)


TOPOLOGY_KINDS = ("fully", "ring", "binary", "star", "line", "custom")


class Topology:
    """Block coupling pattern: w_i = sum_j m_ij x_j with m_ij = weight * I."""

    def __init__(self, N: int, kind: str, edges: Sequence[tuple[int, int, float]], dims: int | Sequence[int]):
        if kind not in TOPOLOGY_KINDS:
            raise ValueError(f"unknown topology kind {kind!r}")
        self.N = int(N)
        self.kind = kind
        dims = [int(dims)] * self.N if np.isscalar(dims) else [int(d) for d in dims]
        if len(dims) != self.N:
            raise ValueError("one state dimension per subsystem required")
        self.dims = tuple(dims)
        dst = np.array([e[0] for e in edges], dtype=np.int64)
        src = np.array([e[1] for e in edges], dtype=np.int64)
        wts = np.array([e[2] for e in edges], dtype=float)
        if dst.size:
            if np.any(dst == src):
                raise ValueError("self-loops are not allowed")
            if dst.min() < 0 or src.min() < 0 or max(dst.max(), src.max()) >= self.N:
                raise ValueError("edge index out of range")
            if any(self.dims[i] != self.dims[j] for i, j in zip(dst, src)):
                raise ValueError("coupled subsystems must share state dimension")
        self.dst, self.src, self.weights = dst, src, wts
        self._S = sp.csr_matrix((wts, (dst, src)), shape=(self.N, self.N))

    @property
    def nnz_blocks(self) -> int:
        return int(self._S.nnz)

    @property
    def homogeneous(self) -> bool:
        return len(set(self.dims)) == 1

    @property
    def n_total(self) -> int:
        return int(sum(self.dims))

    @property
    def scalar_pattern(self) -> sp.csr_matrix:
        """N x N matrix of block weights."""
        return self._S

    def in_weight(self) -> np.ndarray:
        """Sum of |m_ij| over j, per receiving subsystem."""
        return np.asarray(abs(self._S).sum(axis=1)).ravel()

    # stacked-vector interface ------------------------------------------------
    def _blocks(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.homogeneous:
            raise NotImplementedError("block view requires equal subsystem dimensions")
        n = self.dims[0]
        if x.shape[-1] != self.N * n:
            raise ValueError(f"expected stacked dimension {self.N * n}, got {x.shape[-1]}")
        return x.reshape(x.shape[:-1] + (self.N, n))

    def matvec(self, x) -> np.ndarray:
        """M x for a stacked state vector (or batch of them, last axis stacked)."""
        xb = self._blocks(x)
        return self.apply_blocks(xb).reshape(np.shape(x))

    def rmatvec(self, y) -> np.ndarray:
        """M^T y for a stacked vector."""
        yb = self._blocks(y)
        return self.apply_blocks(yb, transpose=True).reshape(np.shape(y))

    def apply_blocks(self, xb: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Apply to block arrays of shape (..., N, n)."""
        S = self._S.T.tocsr() if transpose else self._S
        lead = xb.shape[:-2]
        n = xb.shape[-1]
        flat = np.moveaxis(xb, -2, 0).reshape(self.N, -1)
        out = S @ flat
        return np.moveaxis(out.reshape((self.N,) + lead + (n,)), 0, -2)

    def dense(self) -> np.ndarray:
        """Materialized block matrix, for small N and tests."""
        n = self.dims[0]
        return np.kron(self._S.toarray(), np.eye(n))

    def permuted(self, perm: Sequence[int]) -> "Topology":
        """Relabel subsystem k as perm[k]."""
        perm = np.asarray(perm)
        edges = [(int(perm[i]), int(perm[j]), float(w)) for i, j, w in zip(self.dst, self.src, self.weights)]
        dims = [0] * self.N
        for k, d in enumerate(self.dims):
            dims[perm[k]] = d
        return Topology(self.N, "custom", edges, dims)

    def to_json(self) -> dict:
        return {
            "N": self.N,
            "kind": self.kind,
            "dims": list(self.dims),
            "edges": [[int(i), int(j), float(w)] for i, j, w in zip(self.dst, self.src, self.weights)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Topology":
        kind, N, dims = data["kind"], int(data["N"]), data.get("dims", data.get("n", 1))
        if "edges" in data:
            return cls(N, kind, [tuple(e) for e in data["edges"]], dims)
        return make_topology(kind, N, dims if np.isscalar(dims) else dims[0], data.get("weight", 1.0))

    def __repr__(self):
        return f"Topology({self.kind}, N={self.N}, blocks={self.nnz_blocks})"


def make_topology(kind: str, N: int, n: int, weight: float = 1.0) -> Topology:
    """Standard patterns, 0-based indices; edge (i, j) means x_j feeds w_i."""
    if N < 1:
        raise ValueError("N must be positive")
    if kind == "fully":
        edges = [(i, j, weight) for i in range(N) for j in range(N) if i != j]
    elif kind == "ring":
        edges = [(i, i - 1, weight) for i in range(1, N)]
        if N > 1:
            edges.append((0, N - 1, weight))
        if N == 2:
            edges = [(1, 0, weight), (0, 1, weight)]
    elif kind == "line":
        edges = [(i, i - 1, weight) for i in range(1, N)]
    elif kind == "star":
        edges = [(i, 0, weight) for i in range(1, N)]
    elif kind == "binary":
        levels = np.log2(N + 1)
        if N < 1 or abs(levels - round(levels)) > 1e-12:
            raise ValueError(f"binary topology needs N = 2^l - 1, got N = {N}")
        # node i (1-based) listens to node j when i = 2j or i = 2j + 1
        edges = [(i, (i + 1) // 2 - 1, weight) for i in range(1, N)]
    else:
        raise ValueError(f"unknown topology kind {kind!r}")
    return Topology(N, kind, edges, n)


@dataclass(frozen=True, eq=False)
class SubsystemHandle:
    """Everything synthesis may see: no drift or input matrices."""

    name: str
    n: int
    m: int
    D: np.ndarray
    dictionary: Dictionary
    theta: PolyMatrix
    X: Region
    X0: Region
    Xa: Region
    U: Region
    W: Region


@dataclass(frozen=True, eq=False)
class SubsystemModel:
    """Polynomial subsystem xdot = A R(x) + B u + D w; A and B are simulator-only."""

    name: str
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    D: np.ndarray
    dictionary: Dictionary
    theta: PolyMatrix
    X: Region
    X0: Region
    Xa: Region
    U: Region
    W: Region
    hidden: bool = True

    def __post_init__(self):
        n, M = self.dictionary.n, self.dictionary.M
        A, B, D = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (self.A, self.B, self.D))
        if A.shape != (n, M):
            raise ValueError(f"A must be {n}x{M}, got {A.shape}")
        if B.shape[0] != n or D.shape != (n, n):
            raise ValueError("B/D dimensions inconsistent with the dictionary")
        if self.theta.shape != (M, n):
            raise ValueError("theta must be M x n")
        for reg in (self.X, self.X0, self.Xa, self.W):
            if not reg.empty and reg.n != n:
                raise ValueError("region dimension mismatch")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)

    @property
    def n(self) -> int:
        return self.dictionary.n

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def public(self) -> SubsystemHandle:
        return SubsystemHandle(
            name=self.name, n=self.n, m=self.m, D=self.D.copy(), dictionary=self.dictionary,
            theta=self.theta, X=self.X, X0=self.X0, Xa=self.Xa, U=self.U, W=self.W,
        )

    def rhs(self, x, u, w) -> np.ndarray:
        """A R(x) + B u + D w, broadcasting over leading axes."""
        x = np.asarray(x, dtype=float)
        R = self.dictionary.evaluate(x)
        return R @ self.A.T + np.asarray(u, dtype=float) @ self.B.T + np.asarray(w, dtype=float) @ self.D.T


class NetworkModel:
    def __init__(self, subsystems: Sequence[SubsystemModel], topology: Topology, name: str = "custom"):
        if len(subsystems) != topology.N:
            raise ValueError("one subsystem per topology node required")
        for s, d in zip(subsystems, topology.dims):
            if s.n != d:
                raise ValueError("subsystem dimension does not match topology")
        self.subsystems = list(subsystems)
        self.topology = topology
        self.name = name
        self._groups = self._group_identical()

    def _group_identical(self) -> list[tuple[SubsystemModel, np.ndarray]]:
        groups: list[tuple[SubsystemModel, list[int]]] = []
        for i, s in enumerate(self.subsystems):
            for rep, idx in groups:
                if rep is s or (
                    rep.dictionary == s.dictionary and np.array_equal(rep.A, s.A)
                    and np.array_equal(rep.B, s.B) and np.array_equal(rep.D, s.D)
                ):
                    idx.append(i)
                    break
            else:
                groups.append((s, [i]))
        return [(rep, np.array(idx)) for rep, idx in groups]

    @property
    def N(self) -> int:
        return self.topology.N

    @property
    def n(self) -> int:
        return self.topology.dims[0]

    @property
    def m(self) -> int:
        return self.subsystems[0].m

    def internal_inputs(self, xb: np.ndarray) -> np.ndarray:
        return self.topology.apply_blocks(xb)

    def rhs_blocks(self, xb: np.ndarray, ub: np.ndarray) -> np.ndarray:
        """Network right-hand side on block arrays (..., N, n) and (..., N, m)."""
        wb = self.internal_inputs(xb)
        if len(self._groups) == 1:
            return self._groups[0][0].rhs(xb, ub, wb)
        out = np.empty_like(xb)
        for rep, idx in self._groups:
            out[..., idx, :] = rep.rhs(xb[..., idx, :], ub[..., idx, :], wb[..., idx, :])
        return out

    def rhs(self, x, u) -> np.ndarray:
        """Stacked form: x (..., N n), u (..., N m)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        xb = x.reshape(x.shape[:-1] + (self.N, self.n))
        ub = u.reshape(u.shape[:-1] + (self.N, self.m))
        return self.rhs_blocks(xb, ub).reshape(x.shape)


# ---------------------------------------------------------------------------
# benchmark registry

LORENZ_ORDER = [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 0], [0, 1, 1], [2, 0, 0], [0, 2, 0], [0, 0, 2]]
SPACECRAFT_ORDER = [[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 1], [1, 0, 1], [1, 1, 0], [2, 0, 0], [0, 2, 0], [0, 0, 2]]
DUFFING_ORDER = [[1, 0], [0, 1], [1, 1], [2, 0], [0, 2], [2, 1], [1, 2], [3, 0], [0, 3]]
# column assignments for the reference Theta layouts
SPACECRAFT_DIVISORS = [0, 1, 2, 2, 0, 0, 0, 1, 2]
DUFFING_DIVISORS = [0, 1, 0, 0, 1, 1, 0, 0, 1]

DEFAULT_INERTIAS = (2.0, 1.0, 0.5)

BENCHMARKS = {
    "lorenz_fully": dict(topology="fully", N=1000, T=15, phi_bar=0.03, n=3, dmax=2, order=LORENZ_ORDER, divisors=None,
                         X=[[-20] * 3, [20] * 3], X0=[[-3] * 3, [3] * 3],
                         Xa=[[[-20, -20, 4], [-4, -15, 20]], [[5, 11, 4], [20, 20, 20]], [[5, 11, -20], [20, 20, -4]]],
                         u_bound=100.0),
    "lorenz_ring": dict(topology="ring", N=1500, T=13, phi_bar=0.12, n=3, dmax=2, order=LORENZ_ORDER, divisors=None,
                        X=[[-20] * 3, [20] * 3], X0=[[-3] * 3, [3] * 3],
                        Xa=[[[-20, -20, 5], [-10, -5, 20]], [[3.5, 15, 5], [20, 20, 20]], [[3.5, 15, -20], [20, 20, -5]]],
                        u_bound=100.0),
    "spacecraft_binary": dict(topology="binary", N=1023, T=15, phi_bar=0.75, n=3, dmax=2, order=SPACECRAFT_ORDER,
                              divisors=SPACECRAFT_DIVISORS, X=[[-5] * 3, [5] * 3], X0=[[-2] * 3, [2] * 3],
                              Xa=[[[2.5, -5, -5], [5, -3, -2.5]], [[2.5, 2.5, 2.5], [5, 5, 5]], [[-5, 2.5, 2.5], [-3, 5, 5]]],
                              u_bound=100.0, coupling=0.08),
    "spacecraft_star": dict(topology="star", N=2000, T=17, phi_bar=0.75, n=3, dmax=2, order=SPACECRAFT_ORDER,
                            divisors=SPACECRAFT_DIVISORS, X=[[-5] * 3, [5] * 3], X0=[[-2] * 3, [2] * 3],
                            Xa=[[[2.5, -5, -5], [5, -3, -4]], [[2.5, 4, 2.5], [5, 5, 5]], [[-5, 4, 2.5], [-4, 5, 5]]],
                            u_bound=100.0, coupling=0.02),
    "chen_line": dict(topology="line", N=1000, T=12, phi_bar=0.27, n=3, dmax=2, order=LORENZ_ORDER, divisors=None,
                      X=[[-20] * 3, [20] * 3], X0=[[-2.5] * 3, [2.5] * 3],
                      Xa=[[[-20, -20, -20], [-9, -11, -8]], [[3.5, 5, 4], [20, 20, 20]]],
                      u_bound=100.0),
    "duffing_binary": dict(topology="binary", N=1023, T=18, phi_bar=0.08, n=2, dmax=3, order=DUFFING_ORDER,
                           divisors=DUFFING_DIVISORS, X=[[-10] * 2, [10] * 2], X0=[[-4] * 2, [4] * 2],
                           Xa=[[[-10, -10], [-6, -5]], [[6, 5], [10, 10]]],
                           u_bound=100.0),
}


def _drift(name: str, dictionary: Dictionary, inertias) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """True (A, B, D) expressed over the given dictionary."""
    n, M = dictionary.n, dictionary.M
    col = {m: r for r, m in enumerate(dictionary.entries)}
    A = np.zeros((n, M))

    def put(i, mono, c):
        mono = tuple(mono)
        if mono not in col:
            raise ValueError(f"dictionary lacks monomial {mono} needed by {name}")
        A[i, col[mono]] += c

    if name.startswith("lorenz"):
        put(0, (1, 0, 0), -10.0); put(0, (0, 1, 0), 10.0)
        put(1, (1, 0, 0), 28.0); put(1, (0, 1, 0), -1.0); put(1, (1, 0, 1), -1.0)
        put(2, (0, 0, 1), -8.0 / 3.0); put(2, (1, 1, 0), 1.0)
        B = np.eye(3)
        D = (-1e-5 if name == "lorenz_fully" else -0.08) * np.eye(3)
    elif name == "chen_line":
        put(0, (1, 0, 0), -35.0); put(0, (0, 1, 0), 35.0)
        put(1, (1, 0, 0), -7.0); put(1, (0, 1, 0), 28.0); put(1, (1, 0, 1), -1.0)
        put(2, (0, 0, 1), -3.0); put(2, (1, 1, 0), 1.0)
        B = np.eye(3)
        D = -0.005 * np.eye(3)
    elif name.startswith("spacecraft"):
        if inertias is None or len(inertias) != 3:
            raise ValueError("spacecraft benchmarks need three principal inertias")
        J1, J2, J3 = (float(j) for j in inertias)
        if min(J1, J2, J3) <= 0:
            raise ValueError("inertias must be positive")
        put(0, (0, 1, 1), (J2 - J3) / J1)
        put(1, (1, 0, 1), (J3 - J1) / J2)
        put(2, (1, 1, 0), (J1 - J2) / J3)
        B = np.diag([1 / J1, 1 / J2, 1 / J3])
        c = BENCHMARKS[name]["coupling"]
        D = np.diag([c / J1, c / J2, c / J3])
    elif name == "duffing_binary":
        put(0, (0, 1), 1.0)
        put(1, (1, 0), 2.0); put(1, (0, 1), -0.5); put(1, (3, 0), -0.01)
        B = np.eye(2)
        D = np.array([[0.0, 0.0], [0.005, 0.0]])
    else:
        raise ValueError(f"unknown benchmark {name!r}")
    return A, B, D


def benchmark_dictionary(name: str, params: dict | None = None) -> tuple[Dictionary, PolyMatrix]:
    params = params or {}
    spec = BENCHMARKS[name]
    order = params.get("dict", spec["order"])
    dictionary = build_dictionary(spec["n"], spec["dmax"], order)
    divisors = params.get("theta", spec["divisors"] if order == spec["order"] else None)
    return dictionary, factorize_theta(dictionary, divisors)


def build_benchmark(name: str, N: int | None = None, params: dict | None = None) -> NetworkModel:
    """Assemble one of the six benchmark networks.

    ``params`` may override: dict, theta (divisor column per dictionary entry),
    inertias, u_bound, X/X0/Xa (region JSON), W (region JSON).
    """
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    params = dict(params or {})
    spec = BENCHMARKS[name]
    N = int(N if N is not None else spec["N"])
    n = spec["n"]
    topo = make_topology(spec["topology"], N, n)
    dictionary, theta = benchmark_dictionary(name, params)
    inertias = params.get("inertias", DEFAULT_INERTIAS if name.startswith("spacecraft") else None)
    if name.startswith("spacecraft") and inertias is None:
        raise ValueError("spacecraft benchmarks need three principal inertias")
    A, B, D = _drift(name, dictionary, inertias)
    X = Region.from_json(params["X"]) if "X" in params else Region.box(*spec["X"])
    X0 = Region.from_json(params["X0"]) if "X0" in params else Region.box(*spec["X0"])
    Xa = Region.from_json(params["Xa"]) if "Xa" in params else Region([tuple(map(tuple, b)) for b in spec["Xa"]])
    ub = float(params.get("u_bound", spec["u_bound"]))
    U = Region.cube(B.shape[1], -ub, ub)
    hull = X.hull()
    weights = topo.in_weight()
    subsystems = []
    cache: dict[float, Region] = {}
    for i in range(N):
        if "W" in params:
            W = Region.from_json(params["W"])
        else:
            s = float(weights[i])
            if s not in cache:
                lo = [min(s * a, s * b) for a, b in zip(hull.lower, hull.upper)]
                hi = [max(s * a, s * b) for a, b in zip(hull.lower, hull.upper)]
                cache[s] = Region.box(lo, hi)
            W = cache[s]
        subsystems.append(SubsystemModel(name, A, B, D, dictionary, theta, X, X0, Xa, U, W))
    return NetworkModel(subsystems, topo, name)


def representative_subsystem(net: NetworkModel) -> SubsystemModel:
    """Subsystem whose internal-input box is largest; used by the homogeneous fast path."""
    widths = [np.prod(np.subtract(s.W.hull().upper, s.W.hull().lower) + 1e-300) for s in net.subsystems]
    return net.subsystems[int(np.argmax(widths))]
