"""Boxes, halfspaces, polytopes and a small dense LP solver.

Every region the monitor reasons about (activation cubes, cone slices, unsafe
pieces) is a polytope in a handful of dimensions with at most a few hundred
constraints, so the LP core is a plain two-phase simplex run on the *dual*
problem: its tableau has one row per state coordinate, which keeps pivots cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

# Feasibility / optimality tolerance shared by every caller.
DELTA = 1e-7
MAX_PIVOTS = 10_000

_PIVOT_TOL = 1e-9
_COST_TOL = 1e-9
_ZERO_NORMAL = 1e-12
_BLAND_AFTER = 8

GE, LE, EQ = ">=", "<=", "="


class LpNumericalError(RuntimeError):
    """The simplex run did not converge or produced an inaccurate point.

    Callers treat this as "could not verify" and act conservatively.
    """


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError(f"box bounds differ in shape: {lo.shape} vs {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, x) -> "Box":
        x = np.asarray(x, dtype=float)
        return cls(x, x)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def contains_box(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(other.lower >= self.lower - tol) and np.all(other.upper <= self.upper + tol))

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def intersect(self, other: "Box") -> Optional["Box"]:
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        if np.any(lo > hi):
            return None
        return Box(lo, hi)

    def hull(self, other: "Box") -> "Box":
        return Box(np.minimum(self.lower, other.lower), np.maximum(self.upper, other.upper))

    def vertices(self) -> np.ndarray:
        corners = np.array(np.meshgrid(*[[0, 1]] * self.dim, indexing="ij")).reshape(self.dim, -1).T
        return self.lower + corners * (self.upper - self.lower)

    def to_polytope(self) -> "Polytope":
        eye = np.eye(self.dim)
        return Polytope.from_arrays(np.vstack([eye, -eye]), np.concatenate([-self.lower, self.upper]))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Box":
        return cls(d["lower"], d["upper"])

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))


@dataclass(frozen=True)
class Halfspace:
    """``normal . x + offset (sense) 0``."""

    normal: np.ndarray
    offset: float
    sense: str = GE

    def __post_init__(self):
        a = np.array(self.normal, dtype=float).reshape(-1)
        a.flags.writeable = False
        object.__setattr__(self, "normal", a)
        object.__setattr__(self, "offset", float(self.offset))
        if self.sense not in (GE, LE, EQ):
            raise ValueError(f"unknown sense {self.sense!r}")

    def trivial(self) -> Optional[bool]:
        """True/False when the normal vanishes and the constraint is decided, else None."""
        if np.linalg.norm(self.normal) > _ZERO_NORMAL:
            return None
        b = self.offset
        if self.sense == GE:
            return b >= 0.0
        if self.sense == LE:
            return b <= 0.0
        return b == 0.0

    def value(self, x) -> float:
        return float(self.normal @ np.asarray(x, dtype=float) + self.offset)


class Polytope:
    """Intersection of halfspaces, stored as ``G x + g >= 0`` and ``E x + e = 0``.

    Constraints whose normal vanishes are decided on construction: satisfied
    ones are dropped, a violated one marks the polytope empty.
    """

    __slots__ = ("dim", "G", "g", "E", "e", "trivially_empty")

    def __init__(self, dim: int, G=None, g=None, E=None, e=None, trivially_empty: bool = False):
        if dim < 1:
            raise ValueError("polytope dimension must be positive")
        self.dim = int(dim)
        G = np.zeros((0, dim)) if G is None else np.asarray(G, dtype=float).reshape(-1, dim)
        g = np.zeros(0) if g is None else np.asarray(g, dtype=float).reshape(-1)
        E = np.zeros((0, dim)) if E is None else np.asarray(E, dtype=float).reshape(-1, dim)
        e = np.zeros(0) if e is None else np.asarray(e, dtype=float).reshape(-1)
        if G.shape[0] != g.shape[0] or E.shape[0] != e.shape[0]:
            raise ValueError("constraint matrix and offset lengths differ")

        empty = bool(trivially_empty)
        gn = np.linalg.norm(G, axis=1)
        flat = gn <= _ZERO_NORMAL
        if np.any(flat):
            if np.any(g[flat] < 0.0):
                empty = True
            G, g = G[~flat], g[~flat]
        en = np.linalg.norm(E, axis=1)
        flat = en <= _ZERO_NORMAL
        if np.any(flat):
            if np.any(e[flat] != 0.0):
                empty = True
            E, e = E[~flat], e[~flat]
        self.G, self.g, self.E, self.e = G, g, E, e
        self.trivially_empty = empty

    @classmethod
    def from_arrays(cls, G, g, E=None, e=None) -> "Polytope":
        G = np.atleast_2d(np.asarray(G, dtype=float))
        return cls(G.shape[1], G, g, E, e)

    @classmethod
    def from_halfspaces(cls, halfspaces: Iterable[Halfspace], dim: Optional[int] = None) -> "Polytope":
        hs = list(halfspaces)
        if dim is None:
            if not hs:
                raise ValueError("dimension required for an empty constraint list")
            dim = hs[0].normal.shape[0]
        ge_rows, ge_off, eq_rows, eq_off = [], [], [], []
        for h in hs:
            if h.normal.shape[0] != dim:
                raise ValueError(f"halfspace of dimension {h.normal.shape[0]} in a {dim}-d polytope")
            if h.sense == GE:
                ge_rows.append(h.normal)
                ge_off.append(h.offset)
            elif h.sense == LE:
                ge_rows.append(-h.normal)
                ge_off.append(-h.offset)
            else:
                eq_rows.append(h.normal)
                eq_off.append(h.offset)
        return cls(
            dim,
            np.array(ge_rows).reshape(-1, dim),
            np.array(ge_off),
            np.array(eq_rows).reshape(-1, dim),
            np.array(eq_off),
        )

    @property
    def constraints(self) -> list[Halfspace]:
        out = [Halfspace(a, b, GE) for a, b in zip(self.G, self.g)]
        out += [Halfspace(a, b, EQ) for a, b in zip(self.E, self.e)]
        return out

    @property
    def n_constraints(self) -> int:
        return self.G.shape[0] + self.E.shape[0]

    def intersect(self, *others: "Polytope") -> "Polytope":
        Gs, gs, Es, es = [self.G], [self.g], [self.E], [self.e]
        empty = self.trivially_empty
        for o in others:
            if o.dim != self.dim:
                raise ValueError(f"cannot intersect {self.dim}-d and {o.dim}-d polytopes")
            Gs.append(o.G)
            gs.append(o.g)
            Es.append(o.E)
            es.append(o.e)
            empty = empty or o.trivially_empty
        return Polytope(self.dim, np.vstack(Gs), np.concatenate(gs), np.vstack(Es), np.concatenate(es), empty)

    def with_ge(self, a, b) -> "Polytope":
        return Polytope(
            self.dim, np.vstack([self.G, np.reshape(a, (1, -1))]), np.append(self.g, b),
            self.E, self.e, self.trivially_empty,
        )

    def with_eq(self, a, b) -> "Polytope":
        return Polytope(
            self.dim, self.G, self.g,
            np.vstack([self.E, np.reshape(a, (1, -1))]), np.append(self.e, b), self.trivially_empty,
        )

    def contains(self, x, tol: float = DELTA) -> bool:
        if self.trivially_empty:
            return False
        x = np.asarray(x, dtype=float)
        ok = True
        if self.G.shape[0]:
            scale = np.linalg.norm(self.G, axis=1)
            ok = bool(np.all(self.G @ x + self.g >= -tol * scale))
        if ok and self.E.shape[0]:
            scale = np.linalg.norm(self.E, axis=1)
            ok = bool(np.all(np.abs(self.E @ x + self.e) <= tol * scale))
        return ok

    def excluded_by_box(self, box: Box, tol: float = DELTA) -> bool:
        """Cheap sufficient test for ``box ∩ self = ∅``: some single constraint rules the box out."""
        if self.trivially_empty:
            return True
        c, r = box.center, box.radius
        if self.G.shape[0]:
            hi = self.G @ c + np.abs(self.G) @ r + self.g
            if np.any(hi < -tol * np.linalg.norm(self.G, axis=1)):
                return True
        if self.E.shape[0]:
            mid = self.E @ c + self.e
            spread = np.abs(self.E) @ r + tol * np.linalg.norm(self.E, axis=1)
            if np.any(np.abs(mid) > spread):
                return True
        return False

    def normalized(self):
        """Rows scaled to unit normals, returned as ``(G, h, E, f)`` for ``G x >= h``, ``E x = f``."""
        gn = np.linalg.norm(self.G, axis=1)
        en = np.linalg.norm(self.E, axis=1)
        return (
            self.G / gn[:, None], -self.g / gn,
            self.E / en[:, None], -self.e / en,
        )

    def __repr__(self):
        return (
            f"Polytope(dim={self.dim}, ge={self.G.shape[0]}, eq={self.E.shape[0]}"
            f"{', empty' if self.trivially_empty else ''})"
        )


@dataclass(frozen=True)
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    value: Optional[float] = None
    point: Optional[np.ndarray] = None

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible"


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    factor = T[:, col].copy()
    factor[row] = 0.0
    T -= np.outer(factor, T[row])


def _run_simplex(T: np.ndarray, basis: list[int], n_enter: int, budget: list[int]) -> bool:
    """Tableau simplex on ``T`` (last row = reduced costs, last column = rhs).

    Entering column by most negative reduced cost (smallest index on ties); after
    a run of degenerate pivots it switches to Bland's smallest-index rule, which
    cannot cycle. Only columns ``< n_enter`` may enter. Returns False when the
    entering column is unbounded. ``budget`` is a pivot counter shared across phases.
    """
    m = T.shape[0] - 1
    degenerate = 0
    while True:
        costs = T[m, :n_enter]
        if degenerate >= _BLAND_AFTER:
            candidates = np.flatnonzero(costs < -_COST_TOL)
            if candidates.size == 0:
                return True
            col = int(candidates[0])
        else:
            col = int(np.argmin(costs))
            if costs[col] >= -_COST_TOL:
                return True
        column = T[:m, col]
        rows = np.flatnonzero(column > _PIVOT_TOL)
        if rows.size == 0:
            return False
        ratios = T[rows, -1] / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + _PIVOT_TOL * max(1.0, abs(best))]
        row = int(min(ties, key=lambda i: basis[i]))
        degenerate = degenerate + 1 if best <= _PIVOT_TOL else 0
        _pivot(T, row, col)
        basis[row] = col
        budget[0] += 1
        if budget[0] > MAX_PIVOTS:
            raise LpNumericalError(f"simplex exceeded {MAX_PIVOTS} pivots")


def lp_minimize(poly: Polytope, objective, constant: float = 0.0) -> LpResult:
    """Minimize ``objective . x + constant`` over ``poly`` (x unrestricted in sign).

    The dual ``max h.y + f.mu  s.t.  G^T y + E^T mu = c, y >= 0`` is solved with
    a two-phase tableau simplex; the primal optimum is recovered from the final
    dual basis. Deterministic for a fixed constraint order.
    """
    c = np.asarray(objective, dtype=float).reshape(-1)
    if c.shape[0] != poly.dim:
        raise ValueError(f"objective has dimension {c.shape[0]}, polytope has {poly.dim}")
    if poly.trivially_empty:
        return LpResult("infeasible")

    G, h, E, f = poly.normalized()
    m = poly.dim
    M = np.hstack([G.T, E.T, -E.T])
    d = np.concatenate([-h, -f, f])
    K = M.shape[1]

    if K == 0:
        if np.all(c == 0.0):
            x = np.zeros(m)
            return LpResult("optimal", float(constant), x)
        return LpResult("unbounded")

    # phase 1: artificial basis for M z = c
    sign = np.where(c < 0.0, -1.0, 1.0)
    T = np.zeros((m + 1, K + m + 1))
    T[:m, :K] = M * sign[:, None]
    T[:m, K:K + m] = np.eye(m)
    T[:m, -1] = np.abs(c)
    T[m, :K] = -T[:m, :K].sum(axis=0)
    T[m, -1] = -T[:m, -1].sum()
    basis = list(range(K, K + m))
    budget = [0]
    _run_simplex(T, basis, K, budget)

    if -T[m, -1] > 1e-8 * max(1.0, np.abs(c).max()):
        # dual infeasible: primal is infeasible or unbounded
        if np.any(c != 0.0) and polytope_nonempty(poly):
            return LpResult("unbounded")
        return LpResult("infeasible")

    # drive remaining artificials out; drop rows that are redundant
    keep = []
    for i in range(m):
        if basis[i] >= K:
            cols = np.flatnonzero(np.abs(T[i, :K]) > _PIVOT_TOL)
            if cols.size:
                _pivot(T, i, int(cols[0]))
                basis[i] = int(cols[0])
                keep.append(i)
        else:
            keep.append(i)
    T = np.vstack([T[keep][:, list(range(K)) + [K + m]], np.zeros((1, K + 1))])
    basis = [basis[i] for i in keep]
    r = len(basis)

    # phase 2 reduced costs
    T[r, :K] = d
    for i, j in enumerate(basis):
        T[r] -= d[j] * T[i]
    if not _run_simplex(T, basis, K, budget):
        return LpResult("infeasible")

    MB = M[:, basis]
    pi, *_ = np.linalg.lstsq(MB.T, d[basis], rcond=None)
    x = -pi
    if G.shape[0] and np.any(G @ x - h < -DELTA):
        raise LpNumericalError("recovered point violates an inequality beyond tolerance")
    if E.shape[0] and np.any(np.abs(E @ x - f) > DELTA):
        raise LpNumericalError("recovered point violates an equality beyond tolerance")
    return LpResult("optimal", float(c @ x + constant), x)


def _violation_lp(poly: Polytope) -> LpResult:
    """Minimize the uniform violation ``t >= 0`` with ``G x + t >= h``, ``E x = f`` (unit rows)."""
    G, h, E, f = poly.normalized()
    m = poly.dim
    Ga = np.vstack([np.hstack([G, np.ones((G.shape[0], 1))]), np.append(np.zeros(m), 1.0)])
    aug = Polytope(m + 1, Ga, np.append(-h, 0.0), np.hstack([E, np.zeros((E.shape[0], 1))]), -f)
    obj = np.zeros(m + 1)
    obj[-1] = 1.0
    return lp_minimize(aug, obj)


def feasible_point(poly: Polytope) -> Optional[np.ndarray]:
    """A point violating no constraint of ``poly`` by more than DELTA, or None."""
    if poly.trivially_empty:
        return None
    if poly.G.shape[0] == 0:
        res = lp_minimize(poly, np.zeros(poly.dim))
        return res.point if res.status == "optimal" else None
    res = _violation_lp(poly)
    if res.status != "optimal" or res.value > DELTA:
        return None
    return res.point[:poly.dim]


def polytope_nonempty(poly: Polytope) -> bool:
    return feasible_point(poly) is not None


def _chebyshev_lp(poly: Polytope) -> LpResult:
    G, h, E, f = poly.normalized()
    m = poly.dim
    # variables (x, r): G x - r >= h, r >= 0, E x = f
    Ga = np.vstack([np.hstack([G, -np.ones((G.shape[0], 1))]), np.append(np.zeros(m), 1.0)])
    ga = np.append(-h, 0.0)
    Ea = np.hstack([E, np.zeros((E.shape[0], 1))])
    obj = np.zeros(m + 1)
    obj[-1] = -1.0
    return lp_minimize(Polytope(m + 1, Ga, ga, Ea, -f), obj)


def chebyshev_center(poly: Polytope) -> np.ndarray:
    """Center of a largest ball inscribed in ``poly`` (within its equality subspace)."""
    if poly.trivially_empty:
        raise InfeasibleError("Chebyshev center of an empty polytope")
    res = _chebyshev_lp(poly)
    if res.status == "infeasible":
        raise InfeasibleError("Chebyshev center of an empty polytope")
    if res.status == "unbounded":
        raise ValueError("Chebyshev center of an unbounded polytope")
    return res.point[:poly.dim]


def inradius(poly: Polytope) -> float:
    """Radius of a largest inscribed ball; ``-inf`` if empty, ``inf`` if unbounded."""
    if poly.trivially_empty:
        return -np.inf
    res = _chebyshev_lp(poly)
    if res.status == "infeasible":
        return -np.inf
    if res.status == "unbounded":
        return np.inf
    return -res.value


def box_intersects(poly: Polytope, box: Box) -> bool:
    """``poly ∩ box ≠ ∅``; single-constraint rejection first, LP only when needed."""
    if poly.excluded_by_box(box):
        return False
    return polytope_nonempty(poly.intersect(box.to_polytope()))


def first_intersecting_box(poly: Polytope, lowers: np.ndarray, uppers: np.ndarray, with_point: bool = False):
    """Index of the first box (rows of ``lowers``/``uppers``) meeting ``poly``, or None.

    Boxes ruled out by a single constraint are filtered in one vectorized pass.
    With ``with_point`` the result is ``(index, point)`` or ``(None, None)``.
    """
    miss = (None, None) if with_point else None
    if poly.trivially_empty or lowers.shape[0] == 0:
        return miss
    centers = 0.5 * (lowers + uppers)
    radii = 0.5 * (uppers - lowers)
    alive = np.ones(lowers.shape[0], dtype=bool)
    if poly.G.shape[0]:
        hi = centers @ poly.G.T + radii @ np.abs(poly.G).T + poly.g
        alive &= np.all(hi >= -DELTA * np.linalg.norm(poly.G, axis=1), axis=1)
    if poly.E.shape[0]:
        mid = centers @ poly.E.T + poly.e
        spread = radii @ np.abs(poly.E).T + DELTA * np.linalg.norm(poly.E, axis=1)
        alive &= np.all(np.abs(mid) <= spread, axis=1)
    for k in np.flatnonzero(alive):
        pt = feasible_point(poly.intersect(Box(lowers[k], uppers[k]).to_polytope()))
        if pt is not None:
            return (int(k), pt) if with_point else int(k)
    return miss


def halfspaces_from_rows(rows: Sequence[Sequence[float]], dim: int) -> Polytope:
    """Compact row form ``[a_1, ..., a_dim, b]`` meaning ``a . x + b >= 0``."""
    arr = np.asarray(rows, dtype=float).reshape(-1, dim + 1)
    return Polytope(dim, arr[:, :dim], arr[:, dim])
