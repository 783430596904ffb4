"""Lookahead cone: per-step box over-approximations of the reachable states.

Slice 0 is the observed state; slice ``k+1`` is the interval-Euler image of
slice ``k`` under every admissible control, inflated by ``bloat`` per
coordinate and clipped to the state bounds.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .dynamics import SystemSpec
from .geometry import Box, InfeasibleError, LpNumericalError, box_intersects, chebyshev_center, feasible_point


@dataclass
class Cone:
    lowers: np.ndarray  # (k+1, m)
    uppers: np.ndarray
    origin: np.ndarray
    bloat: float

    @property
    def slices(self) -> list[Box]:
        return [Box(lo, hi) for lo, hi in zip(self.lowers, self.uppers)]

    def __len__(self):
        return self.lowers.shape[0]

    def slice(self, k: int) -> Box:
        return Box(self.lowers[k], self.uppers[k])

    def truncated(self, depth: int) -> "Cone":
        return Cone(self.lowers[:depth + 1].copy(), self.uppers[:depth + 1].copy(), self.origin, self.bloat)

    def extended(self, spec: SystemSpec) -> "Cone":
        lo, hi = _expand(spec, self.lowers[-1], self.uppers[-1], self.bloat)
        return Cone(np.vstack([self.lowers, lo]), np.vstack([self.uppers, hi]), self.origin, self.bloat)

    def hull(self) -> Box:
        return Box(self.lowers.min(axis=0), self.uppers.max(axis=0))

    def contains(self, k: int, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lowers[k] - tol) and np.all(x <= self.uppers[k] + tol))


@dataclass
class ConeResult:
    cone: Cone
    unsafe_witness: Optional[np.ndarray]
    depth: int
    numerical: bool = False


def _expand(spec: SystemSpec, lo: np.ndarray, hi: np.ndarray, bloat: float):
    M, absM, d, e = spec.interval_euler
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    center = M @ c + d
    radius = absM @ r + (e + bloat)
    X = spec.state_bounds
    # a slice pushed entirely past a bound collapses onto that face
    new_lo = np.minimum(np.maximum(center - radius, X.lower), X.upper)
    new_hi = np.maximum(np.minimum(center + radius, X.upper), X.lower)
    return new_lo, new_hi


def expand_slice(spec: SystemSpec, box: Box, bloat: float) -> Box:
    """One-step interval image ``{x + dt (A x + B u + c)}`` over ``box × U``, inflated and clipped."""
    if bloat < 0:
        raise ValueError("bloat must be nonnegative")
    lo = np.clip(box.lower, spec.state_bounds.lower, spec.state_bounds.upper)
    hi = np.clip(box.upper, spec.state_bounds.lower, spec.state_bounds.upper)
    return Box(*_expand(spec, lo, hi, bloat))


@lru_cache(maxsize=64)
def _unroll_tables(spec: SystemSpec, h: int, bloat: float):
    """Unclipped slice ``k``: center ``P[k] x + s[k]``, radius ``r[k]``."""
    M, absM, d, e = spec.interval_euler
    m = spec.state_dim
    P = np.empty((h + 1, m, m))
    s = np.empty((h + 1, m))
    r = np.empty((h + 1, m))
    P[0], s[0], r[0] = np.eye(m), 0.0, 0.0
    for k in range(h):
        P[k + 1] = M @ P[k]
        s[k + 1] = M @ s[k] + d
        r[k + 1] = absM @ r[k] + (e + bloat)
    return P, s, r


def unroll(spec: SystemSpec, x, h: int, bloat: float) -> Cone:
    """Slices 0..h with no unsafe-set check."""
    x = np.asarray(x, dtype=float)
    P, s, r = _unroll_tables(spec, int(h), float(bloat))
    c = P @ x + s
    lows, ups = c - r, c + r
    X = spec.state_bounds
    clipped = np.flatnonzero(np.any((lows < X.lower) | (ups > X.upper), axis=1))
    if clipped.size:
        # once a slice is clipped the closed form no longer applies
        for k in range(int(clipped[0]), h + 1):
            lows[k], ups[k] = _expand(spec, lows[k - 1], ups[k - 1], bloat)
    lows[0] = ups[0] = x
    return Cone(lows, ups, x.copy(), float(bloat))


def _unsafe_hits(spec: SystemSpec, cone: Cone) -> Optional[int]:
    """First slice index whose box may meet some unsafe piece, by single-constraint rejection."""
    centers = 0.5 * (cone.lowers + cone.uppers)
    radii = 0.5 * (cone.uppers - cone.lowers)
    alive = np.zeros(len(cone), dtype=bool)
    for P in spec.unsafe_clipped:
        if P.trivially_empty:
            continue
        ok = np.ones(len(cone), dtype=bool)
        if P.G.shape[0]:
            hi = centers @ P.G.T + radii @ np.abs(P.G).T + P.g
            ok &= np.all(hi >= -1e-7 * np.linalg.norm(P.G, axis=1), axis=1)
        alive |= ok
    idx = np.flatnonzero(alive)
    return int(idx[0]) if idx.size else None


def construct_cone(spec: SystemSpec, x, h: int, bloat: float) -> ConeResult:
    """Grow slices from ``x`` until one meets the unsafe set or ``h`` steps are covered.

    The witness is the Chebyshev center of the first nonempty ``slice ∩ unsafe``
    (a near-feasible point when the two only touch).
    If an LP fails numerically the slice center stands in as the witness.
    """
    if h < 1:
        raise ValueError("horizon must be at least one step")
    cone = unroll(spec, x, h, bloat)
    if not spec.unsafe:
        return ConeResult(cone, None, h)
    start = _unsafe_hits(spec, cone)
    if start is None:
        return ConeResult(cone, None, h)
    for k in range(start, h + 1):
        box = cone.slice(k)
        for P in spec.unsafe_clipped:
            try:
                if not box_intersects(P, box):
                    continue
                meet = P.intersect(box.to_polytope())
                try:
                    witness = chebyshev_center(meet)
                except InfeasibleError:
                    # touching only within tolerance: any near-feasible point will do
                    witness = feasible_point(meet)
                    if witness is None:
                        continue
            except LpNumericalError:
                return ConeResult(cone.truncated(k), box.center, k, numerical=True)
            return ConeResult(cone.truncated(k), witness, k)
    return ConeResult(cone, None, h)


def one_step_defect(spec: SystemSpec, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``|exact successor - Euler successor|`` per probe row."""
    Phi, Gamma, gamma = spec.discrete
    sysm = spec.system
    exact = X @ Phi.T + U @ Gamma.T + gamma
    euler = X + spec.dt * (X @ sysm.A.T + U @ sysm.B.T + sysm.c)
    return np.abs(exact - euler)


def calibrate_bloat(spec: SystemSpec, n_probes: int = 1_000_000, seed: int = 0, factor: float = 1.5,
                    chunk: int = 200_000) -> float:
    """``factor`` times the largest one-step Euler defect seen on uniform probes of ``X × U``."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0
    done = 0
    X_box, U_box = spec.state_bounds, spec.control_box
    while done < n_probes:
        k = min(chunk, n_probes - done)
        X = X_box.lower + rng.random((k, spec.state_dim)) * (X_box.upper - X_box.lower)
        U = U_box.lower + rng.random((k, spec.control_dim)) * (U_box.upper - U_box.lower)
        worst = max(worst, float(one_step_defect(spec, X, U).max()))
        done += k
    return factor * worst
