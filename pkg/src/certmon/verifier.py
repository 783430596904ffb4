"""Local verification of ReLU barrier conditions on activation cubes.

On a cube the network is affine, so every barrier condition becomes an LP over
the state alone: with box-bounded inputs and linear dynamics the worst (or
best) control for a fixed gradient is a per-coordinate sign choice.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cone import Cone
from .dynamics import SystemSpec
from .geometry import (
    DELTA,
    LpNumericalError,
    Polytope,
    first_intersecting_box,
    feasible_point,
    inradius,
    lp_minimize,
)
from .network import (
    UNSTABLE_TOL,
    ActivationPattern,
    MaskedAffine,
    ReluNetwork,
    activation_pattern,
    cube_polytope,
    forward,
    masked_affine,
    neighborhood,  # noqa: F401  re-exported for callers of the verifier
)

ROBUST, EXISTENTIAL = "robust", "existential"
VALID, VIOLATION, FLAT = "valid", "violation", "flat"

# Cubes whose inscribed radius is at or below this are lower-dimensional.
FLAT_TOL = 1e-9

BISECTION_STEPS = 64
MAX_HINTS = 8


@dataclass(frozen=True)
class VerifierConfig:
    mode: str = ROBUST
    check_unstable: bool = False
    interior_lie_check: bool = False
    lam: float = 0.0
    tol: float = DELTA

    def __post_init__(self):
        if self.mode not in (ROBUST, EXISTENTIAL):
            raise ValueError(f"mode must be {ROBUST!r} or {EXISTENTIAL!r}, got {self.mode!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and nonnegative")


@dataclass
class Cube:
    pattern: ActivationPattern
    region: Polytope
    barrier: MaskedAffine
    anchor: Optional[np.ndarray] = None
    # points known to lie in the region, reused to short-cut cone tests
    hints: list = field(default_factory=list)

    @property
    def key(self) -> int:
        return self.pattern.key


@dataclass
class VerificationOutcome:
    status: str
    witness: Optional[np.ndarray] = None
    margin: float = np.inf
    condition: Optional[str] = None  # which check failed

    @property
    def ok(self) -> bool:
        return self.status != VIOLATION


class BoundaryViolation(Exception):
    """The unsafe endpoint of a boundary search already has ``B >= 0``."""

    def __init__(self, witness, value):
        super().__init__(f"unsafe state has certificate value {value:.6g} >= 0")
        self.witness = np.asarray(witness, dtype=float)
        self.value = value


def make_cube(net: ReluNetwork, pattern: ActivationPattern, spec: SystemSpec) -> Cube:
    if not pattern.canonical:
        pattern = pattern.canonicalized()
    aff = masked_affine(net, pattern)
    region = cube_polytope(net, pattern, aff).intersect(spec.state_bounds.to_polytope())
    return Cube(pattern, region, aff)


def control_extreme(spec: SystemSpec, grad, mode: str) -> float:
    """``min`` (robust) or ``max`` (existential) of ``grad . B u`` over the control box."""
    g = spec.system.B.T @ np.asarray(grad, dtype=float)
    U = spec.control_box
    lo, hi = g * U.lower, g * U.upper
    return float(np.minimum(lo, hi).sum() if mode == ROBUST else np.maximum(lo, hi).sum())


def lie_derivative(spec: SystemSpec, grad, x, mode: str) -> float:
    """``grad . (A x + c) + q(grad)`` evaluated directly."""
    grad = np.asarray(grad, dtype=float)
    s = spec.system
    return float(grad @ (s.A @ np.asarray(x, dtype=float) + s.c)) + control_extreme(spec, grad, mode)


def binary_search_boundary(net: ReluNetwork, x_safe, x_unsafe, spec: SystemSpec,
                           tol_B: Optional[float] = None) -> Cube:
    """Bisect ``[x_safe, x_unsafe]`` on the sign of ``B`` and return the cube of the last midpoint."""
    lo = np.asarray(x_safe, dtype=float)
    hi = np.asarray(x_unsafe, dtype=float)
    b_safe = forward(net, lo)
    b_unsafe = forward(net, hi)
    if b_unsafe >= 0.0:
        raise BoundaryViolation(hi, b_unsafe)
    if b_safe < -DELTA:
        raise ValueError(f"safe endpoint has negative certificate value {b_safe:.6g}")
    if tol_B is None:
        tol_B = 1e-6 * (1.0 + abs(b_safe))
    mid = 0.5 * (lo + hi)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        b = forward(net, mid)
        if abs(b) <= tol_B:
            break
        if b >= 0.0:
            lo = mid
        else:
            hi = mid
    cube = make_cube(net, activation_pattern(net, mid, UNSTABLE_TOL), spec)
    cube.anchor = mid
    return cube


def _boundary_slice(cube: Cube) -> Polytope:
    return cube.region.with_eq(cube.barrier.w_out, cube.barrier.r_out)


def _minimize_lie(spec: SystemSpec, poly: Polytope, grad, mode: str, extra=None):
    """Min over ``poly`` of ``grad.(Ax+c) + q(grad)`` plus an optional affine ``extra = (w, r)``."""
    s = spec.system
    obj = s.A.T @ grad
    const = float(grad @ s.c) + control_extreme(spec, grad, mode)
    if extra is not None:
        obj = obj + extra[0]
        const += extra[1]
    return lp_minimize(poly, obj, const)


def verify_linear(cube: Cube, spec: SystemSpec, cfg: VerifierConfig) -> VerificationOutcome:
    """Check the barrier conditions on one cube.

    Order: disjointness from the unsafe set on ``{B >= 0}``, the boundary flow
    condition, the optional unstable-face conditions, the optional interior
    decay condition. The first failure is returned with its witness.

    On a lower-dimensional cube the affine extension's gradient is not a
    gradient of ``B``, so only disjointness is checked there; its points are
    covered by the full-dimensional cubes around it.
    """
    w, r = cube.barrier.w_out, cube.barrier.r_out
    tol = cfg.tol
    margin = np.inf
    try:
        inside = cube.region.with_ge(w, r)
        for P in spec.unsafe:
            pt = feasible_point(inside.intersect(P))
            if pt is not None:
                return VerificationOutcome(VIOLATION, pt, -max(cube.barrier.value(pt), 0.0), "disjointness")
        if inradius(cube.region) <= FLAT_TOL:
            return VerificationOutcome(FLAT)

        boundary = _boundary_slice(cube)
        res = _minimize_lie(spec, boundary, w, cfg.mode)
        if res.status == "unbounded":
            return VerificationOutcome(VIOLATION, None, -np.inf, "boundary_flow")
        if res.status == "optimal":
            if res.value < -tol:
                return VerificationOutcome(VIOLATION, res.point, res.value, "boundary_flow")
            margin = min(margin, res.value)

        if cfg.check_unstable and res.status == "optimal":
            A = cube.barrier.pre_weights
            b = cube.barrier.pre_bias
            for k in range(A.shape[0]):
                face = boundary.with_eq(A[k], b[k])
                sign = 1.0 if cube.pattern.active[k] else -1.0
                fr = _minimize_lie(spec, face, sign * A[k], cfg.mode)
                if fr.status == "unbounded":
                    return VerificationOutcome(VIOLATION, None, -np.inf, f"unstable_face_{k}")
                if fr.status == "optimal":
                    if fr.value < -tol:
                        return VerificationOutcome(VIOLATION, fr.point, fr.value, f"unstable_face_{k}")
                    margin = min(margin, fr.value)

        if cfg.interior_lie_check:
            ir = _minimize_lie(spec, inside, w, cfg.mode, extra=(cfg.lam * w, cfg.lam * r))
            if ir.status == "unbounded":
                return VerificationOutcome(VIOLATION, None, -np.inf, "interior_decay")
            if ir.status == "optimal":
                if ir.value < -tol:
                    return VerificationOutcome(VIOLATION, ir.point, ir.value, "interior_decay")
                margin = min(margin, ir.value)
    except LpNumericalError:
        return VerificationOutcome(VIOLATION, None, -np.inf, "numerical")
    return VerificationOutcome(VALID, None, margin)


class VerifiedCache:
    """Memo of per-cube facts that do not depend on the cone.

    Keyed by canonical pattern key; inserts are idempotent, so concurrent
    writers agree on the stored value.
    """

    def __init__(self):
        self.outcomes: dict[int, VerificationOutcome] = {}
        self.touches: dict[int, bool] = {}
        self.cubes: dict[int, Cube] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self.outcomes)

    def __eq__(self, other):
        if not isinstance(other, VerifiedCache):
            return NotImplemented
        return self.outcomes.keys() == other.outcomes.keys() and self.touches == other.touches

    def cube(self, net: ReluNetwork, pattern: ActivationPattern, spec: SystemSpec) -> Cube:
        c = self.cubes.get(pattern.key)
        if c is None:
            c = self.cubes[pattern.key] = make_cube(net, pattern, spec)
        return c

    def verify(self, cube: Cube, spec: SystemSpec, cfg: VerifierConfig) -> VerificationOutcome:
        out = self.outcomes.get(cube.key)
        if out is not None:
            self.hits += 1
            return out
        self.misses += 1
        out = verify_linear(cube, spec, cfg)
        self.outcomes[cube.key] = out
        return out

    def touches_boundary(self, cube: Cube) -> bool:
        t = self.touches.get(cube.key)
        if t is None:
            try:
                pt = feasible_point(_boundary_slice(cube))
            except LpNumericalError:
                pt = None
                t = True
            else:
                t = pt is not None
            if pt is not None:
                cube.hints.append(pt)
            self.touches[cube.key] = t
        return t


def cube_meets_cone(cube: Cube, cone: Cone) -> bool:
    for p in cube.hints:
        if np.any(np.all((cone.lowers <= p) & (p <= cone.uppers), axis=1)):
            return True
    try:
        k, pt = first_intersecting_box(cube.region, cone.lowers, cone.uppers, with_point=True)
    except LpNumericalError:
        return True
    if k is None:
        return False
    if len(cube.hints) < MAX_HINTS:
        cube.hints.append(pt)
    return True


@dataclass
class BoundaryResult:
    verdict: int
    outcome: Optional[VerificationOutcome] = None
    witness: Optional[np.ndarray] = None
    cause: Optional[str] = None
    depth: int = 0
    verified: list = field(default_factory=list)  # pattern keys verified, in visit order
    cone: Optional[Cone] = None


def verify_cubes_on_boundary(x, x_unsafe, cone: Cone, depth: int, h: int, spec: SystemSpec,
                             net: ReluNetwork, cfg: VerifierConfig, cache: Optional[VerifiedCache] = None,
                             fail_safe: Optional[Callable[[BoundaryResult], None]] = None) -> BoundaryResult:
    """Breadth-first verification of boundary cubes inside a growing cone.

    Seeds with the cube found by bisecting towards ``x_unsafe``. Each sweep
    verifies the pending boundary cubes that meet the cone, then floods their
    one-flip neighbours that touch ``{B = 0}``; neighbours outside the cone wait
    for a later sweep. The cone grows one slice per sweep until ``h``.
    """
    if cache is None:
        cache = VerifiedCache()
    cone = cone.truncated(min(depth, len(cone) - 1))
    i = len(cone) - 1
    verified: list[int] = []

    def fail(outcome: Optional[VerificationOutcome], witness, cause) -> BoundaryResult:
        res = BoundaryResult(0, outcome, witness, cause, i, verified, cone)
        if fail_safe is not None:
            fail_safe(res)
        return res

    try:
        seed = binary_search_boundary(net, x, x_unsafe, spec)
    except BoundaryViolation as exc:
        return fail(None, exc.witness, "unsafe_reach")

    seen = {seed.key}
    boundary = [seed]
    while boundary:
        queue: deque[Cube] = deque()
        waiting = []
        for c in boundary:
            if not cube_meets_cone(c, cone):
                waiting.append(c)
                continue
            out = cache.verify(c, spec, cfg)
            if not out.ok:
                return fail(out, out.witness, "numerical" if out.condition == "numerical" else "cube_violation")
            verified.append(c.key)
            queue.append(c)
        boundary = waiting
        while queue:
            cur = queue.popleft().pattern
            for k in range(cur.n):
                # one-flip neighbours in layer-major order, screened by key first
                nkey = cur.key ^ (1 << k)
                if nkey in seen:
                    continue
                seen.add(nkey)
                nb = cache.cubes.get(nkey) or cache.cube(net, cur.flipped(k), spec)
                if nb.region.trivially_empty or not cache.touches_boundary(nb):
                    continue
                if not cube_meets_cone(nb, cone):
                    boundary.append(nb)
                    continue
                out = cache.verify(nb, spec, cfg)
                if not out.ok:
                    return fail(out, out.witness, "numerical" if out.condition == "numerical" else "cube_violation")
                verified.append(nb.key)
                queue.append(nb)
        if i >= h:
            break
        cone = cone.extended(spec)
        i += 1
    return BoundaryResult(1, None, None, None, i, verified, cone)
