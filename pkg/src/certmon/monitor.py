"""Online certificate monitor.

Each observation triggers one ``Next``: build the lookahead cone from the
current state, and if the cone reaches the unsafe set, verify every boundary
cube the cone touches. A verdict of 0 latches.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol

import numpy as np

from .cone import ConeResult, construct_cone
from .dynamics import SystemSpec
from .geometry import DELTA
from .network import ReluNetwork, forward
from .verifier import BoundaryResult, VerifiedCache, VerifierConfig, verify_cubes_on_boundary

UNSAFE_REACH = "unsafe_reach"
CUBE_VIOLATION = "cube_violation"
BUDGET_OVERRUN = "budget_overrun"
NUMERICAL = "numerical"
CAUSES = (UNSAFE_REACH, CUBE_VIOLATION, BUDGET_OVERRUN, NUMERICAL)

# Extra slices beyond the lookahead horizon: one interval of observation delay
# and one of computation.
HORIZON_MARGIN = 2


@dataclass(frozen=True)
class MonitorConfig:
    horizon_steps: int
    epsilon: float
    bloat: float = 0.0
    verifier: VerifierConfig = field(default_factory=VerifierConfig)
    budget: Optional[float] = None  # defaults to epsilon
    window: int = 32

    def __post_init__(self):
        if int(self.horizon_steps) != self.horizon_steps or self.horizon_steps < 1:
            raise ValueError(f"horizon_steps must be a positive integer, got {self.horizon_steps}")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError("epsilon must be positive")
        if not (np.isfinite(self.bloat) and self.bloat >= 0):
            raise ValueError("bloat must be finite and nonnegative")
        if self.budget is None:
            object.__setattr__(self, "budget", float(self.epsilon))
        if not self.budget > 0 or self.budget > self.epsilon:
            raise ValueError(f"budget {self.budget} must be positive and at most epsilon {self.epsilon}")
        if self.window < 1:
            raise ValueError("window must hold at least one state")

    @property
    def effective_horizon(self) -> int:
        return int(self.horizon_steps) + HORIZON_MARGIN


@dataclass
class Verdict:
    value: int
    cause: Optional[str] = None
    witness: Optional[np.ndarray] = None
    depth: Optional[int] = None
    overrun: bool = False

    def __bool__(self):
        return self.value == 1

    def same_as(self, other: "Verdict") -> bool:
        """Equality ignoring timing-dependent fields."""
        if self.value != other.value or self.depth != other.depth:
            return False
        strip = lambda c: None if c == BUDGET_OVERRUN else c  # noqa: E731
        if strip(self.cause) != strip(other.cause):
            return False
        if (self.witness is None) != (other.witness is None):
            return False
        return self.witness is None or np.array_equal(self.witness, other.witness)


@dataclass
class StepTiming:
    construct: float
    verify: float
    total: float


@dataclass
class MonitorState:
    spec: SystemSpec
    net: ReluNetwork
    cfg: MonitorConfig
    verdict: int = 1
    k: int = 0
    cache: VerifiedCache = field(default_factory=VerifiedCache)
    timing: list = field(default_factory=list)
    trace_window: deque = field(default_factory=deque)
    latched: Optional[Verdict] = None
    fail_safe: Optional[Callable[[Verdict], Any]] = None
    fail_safe_fired: bool = False

    def __eq__(self, other):
        if not isinstance(other, MonitorState):
            return NotImplemented
        return (self.spec is other.spec and self.net == other.net and self.cfg == other.cfg
                and self.verdict == other.verdict and self.k == other.k and self.cache == other.cache
                and list(map(tuple, self.trace_window)) == list(map(tuple, other.trace_window)))


def monitor_init(spec: SystemSpec, net: ReluNetwork, cfg: MonitorConfig,
                 fail_safe: Optional[Callable[[Verdict], Any]] = None) -> MonitorState:
    if net.input_dim != spec.state_dim:
        raise ValueError(f"certificate takes {net.input_dim} inputs, system has {spec.state_dim} states")
    if not np.isclose(cfg.epsilon, spec.dt, rtol=1e-12, atol=0.0):
        raise ValueError(f"epsilon {cfg.epsilon} must equal the control interval {spec.dt}")
    # touch the cached discretization and clipped unsafe pieces up front
    spec.discrete
    spec.unsafe_clipped
    return MonitorState(spec, net, cfg, trace_window=deque(maxlen=cfg.window), fail_safe=fail_safe)


def _domain_check(st: MonitorState, x: np.ndarray) -> Optional[Verdict]:
    if x.shape != (st.spec.state_dim,) or not np.all(np.isfinite(x)) or not st.spec.state_bounds.contains(x):
        return Verdict(0, NUMERICAL, x.copy() if x.ndim == 1 else None, 0)
    if forward(st.net, x) < -DELTA:
        return Verdict(0, UNSAFE_REACH, x.copy(), 0)
    return None


def _from_boundary(res: BoundaryResult) -> Verdict:
    if res.verdict == 1:
        return Verdict(1)
    return Verdict(0, res.cause, res.witness, res.depth)


def _latch(st: MonitorState, v: Verdict, elapsed: float) -> Verdict:
    if st.verdict == 0:
        out = Verdict(0, st.latched.cause, st.latched.witness, st.latched.depth)
    else:
        out = v
        if v.value == 0:
            st.verdict = 0
            st.latched = v
    if elapsed > st.cfg.budget:
        out.overrun = True
        if out.value == 1:
            out.cause = BUDGET_OVERRUN
    if out.value == 0 and not st.fail_safe_fired:
        st.fail_safe_fired = True
        if st.fail_safe is not None:
            st.fail_safe(out)
    st.k += 1
    return out


def monitor_next(st: MonitorState, x) -> tuple[MonitorState, Verdict]:
    """Process one observation. The state is updated in place and returned."""
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float).reshape(-1)
    st.trace_window.append(x.copy())
    t_construct = t_verify = 0.0
    v = _domain_check(st, x)
    if v is None:
        h = st.cfg.effective_horizon
        cone: ConeResult = construct_cone(st.spec, x, h, st.cfg.bloat)
        t1 = time.perf_counter()
        t_construct = t1 - t0
        if cone.unsafe_witness is None:
            v = Verdict(1)
        elif cone.numerical:
            v = Verdict(0, NUMERICAL, cone.unsafe_witness, cone.depth)
        else:
            res = verify_cubes_on_boundary(x, cone.unsafe_witness, cone.cone, cone.depth, h, st.spec,
                                           st.net, st.cfg.verifier, st.cache)
            v = _from_boundary(res)
        t_verify = time.perf_counter() - t1
    total = time.perf_counter() - t0
    st.timing.append(StepTiming(t_construct, t_verify, total))
    return st, _latch(st, v, total)


# -- the generic loop ---------------------------------------------------------

class Abstraction(Protocol):
    """Maps a state and a step horizon to an over-approximation of the reachable set."""

    def __call__(self, x: np.ndarray, horizon: int) -> Any: ...


class Verifier(Protocol):
    """Decides whether the certificate holds on the given reachable-set abstraction."""

    def __call__(self, x: np.ndarray, reach: Any) -> Verdict: ...


class ConeAbstraction:
    def __init__(self, spec: SystemSpec, bloat: float):
        self.spec = spec
        self.bloat = bloat

    def __call__(self, x, horizon):
        x = np.asarray(x, dtype=float)
        if not (np.all(np.isfinite(x)) and self.spec.state_bounds.contains(x)):
            return None
        return construct_cone(self.spec, x, horizon, self.bloat)


class CubeVerifier:
    def __init__(self, spec: SystemSpec, net: ReluNetwork, cfg: VerifierConfig, cache: VerifiedCache,
                 horizon: int):
        self.spec, self.net, self.cfg, self.cache, self.horizon = spec, net, cfg, cache, horizon

    def __call__(self, x, reach: Optional[ConeResult]) -> Verdict:
        if reach is None:
            return Verdict(0, NUMERICAL, np.array(x, dtype=float), 0)
        if forward(self.net, x) < -DELTA:
            return Verdict(0, UNSAFE_REACH, np.array(x, dtype=float), 0)
        if reach.unsafe_witness is None:
            return Verdict(1)
        if reach.numerical:
            return Verdict(0, NUMERICAL, reach.unsafe_witness, reach.depth)
        res = verify_cubes_on_boundary(x, reach.unsafe_witness, reach.cone, reach.depth, self.horizon,
                                       self.spec, self.net, self.cfg, self.cache)
        return _from_boundary(res)


def relu_plugins(st: MonitorState) -> tuple[ConeAbstraction, CubeVerifier]:
    h = st.cfg.effective_horizon
    return (ConeAbstraction(st.spec, st.cfg.bloat),
            CubeVerifier(st.spec, st.net, st.cfg.verifier, st.cache, h))


def schematic_next(abstraction: Abstraction, verifier: Verifier, st: MonitorState, x) -> tuple[MonitorState, Verdict]:
    """``v_buffer = V(A(x, h + 2))``, then latch."""
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float).reshape(-1)
    st.trace_window.append(x.copy())
    reach = abstraction(x, st.cfg.effective_horizon)
    t1 = time.perf_counter()
    v = verifier(x, reach)
    if isinstance(v, (bool, int, np.integer, np.bool_)):
        v = Verdict(int(bool(v)), None if v else CUBE_VIOLATION)
    total = time.perf_counter() - t0
    st.timing.append(StepTiming(t1 - t0, total - (t1 - t0), total))
    return st, _latch(st, v, total)


class CertificateMonitor:
    """Stateful convenience wrapper around ``monitor_init`` / ``monitor_next``."""

    def __init__(self, spec: SystemSpec, net: ReluNetwork, cfg: MonitorConfig,
                 fail_safe: Optional[Callable[[Verdict], Any]] = None):
        self.state = monitor_init(spec, net, cfg, fail_safe)

    def next(self, x) -> Verdict:
        self.state, v = monitor_next(self.state, x)
        return v

    @property
    def verdict(self) -> int:
        return self.state.verdict

    @property
    def timing(self) -> list:
        return self.state.timing
