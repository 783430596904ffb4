"""Control-affine linear systems ``x' = A x + B u + c``, exact stepping and trace simulation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .geometry import Box, halfspaces_from_rows


class ControlBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class LinearAffineSystem:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        m = A.shape[0] if A.ndim == 2 else 0
        if A.ndim != 2 or A.shape != (m, m) or m == 0:
            raise ValueError(f"drift matrix must be square and nonempty, got shape {A.shape}")
        B = np.array(self.B, dtype=float)
        if B.size == 0:
            B = np.zeros((m, 0))
        if B.ndim != 2 or B.shape[0] != m:
            raise ValueError(f"input matrix must have {m} rows, got shape {B.shape}")
        c = np.zeros(m) if self.c is None else np.array(self.c, dtype=float).reshape(-1)
        if c.shape != (m,):
            raise ValueError(f"constant drift must have length {m}")
        for arr in (A, B, c):
            if not np.all(np.isfinite(arr)):
                raise ValueError("system matrices must be finite")
            arr.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    def vector_field(self, x, u=None) -> np.ndarray:
        u = np.zeros(self.control_dim) if u is None else np.asarray(u, dtype=float)
        return self.A @ np.asarray(x, dtype=float) + self.B @ u + self.c

    def discretize(self, dt: float):
        """``(Phi, Gamma, gamma)`` with ``x(t+dt) = Phi x + Gamma u + gamma`` for constant ``u``."""
        m, n = self.state_dim, self.control_dim
        aug = np.zeros((m + n + 1, m + n + 1))
        aug[:m, :m] = self.A
        aug[:m, m:m + n] = self.B
        aug[:m, -1] = self.c
        E = expm(aug * dt)
        return E[:m, :m], E[:m, m:m + n], E[:m, -1]


def cwh_system(mean_motion: float) -> LinearAffineSystem:
    """Clohessy-Wiltshire relative dynamics, state ``[x, y, z, vx, vy, vz]``, thrust accelerations ``u``.

    x is radial, y along-track, z cross-track.
    """
    n = float(mean_motion)
    if not n > 0:
        raise ValueError(f"mean motion must be positive, got {mean_motion}")
    A = np.zeros((6, 6))
    A[0:3, 3:6] = np.eye(3)
    A[3, 0] = 3.0 * n * n
    A[3, 4] = 2.0 * n
    A[4, 3] = -2.0 * n
    A[5, 2] = -n * n
    B = np.zeros((6, 3))
    B[3:6, :] = np.eye(3)
    return LinearAffineSystem(A, B, np.zeros(6))


@dataclass(frozen=True, eq=False)
class SystemSpec:
    system: LinearAffineSystem
    state_bounds: Box
    initial_set: Box
    unsafe: tuple
    control_box: Box
    dt: float
    # raw unsafe rows, kept for bit-exact config round trips
    unsafe_rows: tuple = field(default=(), repr=False)

    def __post_init__(self):
        m, n = self.system.state_dim, self.system.control_dim
        if not self.dt > 0:
            raise ValueError("control interval dt must be positive")
        if self.state_bounds.dim != m or self.initial_set.dim != m:
            raise ValueError("state boxes do not match the system's state dimension")
        if self.control_box.dim != n:
            raise ValueError(f"control box has dimension {self.control_box.dim}, system has {n} inputs")
        if not self.state_bounds.contains_box(self.initial_set):
            raise ValueError("initial set must lie inside the state bounds")
        object.__setattr__(self, "unsafe", tuple(self.unsafe))
        for P in self.unsafe:
            if P.dim != m:
                raise ValueError("unsafe polytope dimension does not match the state dimension")

    @property
    def state_dim(self) -> int:
        return self.system.state_dim

    @property
    def control_dim(self) -> int:
        return self.system.control_dim

    @cached_property
    def discrete(self):
        return self.system.discretize(self.dt)

    @cached_property
    def interval_euler(self):
        """``(M, |M|, d, e)``: one Euler step maps a box (center ``c``, radius ``r``) to
        center ``M c + d`` and radius ``|M| r + e`` over the whole control box."""
        s = self.system
        M = np.eye(self.state_dim) + self.dt * s.A
        Bd = self.dt * s.B
        U = self.control_box
        return M, np.abs(M), Bd @ U.center + self.dt * s.c, np.abs(Bd) @ U.radius

    @cached_property
    def unsafe_clipped(self) -> tuple:
        """Unsafe pieces intersected with the state bounds."""
        box = self.state_bounds.to_polytope()
        return tuple(P.intersect(box) for P in self.unsafe)

    def in_unsafe(self, x, tol: float = 0.0) -> bool:
        return any(P.contains(x, tol) for P in self.unsafe)


def step(spec: SystemSpec, x, u=None) -> np.ndarray:
    """Advance one control interval under constant ``u`` using the exact discretization."""
    x = np.asarray(x, dtype=float)
    u = np.zeros(spec.control_dim) if u is None else np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != spec.control_dim:
        raise ValueError(f"control has dimension {u.shape[0]}, expected {spec.control_dim}")
    if not spec.control_box.contains(u):
        raise ControlBoundsError(f"control {u} outside the control box")
    Phi, Gamma, gamma = spec.discrete
    return Phi @ x + Gamma @ u + gamma


@dataclass
class Trace:
    states: np.ndarray    # (steps + 1, m)
    controls: np.ndarray  # (steps, n)

    def __len__(self):
        return self.states.shape[0]


Controller = Callable[[np.ndarray], Sequence[float]]


def clamp_control(spec: SystemSpec, u) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(-1)
    # nan from a misbehaving controller falls back to the box center
    u = np.where(np.isnan(u), spec.control_box.center, u)
    return spec.control_box.clip(u)


def simulate(spec: SystemSpec, controller: Controller, x0, steps: int) -> Trace:
    x = np.asarray(x0, dtype=float).copy()
    if not spec.state_bounds.contains(x):
        raise ValueError("initial state lies outside the state bounds")
    states = [x]
    controls = []
    for _ in range(steps):
        u = clamp_control(spec, controller(x.copy()))
        x = step(spec, x, u)
        states.append(x)
        controls.append(u)
    n = spec.control_dim
    return Trace(np.array(states), np.array(controls).reshape(-1, n))


# -- config files ------------------------------------------------------------

def system_from_dict(doc: dict) -> SystemSpec:
    if "cwh" in doc:
        system = cwh_system(doc["cwh"]["mean_motion"])
    elif "system" in doc:
        s = doc["system"]
        system = LinearAffineSystem(s["A"], s.get("B", []), s.get("c"))
    else:
        raise ValueError("system config needs a 'system' or 'cwh' entry")
    m = system.state_dim
    rows = tuple(tuple(tuple(float(v) for v in r) for r in piece) for piece in doc.get("unsafe", []))
    unsafe = tuple(halfspaces_from_rows(piece, m) for piece in rows)
    return SystemSpec(
        system=system,
        state_bounds=Box.from_dict(doc["state_bounds"]),
        initial_set=Box.from_dict(doc["initial_set"]),
        unsafe=unsafe,
        control_box=Box.from_dict(doc["control_box"]),
        dt=float(doc["dt"]),
        unsafe_rows=rows,
    )


def system_to_dict(spec: SystemSpec) -> dict:
    s = spec.system
    return {
        "system": {"A": s.A.tolist(), "B": s.B.tolist(), "c": s.c.tolist()},
        "state_bounds": spec.state_bounds.to_dict(),
        "initial_set": spec.initial_set.to_dict(),
        "unsafe": [[list(r) for r in piece] for piece in spec.unsafe_rows],
        "control_box": spec.control_box.to_dict(),
        "dt": spec.dt,
    }


def load_system(text: str) -> SystemSpec:
    return system_from_dict(json.loads(text))


def read_system(path) -> SystemSpec:
    with open(path) as fh:
        return load_system(fh.read())


def dump_system(spec: SystemSpec) -> str:
    return json.dumps(system_to_dict(spec), indent=1)


def make_spec(system: LinearAffineSystem, state_bounds: Box, initial_set: Box, unsafe_rows,
              control_box: Box, dt: float) -> SystemSpec:
    """Build a spec from compact unsafe rows (``[a..., b]`` meaning ``a.x + b >= 0``)."""
    m = system.state_dim
    rows = tuple(tuple(tuple(float(v) for v in r) for r in piece) for piece in unsafe_rows)
    return SystemSpec(system, state_bounds, initial_set,
                      tuple(halfspaces_from_rows(p, m) for p in rows), control_box, dt, rows)
