import os
import sys
from pathlib import Path

import numpy as np
import pytest

from certmon.dynamics import LinearAffineSystem, make_spec, read_system
from certmon.geometry import Box

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"

sys.path.insert(0, str(Path(__file__).resolve().parent))


def integrator_spec(dim=2, u=1.0, unsafe_rows=(), dt=0.1, bound=3.0, init=0.5, damping=0.0):
    """Pure (or damped) integrator ``x' = -damping x + u`` with a symmetric control box."""
    u = np.broadcast_to(np.asarray(u, dtype=float), (dim,))
    sysm = LinearAffineSystem(-damping * np.eye(dim), np.eye(dim), None)
    return make_spec(sysm, Box(-bound * np.ones(dim), bound * np.ones(dim)),
                     Box(-init * np.ones(dim), init * np.ones(dim)), unsafe_rows, Box(-u, u), dt)


@pytest.fixture
def sandbox_spec():
    return read_system(CONFIGS / "sandbox_2d.json")


@pytest.fixture
def breach_spec():
    return read_system(CONFIGS / "sandbox_2d_breach.json")


@pytest.fixture
def cwh_spec():
    return read_system(CONFIGS / "rendezvous_cwh.json")


@pytest.fixture
def seeded_net():
    """The seeded 2-4-1 net used by several oracle checks."""
    from certmon.network import random_network
    return random_network([4], 2, np.random.default_rng(7))


def pytest_configure(config):
    os.environ.setdefault("MPLBACKEND", "Agg")


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
