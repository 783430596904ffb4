"""Online verification of ReLU neural control barrier functions."""

from .cone import calibrate_bloat, construct_cone
from .dynamics import LinearAffineSystem, SystemSpec, cwh_system, make_spec, read_system, simulate, step
from .geometry import Box, Polytope
from .monitor import CertificateMonitor, MonitorConfig, Verdict, monitor_init, monitor_next, schematic_next
from .network import ReluNetwork, forward, load_network, read_network
from .synthetic import make_synthetic_cbf
from .verifier import VerifierConfig

__all__ = [
    "Box", "CertificateMonitor", "calibrate_bloat", "construct_cone", "LinearAffineSystem", "MonitorConfig", "Polytope", "ReluNetwork",
    "SystemSpec", "Verdict", "VerifierConfig", "cwh_system", "forward", "load_network", "make_spec",
    "make_synthetic_cbf", "monitor_init", "monitor_next", "read_network", "read_system", "schematic_next",
    "simulate", "step",
]
