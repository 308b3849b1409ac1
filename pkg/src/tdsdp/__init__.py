"""Position and velocity of a moving source from round-trip time delays.

Modules: scenario (data model and files), forward (delay model and noise),
linearize (lifted linear system and constraints), sdp (interior-point
solver), estimators (RSDP, PF-SDP, APF-SDP), analysis (CRLB and error
statistics), harness and cli (Monte Carlo experiments).
"""

from .analysis import crlb, delay_jacobian, logmsed, mse
from .estimators import PenaltyConfig, apf_sdp, pf_sdp, rsdp
from .forward import simulate_measurements, true_delay
from .scenario import Scenario, builtin, load_scenario, make_scenario

__all__ = [
    "PenaltyConfig",
    "Scenario",
    "apf_sdp",
    "builtin",
    "crlb",
    "delay_jacobian",
    "load_scenario",
    "logmsed",
    "make_scenario",
    "mse",
    "pf_sdp",
    "rsdp",
    "simulate_measurements",
    "true_delay",
]

__version__ = "0.1.0"
