"""Rydberg CZ gate synthesis, trajectory noise modelling and erasure-conversion benchmarking."""

__version__ = "0.1.0"

from rydcz.atom import (  # noqa: E402
    ChebyshevDetuning,
    GateParams,
    Level,
    Pulse,
    build_blockade_model,
    propagate,
    read_pulse_table,
    write_pulse_table,
)
from rydcz.grape import CZPulseOptimizer, cz_fidelity, gate_infidelity, optimize  # noqa: E402
from rydcz.noise import NoiseConfig, error_budget, simulate_noisy_gate  # noqa: E402

__all__ = [
    "__version__",
    "ChebyshevDetuning",
    "GateParams",
    "Level",
    "Pulse",
    "build_blockade_model",
    "propagate",
    "read_pulse_table",
    "write_pulse_table",
    "CZPulseOptimizer",
    "cz_fidelity",
    "gate_infidelity",
    "optimize",
    "NoiseConfig",
    "error_budget",
    "simulate_noisy_gate",
]
