"""Phase retrieval for partially coherent observations."""
from .model import (CoherenceLayout, ForwardOperator, NoiseSpec, PartialObservations,
                    TrueSolution, add_noise, forward_apply, noise_to_signal, observe_partial,
                    phase_diff_from_magnitudes, relative_deviation, success)
from .linear import (NullSpaceSystem, PhaseVector, SolveReport, build_Q, build_R,
                     check_oversampling, perturbation_bound, reconstruct_plain,
                     reconstruct_unit_constrained, recover_phases, smallest_singular_vector,
                     solve_pinned, solve_q, solve_r)
from .nonlinear import MinimizerConfig, make_functional, minimize, spectral_initialization

__version__ = "0.1.0"

__all__ = [
    "CoherenceLayout", "ForwardOperator", "NoiseSpec", "PartialObservations", "TrueSolution",
    "add_noise", "forward_apply", "noise_to_signal", "observe_partial",
    "phase_diff_from_magnitudes", "relative_deviation", "success",
    "NullSpaceSystem", "PhaseVector", "SolveReport", "build_Q", "build_R",
    "check_oversampling", "perturbation_bound", "reconstruct_plain",
    "reconstruct_unit_constrained", "recover_phases", "smallest_singular_vector",
    "solve_pinned", "solve_q", "solve_r",
    "MinimizerConfig", "make_functional", "minimize", "spectral_initialization",
]
