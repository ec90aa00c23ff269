"""Particle systems: mean-field feedback, McKean-Vlasov, exact small-N control."""

from .chaos import ChaosExperimentResult, chaos_rate_experiment, fit_power_law, sampling_floor
from .ensemble import (
    ParticleEnsemble,
    QuantileTrack,
    sample_initial,
    simulate_mckean_vlasov,
    simulate_meanfield_feedback,
)
from .small_n import (
    ParticleHamiltonian,
    SmallNValue,
    drift_bound,
    simulate_optimal_yn,
    solve_vn_small,
    vn_vs_u_gap,
)

__all__ = [
    "ChaosExperimentResult",
    "ParticleEnsemble",
    "ParticleHamiltonian",
    "QuantileTrack",
    "SmallNValue",
    "chaos_rate_experiment",
    "drift_bound",
    "fit_power_law",
    "sample_initial",
    "sampling_floor",
    "simulate_mckean_vlasov",
    "simulate_meanfield_feedback",
    "simulate_optimal_yn",
    "solve_vn_small",
    "vn_vs_u_gap",
]
