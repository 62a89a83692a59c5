"""Quantum trajectory unravelings of Lindblad dynamics at desk scale.

Simulate diffusive and counting unravelings, check the ergodicity and
purification hypotheses behind uniqueness of the trajectory's invariant
measure, sample that measure, and compare it with closed-form references in
exact Wasserstein-1 distance.
"""

from .operators import (
    DensityMatrix,
    ProjectivePoint,
    fs_distance,
    hermitize,
    make_projector,
    top_right_singular_vector,
    trace_distance,
    trace_norm,
    wedge_norm,
    wedge_square,
)
from .lindblad import (
    ErgodicityReport,
    OperatorModel,
    check_l_erg,
    direct_sum_model,
    evolve_master,
    invariant_projector_test,
    lindblad_apply,
    stationary_states,
    vectorized_generator,
)
from .purification import PurReport, check_pur, observable_set, purification_diagnostic
from .sim import (
    Curve,
    PropagatorState,
    SimConfig,
    circle_uniform_sampler,
    coupling_distance,
    estimate_f,
    haar_sampler,
    likelihood_matrix,
    ml_estimate,
    point_mass_sampler,
    propagate_S,
    simulate_propagator_ensemble,
    simulate_sme_ensemble,
    simulate_sse_ensemble,
    simulate_sse_trajectory,
    sme_step,
    sse_step,
)
from .measures import (
    AngleDensity,
    EmpiricalMeasure,
    FitResult,
    circle_w1,
    fit_rate,
    qubit_angle,
    qubit_angles,
    sample_invariant,
    wasserstein1,
)
from . import gallery

__version__ = "0.1.0"

__all__ = [
    "DensityMatrix", "ProjectivePoint", "fs_distance", "hermitize",
    "make_projector", "top_right_singular_vector", "trace_distance",
    "trace_norm", "wedge_norm", "wedge_square",
    "ErgodicityReport", "OperatorModel", "check_l_erg", "direct_sum_model",
    "evolve_master", "invariant_projector_test", "lindblad_apply",
    "stationary_states", "vectorized_generator",
    "PurReport", "check_pur", "observable_set", "purification_diagnostic",
    "Curve", "PropagatorState", "SimConfig", "circle_uniform_sampler",
    "coupling_distance", "estimate_f", "haar_sampler", "likelihood_matrix",
    "ml_estimate", "point_mass_sampler", "propagate_S",
    "simulate_propagator_ensemble", "simulate_sme_ensemble",
    "simulate_sse_ensemble", "simulate_sse_trajectory", "sme_step", "sse_step",
    "AngleDensity", "EmpiricalMeasure", "FitResult", "circle_w1", "fit_rate",
    "qubit_angle", "qubit_angles", "sample_invariant", "wasserstein1",
    "gallery",
]
