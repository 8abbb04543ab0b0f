"""Pilot-aided joint-channel carrier-phase estimation for multichannel
coherent optical links, with pilot-placement optimization and AIR
evaluation."""

from .model import (
    Constellation,
    ProcessNoiseCov,
    SystemConfig,
    build_process_noise_cov,
    generate_symbol_block,
    make_constellation,
    sample_phase_trajectory,
    transmit,
)
from .patterns import (
    PilotMask,
    StructuredDistribution,
    UnstructuredDistribution,
    Violation,
    heuristic,
    heuristic_s1,
    heuristic_s2,
    heuristic_s3,
    heuristic_s4,
    heuristic_s5,
    random_distribution,
    structured_to_mask,
    unstructured_to_mask,
    validate,
)
from .smoother import (
    MeasurementInfo,
    PhaseEstimates,
    SmootherTrace,
    covariance_smoother,
    pilot_measurement_info,
    state_smoother,
    wrapped_mse,
)
from .detection import LlrBlock, compute_llrs, iterate_cpe_detection
from .optimizer import (
    GaConfig,
    OptimizationResult,
    ga_step,
    optimize_structured,
    optimize_unstructured,
)
from .air import (
    AirResult,
    SweepResult,
    air_gain_table,
    estimate_air,
    estimate_gmi,
    sweep_pilot_rate,
)

__version__ = "0.1.0"
