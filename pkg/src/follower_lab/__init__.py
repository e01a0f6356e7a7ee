"""Follower dynamics lab: simulate, capture, identify, and analyze
human tracking behavior as a stochastic linear time-invariant system."""

from .model import (
    DEFAULT_DT,
    DEFAULT_SIGMA_POS,
    EnvParams,
    FollowerParams,
    FollowerState,
    NoiseModel,
    StateSpaceModel,
    block_diagonal,
    build_state_space,
    contact_force,
    discretize,
    simulate,
    stochastic_output,
)
from .trajectory import (
    DEFAULT_CUTOFF_HZ,
    FourierComponent,
    FourierSpec,
    NoiseTrajSpec,
    Trajectory,
    default_fourier_spec,
    default_noise_spec,
    gen_filtered_noise,
    gen_fourier,
    gen_orientation_noise,
    single_axis_mask,
)
from .sysid import (
    CouplingReport,
    FitOptions,
    FitResult,
    SegmentReport,
    StructuredFollowerEstimator,
    UnstructuredFollowerEstimator,
    coupling_report,
    fit_structured,
    fit_unstructured,
    init_from_axis_fits,
    rms_percent_error,
    segment_analysis,
)
from .analysis import (
    CoherenceResult,
    EnergySeries,
    ResidualStats,
    SpectrumResult,
    amplitude_spectrum,
    bhattacharyya_distance,
    coherence,
    energy_series,
    nyquist_curve,
    passivity_crossing,
    path_length,
    record_energy,
    residual_stats,
    spectral_xcorr,
    spectrum_pair,
    time_xcorr,
)
from .session import (
    AnalysisReport,
    SessionRecord,
    export_csv,
    load_session,
    load_trajectory,
    resample_align,
    save_session,
    save_trajectory,
)
from ._validation import ValidationError

__version__ = "0.1.0"

__all__ = [
    "AnalysisReport", "CoherenceResult", "CouplingReport", "DEFAULT_CUTOFF_HZ",
    "DEFAULT_DT", "DEFAULT_SIGMA_POS", "EnergySeries", "EnvParams", "FitOptions",
    "FitResult", "FollowerParams", "FollowerState", "FourierComponent",
    "FourierSpec", "NoiseModel", "NoiseTrajSpec", "ResidualStats", "SegmentReport",
    "SessionRecord", "SpectrumResult", "StateSpaceModel",
    "StructuredFollowerEstimator", "Trajectory", "UnstructuredFollowerEstimator",
    "ValidationError", "amplitude_spectrum", "bhattacharyya_distance",
    "block_diagonal", "build_state_space", "coherence", "contact_force",
    "coupling_report", "default_fourier_spec", "default_noise_spec", "discretize",
    "energy_series", "export_csv", "fit_structured", "fit_unstructured",
    "gen_filtered_noise", "gen_fourier", "gen_orientation_noise",
    "init_from_axis_fits", "load_session", "nyquist_curve", "passivity_crossing",
    "path_length", "record_energy", "resample_align", "residual_stats",
    "rms_percent_error", "save_session", "save_trajectory", "load_trajectory",
    "segment_analysis", "simulate",
    "single_axis_mask", "spectral_xcorr", "spectrum_pair", "stochastic_output",
    "time_xcorr",
]
