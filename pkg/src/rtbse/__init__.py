"""Real-time blind speech extraction.

ILRMA (plain, spatially regularized, null-regularized) estimates a demixing
matrix on a sliding block; a rank-constrained covariance model and a
multichannel Wiener filter extract the target every STFT hop.
"""
from .errors import (ChannelMismatch, ConvergenceFailure, InputTooShort, NonFiniteIntermediate,
                     NotStarted, RankDeficiencyViolation, RtbseError, ShapeMismatch,
                     SilentSpeech, SingularMatrix, StrictDeadlineViolation, ZeroReference)
from .ilrma import VARIANTS, DemixingState, NmfModel, run_ilrma
from .pipeline import Pipeline, PipelineConfig, PriorConfig, WSnapshot
from .prior import ArrayGeometry, build_prior, prior_from_geometry
from .rcscme import RcscmeConfig, derive_fixed, process_frame, update_frame
from .simeval import make_scenario, sdr, sdr_improvement_segments, synthesize_mixture
from .stft import StftConfig, analyze, synthesize

__version__ = "0.1.0"
