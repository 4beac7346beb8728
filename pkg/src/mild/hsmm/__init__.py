"""Hidden semi-Markov model over the concatenated two-agent latent space."""

from mild.hsmm.fit import (
    dwell_times,
    em_objective,
    estimate_durations,
    fit_em,
    fit_hsmm,
    init_temporal_split,
    viterbi,
)
from mild.hsmm.forward import ForwardFilter, ForwardResult, forward_variable, prior_component, prior_schedule
from mild.hsmm.gmr import GmrStream, gmr_condition
from mild.hsmm.model import HsmmModel, duration_log_pmf, segment_transitions

__all__ = [
    "ForwardFilter",
    "ForwardResult",
    "GmrStream",
    "HsmmModel",
    "duration_log_pmf",
    "dwell_times",
    "em_objective",
    "estimate_durations",
    "fit_em",
    "fit_hsmm",
    "forward_variable",
    "gmr_condition",
    "init_temporal_split",
    "prior_component",
    "prior_schedule",
    "segment_transitions",
    "viterbi",
]
