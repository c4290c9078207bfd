"""Exact and certified numerics for self-averaging sequences p(n) = E[p(Y(n))]."""

__version__ = "0.1.0"

from .engine import PrecisionConfig, SequenceTable, build_table, load_table, save_table
from .envelope import (ContractionConstants, contraction_constants, envelope_at, scan_period,
                       subsequence_containment)
from .errors import (DomainError, InfeasibleError, PrecisionError, PushforwardLimitError, SelfAvgError,
                     WindowError)
from .kernels import DriftParameters, TransitionKernel, get_kernel, register_kernel
from .simulator import TrialConfig, run_trials

__all__ = [
    "ContractionConstants", "DomainError", "DriftParameters", "InfeasibleError", "PrecisionConfig",
    "PrecisionError", "PushforwardLimitError", "SelfAvgError", "SequenceTable", "TransitionKernel",
    "TrialConfig", "WindowError", "build_table", "contraction_constants", "envelope_at", "get_kernel",
    "load_table", "register_kernel", "run_trials", "save_table", "scan_period", "subsequence_containment",
]
