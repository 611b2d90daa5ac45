"""Cluster-aware causal mixer for multivariate time-series anomaly detection.

Pipeline: correlation-profile channel clustering (:mod:`ccmtad.clustering`),
a multi-embedding causal MLP-mixer reconstruction model (:mod:`ccmtad.model`),
and a sequential p-value/evidence detector with boundary refinement
(:mod:`ccmtad.detector`), plus evaluation metrics and a CLI.
"""

__version__ = "0.1.0"

from .clustering import ClusterAssignment, compute_profiles, select_cluster_count, spectral_cluster
from .data import Dataset, load_csv, synth_generate, SynthSpec, AnomalySegment
from .detector import CalibrationTable, DetectorConfig, calibrate, detect_stream, refine_boundaries
from .errors import CCMTADError
from .model import CausalMixerNet, ModelConfig, fit, reconstruct_series

__all__ = [
    "AnomalySegment",
    "CCMTADError",
    "CalibrationTable",
    "CausalMixerNet",
    "ClusterAssignment",
    "Dataset",
    "DetectorConfig",
    "ModelConfig",
    "SynthSpec",
    "calibrate",
    "compute_profiles",
    "detect_stream",
    "fit",
    "load_csv",
    "reconstruct_series",
    "refine_boundaries",
    "select_cluster_count",
    "spectral_cluster",
    "synth_generate",
]
