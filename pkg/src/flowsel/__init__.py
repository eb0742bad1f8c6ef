"""Redundancy-aware frame selection and progressive adapter transfer, at desk scale."""

from .errors import (
    EmptyDataset,
    FlowselError,
    InstanceTooLarge,
    InvalidBudget,
    InvalidGrouping,
    InvalidRatio,
    InvalidRecord,
    InvalidSubset,
    ManifestError,
    ShapeError,
    StageOrderError,
)
from .features import FrameRecord, WeightVector, distance_matrix, extract_features, read_manifest, weighted_distance
from .oracles import TransportInstance, exact_winf, exact_wp, kcenter_bruteforce, verify_instance, verify_metric
from .sampler import SelectionResult, coverage_radius, select_ratio, wgs_select

__version__ = "0.1.0"

__all__ = [
    "EmptyDataset", "FlowselError", "InstanceTooLarge", "InvalidBudget", "InvalidGrouping", "InvalidRatio",
    "InvalidRecord", "InvalidSubset", "ManifestError", "ShapeError", "StageOrderError",
    "FrameRecord", "WeightVector", "distance_matrix", "extract_features", "read_manifest", "weighted_distance",
    "TransportInstance", "exact_winf", "exact_wp", "kcenter_bruteforce", "verify_instance", "verify_metric",
    "SelectionResult", "coverage_radius", "select_ratio", "wgs_select",
]
