"""Datasets: synthetic mocks, photoproduction kinematics, preprocessing, event files."""

from .eventfile import load_events, save_events
from .features import FeatureMatrix
from .kinematics import SmearConfig, generate_events, project_24_to_10, smear_events
from .mocks import FAMILIES, MockSpec, sample_mock
from .preprocess import PreprocessStats, apply_preprocess, fit_preprocess, invert_preprocess

__all__ = [
    "FAMILIES", "FeatureMatrix", "MockSpec", "PreprocessStats", "SmearConfig",
    "apply_preprocess", "fit_preprocess", "generate_events", "invert_preprocess",
    "load_events", "project_24_to_10", "sample_mock", "save_events", "smear_events",
]
