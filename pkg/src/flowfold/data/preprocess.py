"""Per-feature standardization followed by a global scale factor.

Forward: ``scale * (x - mean) / std``. Standard deviations use the
population (1/N) convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateFeatureError, ShapeError, StateError
from .features import FeatureMatrix

DEFAULT_SCALE = 5.0
MIN_STD = 1e-12


@dataclass(frozen=True)
class PreprocessStats:
    mean: np.ndarray
    std: np.ndarray
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ShapeError("mean and std lengths differ")
        bad = np.flatnonzero(~(std > MIN_STD))
        if bad.size:
            raise DegenerateFeatureError(int(bad[0]), f"feature {int(bad[0])} has std {std[bad[0]]!r} <= {MIN_STD}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def n_features(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), d["scale"])


def fit_preprocess(data: FeatureMatrix, scale: float = DEFAULT_SCALE, allow_degenerate: bool = False) -> PreprocessStats:
    """Sample mean and population std of every feature.

    With ``allow_degenerate`` a zero-variance feature (delta mocks) gets
    std 1, so it is only shifted to zero.
    """
    if data.space != "physical":
        raise StateError("fit_preprocess expects physical-space data")
    vals = data.split_pairs()[0].values if data.paired else data.values
    if vals.shape[0] < 2:
        raise ValueError("need at least two events to fit preprocessing")
    x = vals.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    degenerate = np.flatnonzero(~(std > MIN_STD))
    if degenerate.size:
        if not allow_degenerate:
            raise DegenerateFeatureError(int(degenerate[0]))
        std[degenerate] = 1.0
    return PreprocessStats(mean, std, scale)


def _broadcast(stats: PreprocessStats, data: FeatureMatrix):
    if data.n_features == stats.n_features:
        return stats.mean, stats.std
    if data.paired and data.n_features == 2 * stats.n_features:
        return np.tile(stats.mean, 2), np.tile(stats.std, 2)
    raise ShapeError(f"stats for {stats.n_features} features applied to {data.n_features}")


def apply_preprocess(data: FeatureMatrix, stats: PreprocessStats) -> FeatureMatrix:
    if data.space != "physical":
        raise StateError("data is already standardized")
    mean, std = _broadcast(stats, data)
    z = stats.scale * (data.values.astype(np.float64) - mean) / std
    return FeatureMatrix(z.astype(np.float32), "standardized", data.paired)


def invert_preprocess(data: FeatureMatrix, stats: PreprocessStats) -> FeatureMatrix:
    if data.space != "standardized":
        raise StateError("data is already in physical units")
    mean, std = _broadcast(stats, data)
    x = data.values.astype(np.float64) * std / stats.scale + mean
    return FeatureMatrix(x.astype(np.float32), "physical", data.paired)
