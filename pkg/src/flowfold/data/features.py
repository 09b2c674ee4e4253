from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

SPACES = ("physical", "standardized")


@dataclass(frozen=True)
class FeatureMatrix:
    """Events x features, float32, tagged with the space the values live in.

    ``paired`` marks unfolding files whose first half of the columns is the
    particle-level truth and second half the detector-level partner.
    """

    values: np.ndarray
    space: str = "physical"
    paired: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {vals.shape}")
        if self.space not in SPACES:
            raise ValueError(f"unknown space tag {self.space!r}")
        if self.paired and vals.shape[1] % 2:
            raise ShapeError("paired matrix needs an even number of columns")
        if vals.dtype != np.float32:
            vals = vals.astype(np.float32)
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature matrix contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def n_events(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def split_pairs(self) -> tuple["FeatureMatrix", "FeatureMatrix"]:
        """(truth, detector) halves of a paired matrix."""
        if not self.paired:
            raise ShapeError("matrix is not paired")
        d = self.n_features // 2
        return (
            FeatureMatrix(self.values[:, :d], self.space),
            FeatureMatrix(self.values[:, d:], self.space),
        )

    @classmethod
    def pair(cls, truth: "FeatureMatrix", detector: "FeatureMatrix") -> "FeatureMatrix":
        if truth.values.shape != detector.values.shape:
            raise ShapeError(f"truth {truth.values.shape} and detector {detector.values.shape} differ")
        if truth.space != detector.space:
            raise ValueError("truth and detector must share a space tag")
        return cls(np.concatenate([truth.values, detector.values], axis=1), truth.space, paired=True)

    def take(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.values[idx], self.space, self.paired)
