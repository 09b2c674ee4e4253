"""Synthetic 1-D benchmark densities.

Every family is a parameterized mixture; the defaults below are fixed,
documented choices and any of them can be overridden through
``MockSpec.params``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from ..errors import ConfigError
from .features import FeatureMatrix

WEIGHT_TOL = 1e-12


def _spikes(k: int) -> dict:
    return {"base_width": 1.0, "spike_width": 0.05, "spike_weight": 0.05, "span": 1.5, "n_spikes": k}


# Mixtures are kept to an overall spread of about one unit so that two
# independent 10^6-event draws agree to W1 ~ 2e-3, below the thresholds
# the fidelity metrics are judged against.
DEFAULTS: dict[str, dict] = {
    "gaussian": {"loc": 0.0, "scale": 1.0},
    "bimodal-asym": {"weights": [0.7, 0.3], "means": [-1.0, 1.0], "widths": [0.3, 0.5]},
    "exponential-decay": {"rate": 1.0},
    "gauss-cutoff": {"loc": 0.0, "scale": 1.0, "cutoff": -0.5},
    "narrow-wide-overlap": {"weights": [0.4, 0.6], "means": [0.0, 0.3], "widths": [0.1, 0.8]},
    "noise-3spikes": _spikes(3),
    "noise-10spikes": _spikes(10),
    # peak heights 5:1 -> w_tall / 0.15 == 5 * w_flat / 0.6
    "tall-flat-far": {"weights": [5 / 9, 4 / 9], "means": [-1.0, 1.0], "widths": [0.15, 0.6]},
    "triple-flat-spread": {"weights": [1 / 3, 1 / 3, 1 / 3], "means": [-1.2, 0.0, 1.2], "widths": [0.35, 0.35, 0.35]},
    "triple-mixed": {"weights": [0.5, 0.3, 0.2], "means": [-1.0, 0.2, 1.4], "widths": [0.3, 0.5, 0.2]},
    "uniform-flat": {"low": -1.0, "high": 1.0},
    "delta": {"loc": 0.0},
}
FAMILIES = tuple(DEFAULTS)


@dataclass(frozen=True)
class MockSpec:
    family: str
    n: int = 100_000
    seed: int = 0
    params: dict = field(default_factory=dict)

    def resolved_params(self) -> dict:
        if self.family not in DEFAULTS:
            raise ConfigError(f"unknown mock family {self.family!r}; choose from {', '.join(FAMILIES)}")
        unknown = set(self.params) - set(DEFAULTS[self.family])
        if unknown:
            raise ConfigError(f"unknown parameter(s) {sorted(unknown)} for mock family {self.family!r}")
        return {**DEFAULTS[self.family], **self.params}

    def mixture(self) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
        """(weights, means, widths) for Gaussian-mixture families, else None."""
        p = self.resolved_params()
        fam = self.family
        if fam == "gaussian":
            w, mu, sd = [1.0], [p["loc"]], [p["scale"]]
        elif "weights" in p:
            w, mu, sd = p["weights"], p["means"], p["widths"]
        elif fam.startswith("noise-"):
            k = int(p["n_spikes"])
            centers = np.linspace(-p["span"], p["span"], k)
            w = [1.0 - k * p["spike_weight"]] + [p["spike_weight"]] * k
            mu = [0.0] + list(centers)
            sd = [p["base_width"]] + [p["spike_width"]] * k
        else:
            return None
        w, mu, sd = (np.asarray(v, dtype=np.float64) for v in (w, mu, sd))
        if not (w.shape == mu.shape == sd.shape):
            raise ConfigError(f"{fam}: weights, means and widths must have equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ConfigError(f"{fam}: mixture weights must be nonnegative and sum to 1 (got {w.sum()!r})")
        if np.any(sd <= 0):
            raise ConfigError(f"{fam}: widths must be strictly positive")
        return w, mu, sd


def sample_mock(spec: MockSpec) -> FeatureMatrix:
    """Draw ``spec.n`` i.i.d. samples as an (n, 1) physical-space matrix."""
    if spec.n < 0:
        raise ConfigError("sample count must be nonnegative")
    p = spec.resolved_params()
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    mix = spec.mixture()
    if mix is not None:
        w, mu, sd = mix
        comp = np.searchsorted(np.cumsum(w)[:-1], rng.random(n), side="right")
        x = mu[comp] + sd[comp] * rng.standard_normal(n)
    elif spec.family == "exponential-decay":
        if p["rate"] <= 0:
            raise ConfigError("exponential-decay: rate must be positive")
        x = rng.exponential(1.0 / p["rate"], n)
    elif spec.family == "gauss-cutoff":
        if p["scale"] <= 0:
            raise ConfigError("gauss-cutoff: scale must be positive")
        # inverse-CDF sampling of the normal restricted to x > cutoff
        lo = ndtr((p["cutoff"] - p["loc"]) / p["scale"])
        u = lo + (1.0 - lo) * rng.random(n)
        x = p["loc"] + p["scale"] * ndtri(np.clip(u, lo, np.nextafter(1.0, 0.0)))
    elif spec.family == "uniform-flat":
        if not p["high"] > p["low"]:
            raise ConfigError("uniform-flat: high must exceed low")
        x = rng.uniform(p["low"], p["high"], n)
    elif spec.family == "delta":
        x = np.full(n, p["loc"], dtype=np.float64)
    else:  # pragma: no cover - every family is handled above
        raise ConfigError(spec.family)
    return FeatureMatrix(x.reshape(n, 1).astype(np.float32), "physical")
