"""Distribution-fidelity metrics for generated versus reference events.

Marginal chi-square and Wasserstein-1 per feature, 2-D chi-square over
all feature pairs, the Frobenius distance between Pearson correlation
matrices, and nearest-neighbour distances for memorization checks.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .data.features import FeatureMatrix
from .errors import DegenerateFeatureError, DegenerateSupportError, ShapeError

log = logging.getLogger(__name__)

BINS_1D = 50
BINS_2D = 20
GEN_PROBE = 80_000
TRAIN_PROBE = 10_000
ARTIFACT_FLOOR = 1e-12


def _as_array(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        x = x.values
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _chi2_from_counts(observed: np.ndarray, expected: np.ndarray) -> float:
    observed = observed.astype(np.float64).ravel()
    expected = expected.astype(np.float64).ravel()
    total_obs, total_exp = observed.sum(), expected.sum()
    if total_obs > 0 and total_obs != total_exp:
        observed = observed * (total_exp / total_obs)
    mask = expected > 0
    return float(np.sum((observed[mask] - expected[mask]) ** 2 / expected[mask]))


def _support(truth: np.ndarray) -> tuple[float, float]:
    if truth.size == 0:
        raise DegenerateSupportError("truth sample is empty")
    lo, hi = float(truth.min()), float(truth.max())
    if not lo < hi:
        raise DegenerateSupportError(f"truth support is a single point ({lo!r})")
    return lo, hi


def chi2_1d(gen, truth, bins: int = BINS_1D) -> float:
    """Pearson chi-square between binned marginals.

    Bins span the truth extremes; generated values outside are dropped,
    the rest rescaled to the truth total, and empty truth bins skipped.
    """
    gen = np.asarray(gen, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    rng = _support(truth)
    expected, _ = np.histogram(truth, bins=bins, range=rng)
    observed, _ = np.histogram(gen, bins=bins, range=rng)
    return _chi2_from_counts(observed, expected)


def wasserstein_1d(gen, truth) -> float:
    """Exact W1 between two empirical 1-D distributions (integral of |F - G|)."""
    u = np.sort(np.asarray(gen, dtype=np.float64).ravel())
    v = np.sort(np.asarray(truth, dtype=np.float64).ravel())
    if u.size == 0 or v.size == 0:
        raise ValueError("wasserstein_1d needs two nonempty samples")
    if u.size == v.size:
        return float(np.mean(np.abs(u - v)))
    allv = np.concatenate([u, v])
    allv.sort(kind="mergesort")
    deltas = np.diff(allv)
    cdf_u = np.searchsorted(u, allv[:-1], side="right") / u.size
    cdf_v = np.searchsorted(v, allv[:-1], side="right") / v.size
    return float(np.sum(np.abs(cdf_u - cdf_v) * deltas))


def chi2_2d(gen, truth, bins: int = BINS_2D) -> float:
    """Mean 2-D chi-square over every unordered feature pair."""
    gen, truth = _as_array(gen), _as_array(truth)
    d = truth.shape[1]
    if d < 2:
        raise ValueError("chi2_2d needs at least two features")
    values = []
    for i, j in itertools.combinations(range(d), 2):
        try:
            rng = [_support(truth[:, i]), _support(truth[:, j])]
        except DegenerateSupportError:
            warnings.warn(f"skipping feature pair ({i}, {j}): degenerate truth axis", stacklevel=2)
            continue
        expected, _, _ = np.histogram2d(truth[:, i], truth[:, j], bins=bins, range=rng)
        observed, _, _ = np.histogram2d(gen[:, i], gen[:, j], bins=bins, range=rng)
        values.append(_chi2_from_counts(observed, expected))
    if not values:
        raise DegenerateSupportError("every feature pair has a degenerate axis")
    return float(np.mean(values))


def pair_count(d: int) -> int:
    return d * (d - 1) // 2


def _correlation(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    sd = np.sqrt(np.diag(cov))
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        raise DegenerateFeatureError(int(bad[0]))
    return cov / np.outer(sd, sd)


def correlation_distance(gen, truth) -> float:
    """Frobenius norm of corr(truth) - corr(gen)."""
    diff = _correlation(_as_array(truth)) - _correlation(_as_array(gen))
    return float(np.sqrt(np.sum(diff**2)))


# -- nearest neighbours ------------------------------------------------------


def pair_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise L2 distances, summing squared differences in feature order."""
    acc = np.zeros(a.shape[0])
    for k in range(a.shape[1]):
        acc += (a[:, k] - b[:, k]) ** 2
    return np.sqrt(acc)


def _nearest_1d(sorted_train: np.ndarray, queries: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_train, queries)
    left = sorted_train[np.clip(pos - 1, 0, sorted_train.size - 1)]
    right = sorted_train[np.clip(pos, 0, sorted_train.size - 1)]
    return np.minimum(np.abs(queries - left), np.abs(queries - right))


def nearest_distances(queries: np.ndarray, train: np.ndarray) -> np.ndarray:
    """Distance from every query row to its nearest training row."""
    queries, train = _as_array(queries), _as_array(train)
    if train.shape[1] == 1:
        d = _nearest_1d(np.sort(train[:, 0]), queries[:, 0])
        return pair_distances(d[:, None], np.zeros((d.size, 1)))
    _, idx = cKDTree(train).query(queries, k=1)
    return pair_distances(queries, train[idx])


def nearest_other_distances(train: np.ndarray, probe: np.ndarray) -> np.ndarray:
    """For each probe index, distance to the nearest *other* training row."""
    train = _as_array(train)
    probe = np.asarray(probe, dtype=np.int64)
    if train.shape[1] == 1:
        order = np.argsort(train[:, 0], kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        s = train[order, 0]
        r = rank[probe]
        x = s[r]
        left = np.where(r > 0, np.abs(x - s[np.maximum(r - 1, 0)]), np.inf)
        right = np.where(r < s.size - 1, np.abs(s[np.minimum(r + 1, s.size - 1)] - x), np.inf)
        d = np.minimum(left, right)
        return pair_distances(d[:, None], np.zeros((d.size, 1)))
    _, idx = cKDTree(train).query(train[probe], k=2)
    other = np.where(idx[:, 0] == probe, idx[:, 1], idx[:, 0])
    return pair_distances(train[probe], train[other])


@dataclass
class NNReport:
    ratio: float
    d_gen_to_train_mean: float
    d_gen_to_train_min: float
    d_train_to_train_mean: float
    d_train_to_train_min: float
    artifact: bool  # denominator too small for the ratio to mean anything


def nn_memorization(gen, train, probe_size: int = TRAIN_PROBE, gen_probe: int = GEN_PROBE,
                    seed: int = 0) -> NNReport:
    """Mean nearest-neighbour distance ratio, generated->train over train->train."""
    gen, train = _as_array(gen), _as_array(train)
    if train.shape[0] < 2:
        raise ValueError("need at least two training points")
    rng = np.random.default_rng(seed)
    if gen.shape[0] > gen_probe:
        gen = gen[np.sort(rng.choice(gen.shape[0], gen_probe, replace=False))]
    n_probe = min(probe_size, train.shape[0])
    probe = np.sort(rng.choice(train.shape[0], n_probe, replace=False))
    d_gt = nearest_distances(gen, train)
    d_tt = nearest_other_distances(train, probe)
    gt_mean, tt_mean = float(d_gt.mean()), float(d_tt.mean())
    artifact = tt_mean < ARTIFACT_FLOOR
    if artifact:
        log.warning("train->train NN distance %.3g below %.0e; ratio is a denominator artifact",
                    tt_mean, ARTIFACT_FLOOR)
    ratio = gt_mean / max(tt_mean, ARTIFACT_FLOOR)
    return NNReport(ratio, gt_mean, float(d_gt.min()), tt_mean, float(d_tt.min()), artifact)


# -- aggregate report --------------------------------------------------------


@dataclass
class MetricsReport:
    chi2_mean: float | None
    chi2_sum: float | None
    wasserstein_mean: float
    chi2_2d_mean: float | None
    correlation_distance: float | None
    nn_ratio: float | None = None
    nn_artifact: bool | None = None
    d_gen_to_train_mean: float | None = None
    d_gen_to_train_min: float | None = None
    d_train_to_train_mean: float | None = None
    d_train_to_train_min: float | None = None
    nfe_mean: float | None = None

    def to_dict(self, include_nn: bool | None = None) -> dict:
        d = asdict(self)
        if include_nn is None:
            include_nn = self.nn_ratio is not None
        if not include_nn:
            for k in ("nn_ratio", "nn_artifact", "d_gen_to_train_mean", "d_gen_to_train_min",
                      "d_train_to_train_mean", "d_train_to_train_min"):
                d.pop(k)
        return d


def evaluate(gen, truth, train=None, *, nn_gen=None, nn_train=None, nfe_mean: float | None = None,
             bins: int = BINS_1D, bins_2d: int = BINS_2D, probe_size: int = TRAIN_PROBE,
             gen_probe: int = GEN_PROBE, seed: int = 0) -> MetricsReport:
    """All fidelity metrics for one evaluation pass.

    Marginal and correlation metrics use ``gen``/``truth`` as given
    (physical units). The nearest-neighbour block runs only when ``train``
    is supplied; pass standardized copies via ``nn_gen``/``nn_train`` to
    measure distances in the training space.
    """
    g, t = _as_array(gen), _as_array(truth)
    if g.shape[1] != t.shape[1]:
        raise ShapeError(f"feature counts differ: gen {g.shape[1]}, truth {t.shape[1]}")
    chi2s = []
    for k in range(t.shape[1]):
        try:
            chi2s.append(chi2_1d(g[:, k], t[:, k], bins))
        except DegenerateSupportError:
            log.info("feature %d: degenerate truth support, chi2 skipped", k)
    w1 = float(np.mean([wasserstein_1d(g[:, k], t[:, k]) for k in range(t.shape[1])]))
    chi2_2 = None
    if t.shape[1] >= 2:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                chi2_2 = chi2_2d(g, t, bins_2d)
        except DegenerateSupportError:
            chi2_2 = None
    try:
        dcorr = correlation_distance(g, t)
    except DegenerateFeatureError:
        dcorr = None
    report = MetricsReport(
        chi2_mean=float(np.mean(chi2s)) if chi2s else None,
        chi2_sum=float(np.sum(chi2s)) if chi2s else None,
        wasserstein_mean=w1,
        chi2_2d_mean=chi2_2,
        correlation_distance=dcorr,
        nfe_mean=nfe_mean,
    )
    if train is not None:
        nn = nn_memorization(nn_gen if nn_gen is not None else g,
                             nn_train if nn_train is not None else train,
                             probe_size, gen_probe, seed)
        report.nn_ratio = nn.ratio
        report.nn_artifact = nn.artifact
        report.d_gen_to_train_mean = nn.d_gen_to_train_mean
        report.d_gen_to_train_min = nn.d_gen_to_train_min
        report.d_train_to_train_mean = nn.d_train_to_train_mean
        report.d_train_to_train_min = nn.d_train_to_train_min
    return report


def histograms(gen, truth, bins: int = BINS_1D) -> list[dict]:
    """Per-feature bin edges and counts on truth-bounded bins, for plotting elsewhere."""
    g, t = _as_array(gen), _as_array(truth)
    out = []
    for k in range(t.shape[1]):
        lo, hi = float(t[:, k].min()), float(t[:, k].max())
        if not lo < hi:
            lo, hi = lo - 0.5, hi + 0.5
        tc, edges = np.histogram(t[:, k], bins=bins, range=(lo, hi))
        gc, _ = np.histogram(g[:, k], bins=bins, range=(lo, hi))
        out.append({"feature": k, "edges": edges.tolist(), "truth": tc.tolist(), "gen": gc.tolist()})
    return out
