"""Adaptive Dormand-Prince 5(4) integration of a learned velocity field.

All trajectories in a batch share one step size by default; the error
norm is an RMS over every component of the batch. NFE accounting follows
the FSAL convention: one evaluation at the start, then six per attempted
step, accepted or rejected, so ``nfe == 1 + 6 * (accepted + rejected)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data.features import FeatureMatrix
from .data.preprocess import PreprocessStats, apply_preprocess, invert_preprocess
from .errors import ConfigError, DivergenceError, ModeError, NonConvergenceError, ShapeError

log = logging.getLogger(__name__)

GENERATE_TOL = 1e-7
UNFOLD_TOL = 1e-3

# Dormand & Prince (1980) coefficients
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array(A[6] + [0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
ORDER_EXPONENT = 1 / 5


@dataclass(frozen=True)
class SolverConfig:
    atol: float = GENERATE_TOL
    rtol: float = GENERATE_TOL
    max_steps: int = 10_000
    initial_step: float | None = None
    per_trajectory: bool = False

    def __post_init__(self):
        if not (self.atol > 0 and self.rtol > 0):
            raise ConfigError("atol and rtol must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ConfigError("initial_step must be positive")


@dataclass
class IntegrationResult:
    state: np.ndarray
    nfe: int
    accepted_steps: int
    rejected_steps: int
    trajectories: int = 1  # number of independently stepped groups

    @property
    def nfe_mean(self) -> float:
        return self.nfe / self.trajectories


def _rms(a: np.ndarray) -> float:
    # sorted reduction: the norm must not depend on row order
    sq = np.sort(np.square(a, dtype=np.float64), axis=None)
    return float(np.sqrt(sq.sum() / max(sq.size, 1)))


def _eval(f, t, x, nfe_box):
    k = f(t, x)
    nfe_box[0] += 1
    if not np.all(np.isfinite(k)):
        raise DivergenceError(f"velocity field returned non-finite values at t={t!r}")
    return np.asarray(k, dtype=np.float64)


def _stages(f, t, x, h, k1, nfe_box):
    ks = [k1]
    for i in range(1, 7):
        dx = sum(a * k for a, k in zip(A[i], ks) if a != 0.0)
        ks.append(_eval(f, t + C[i] * h, x + h * dx, nfe_box))
    x5 = x + h * sum(b * k for b, k in zip(B5, ks) if b != 0.0)
    err = h * sum(e * k for e, k in zip(E, ks) if e != 0.0)
    return x5, err, ks[6]


def _initial_step(x0, k1, span, cfg):
    sc = cfg.atol + cfg.rtol * np.abs(x0)
    d0 = _rms(x0 / sc)
    d1 = _rms(k1 / sc)
    if d1 < 1e-5:
        return span  # field vanishes at the start: try the whole interval
    if d0 < 1e-5:
        return min(1e-6, span)
    return min(0.01 * d0 / d1, span)


def dopri5(f, x0, t_span=(0.0, 1.0), cfg: SolverConfig | None = None) -> IntegrationResult:
    """Integrate ``dx/dt = f(t, x)`` over ``t_span`` with adaptive steps."""
    cfg = cfg or SolverConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    if cfg.per_trajectory and x0.ndim == 2 and x0.shape[0] > 1:
        return _dopri5_rows(f, x0, t_span, cfg)
    t0, t1 = float(t_span[0]), float(t_span[1])
    span = t1 - t0
    if span <= 0:
        raise ConfigError("t_span must be increasing")

    nfe = [0]
    x = x0.copy()
    t = t0
    k1 = _eval(f, t, x, nfe)
    h = min(cfg.initial_step, span) if cfg.initial_step else _initial_step(x, k1, span, cfg)
    accepted = rejected = 0
    while t < t1:
        if accepted + rejected >= cfg.max_steps:
            raise NonConvergenceError(f"max_steps={cfg.max_steps} exceeded at t={t!r}", t, x)
        if t + h >= t1:
            h = t1 - t
            t_new = t1
        else:
            t_new = t + h
        if t_new == t:
            raise NonConvergenceError(f"step size underflow at t={t!r}", t, x)
        x5, err_vec, k7 = _stages(f, t, x, h, k1, nfe)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x5))
        err = _rms(err_vec / scale)
        if not np.isfinite(err):
            raise DivergenceError(f"non-finite error estimate at t={t!r}")
        if err <= 1.0:
            t, x, k1 = t_new, x5, k7
            accepted += 1
        else:
            rejected += 1
        factor = MAX_FACTOR if err == 0.0 else SAFETY * err ** (-ORDER_EXPONENT)
        h *= min(MAX_FACTOR, max(MIN_FACTOR, factor))
    return IntegrationResult(x, nfe[0], accepted, rejected)


def _dopri5_rows(f, x0, t_span, cfg):
    row_cfg = SolverConfig(cfg.atol, cfg.rtol, cfg.max_steps, cfg.initial_step, per_trajectory=False)
    out = np.empty_like(x0)
    nfe = acc = rej = 0
    for i in range(x0.shape[0]):
        res = dopri5(lambda t, x, i=i: f(t, x, rows=slice(i, i + 1)), x0[i:i + 1], t_span, row_cfg)
        out[i] = res.state[0]
        nfe += res.nfe
        acc += res.accepted_steps
        rej += res.rejected_steps
    return IntegrationResult(out, nfe, acc, rej, trajectories=x0.shape[0])


def dopri5_fixed(f, x0, t_span, n_steps: int) -> np.ndarray:
    """Fixed-step Dormand-Prince (5th-order solution), for order checks."""
    x = np.asarray(x0, dtype=np.float64).copy()
    t0, t1 = t_span
    h = (t1 - t0) / n_steps
    nfe = [0]
    for i in range(n_steps):
        t = t0 + i * h
        k1 = _eval(f, t, x, nfe)
        x, _, _ = _stages(f, t, x, h, k1, nfe)
    return x


# -- model-level entry points ----------------------------------------------


def _velocity_fn(net, cond_embedding=None):
    """Wrap a network as f(t, x[, rows]) in float64 for the integrator."""

    def f(t, x, rows=None):
        emb = None
        if cond_embedding is not None:
            emb = cond_embedding if rows is None else cond_embedding[rows]
        v = net.forward(x.astype(net.dtype), t, cond_embedding=emb)
        return v.astype(np.float64)

    return f


def _integrate_chunks(net, x0, cfg, chunk_size, cond=None):
    out = np.empty_like(x0, dtype=np.float64)
    nfe_total = 0.0
    groups = 0
    for start in range(0, x0.shape[0], chunk_size):
        sl = slice(start, start + chunk_size)
        emb = net.embed_condition(cond[sl]) if cond is not None else None
        res = dopri5(_velocity_fn(net, emb), x0[sl], (0.0, 1.0), cfg)
        out[sl] = res.state
        nfe_total += res.nfe
        groups += res.trajectories
    return out, (nfe_total / groups if groups else 0.0)


def _unpack(checkpoint):
    return checkpoint.net, checkpoint.stats


def generate(checkpoint, n: int, cfg: SolverConfig | None = None, seed: int = 0,
             chunk_size: int = 50_000) -> tuple[FeatureMatrix, float]:
    """Draw ``n`` events by integrating prior noise from t=0 to t=1.

    Returns the events in physical units and the mean NFE per integration.
    """
    net, stats = _unpack(checkpoint)
    if net.config.conditional:
        raise ModeError("generate needs an unconditional checkpoint; use unfold")
    cfg = cfg or SolverConfig(GENERATE_TOL, GENERATE_TOL)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n, net.config.dim)).astype(net.dtype)
    if n == 0:
        empty = FeatureMatrix(np.zeros((0, net.config.dim), np.float32), "standardized")
        return invert_preprocess(empty, stats), 0.0
    x1, nfe_mean = _integrate_chunks(net, x0, cfg, chunk_size)
    std = FeatureMatrix(x1.astype(np.float32), "standardized")
    return invert_preprocess(std, stats), nfe_mean


def unfold(checkpoint, detector: FeatureMatrix, cfg: SolverConfig | None = None, seed: int = 0,
           row_ids: np.ndarray | None = None, chunk_size: int = 50_000) -> tuple[FeatureMatrix, float]:
    """Map detector-level events to particle level, one prior draw per row.

    Row ``i`` starts from prior draw number ``row_ids[i]`` (default ``i``)
    of the seeded stream, so permuting rows together with their ids
    permutes the output identically.
    """
    net, stats = _unpack(checkpoint)
    if not net.config.conditional:
        raise ModeError("unfold needs a conditional checkpoint; use generate")
    if detector.n_features != net.config.dim:
        raise ShapeError(f"detector events have {detector.n_features} features, model expects {net.config.dim}")
    cfg = cfg or SolverConfig(UNFOLD_TOL, UNFOLD_TOL)
    cond = detector if detector.space == "standardized" else apply_preprocess(detector, stats)
    n = cond.n_events
    if row_ids is None:
        row_ids = np.arange(n)
    row_ids = np.asarray(row_ids, dtype=np.int64)
    if row_ids.shape != (n,):
        raise ShapeError("row_ids must have one entry per detector row")
    if n == 0:
        empty = FeatureMatrix(np.zeros((0, net.config.dim), np.float32), "standardized")
        return invert_preprocess(empty, stats), 0.0
    stream = np.random.default_rng(seed).standard_normal((int(row_ids.max()) + 1, net.config.dim))
    x0 = stream[row_ids].astype(net.dtype)
    x1, nfe_mean = _integrate_chunks(net, x0, cfg, chunk_size, cond=cond.values)
    std = FeatureMatrix(x1.astype(np.float32), "standardized")
    return invert_preprocess(std, stats), nfe_mean


def unfold_point_estimate(checkpoint, detector: FeatureMatrix, draws: int, cfg: SolverConfig | None = None,
                          seed: int = 0, chunk_size: int = 50_000) -> np.ndarray:
    """Per-event posterior mean estimated from ``draws`` independent unfoldings (physical units)."""
    acc = None
    for k in range(draws):
        out, _ = unfold(checkpoint, detector, cfg, seed=seed + k, chunk_size=chunk_size)
        vals = out.values.astype(np.float64)
        acc = vals if acc is None else acc + vals
    return acc / draws
