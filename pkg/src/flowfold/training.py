"""Conditional flow matching training loop.

Each minibatch pairs data points x1 with fresh prior noise x0 and times
t ~ U[0, 1]; the network regresses the straight-line velocity x1 - x0 at
x_t = (1 - t) x0 + t x1. Every epoch ends with a validation pass that
generates (or unfolds) a fixed subset through the ODE solver so the log
carries the physics metrics next to the loss.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointRecord, rng_digest
from .data.features import FeatureMatrix
from .data.preprocess import PreprocessStats, invert_preprocess
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .metrics import evaluate
from .odeint import SolverConfig, _integrate_chunks
from .velocity import NetConfig, VelocityNet, init_params

log = logging.getLogger(__name__)

MONITORS = ("chi2_mean", "wasserstein_mean", "loss")
EPOCH_KEYS = ("epoch", "train_loss", "val_loss", "chi2_mean", "wasserstein_mean",
              "correlation_distance", "nfe_mean", "lr", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 20_000
    max_epochs: int = 800
    lr_decay_factor: float = 0.5
    lr_patience_epochs: int = 50
    lr_floor: float = 1e-7
    lr_threshold: float = 1e-4
    validation_subset: int = 50_000
    validation_tol: float = 1e-3
    checkpoint_monitor: str = "chi2_mean"
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.lr_floor > 0 and self.weight_decay >= 0):
            raise ConfigError("learning rates must be positive and weight decay nonnegative")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.validation_subset < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size, validation_subset must be >= 1 and max_epochs >= 0")
        if self.checkpoint_monitor not in MONITORS:
            raise ConfigError(f"checkpoint_monitor must be one of {MONITORS}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- objective ----------------------------------------------------------------


@dataclass
class CFMBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u_t: np.ndarray
    c: np.ndarray | None = None


def make_cfm_batch(x0, x1, t, c=None) -> CFMBatch:
    """Points on the straight path between ``x0`` and ``x1`` and their velocity."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    tc = np.asarray(t, dtype=x1.dtype).reshape(-1, 1)
    x_t = (1 - tc) * x0 + tc * x1
    return CFMBatch(x0, x1, tc.reshape(-1), x_t, x1 - x0, c)


def sample_cfm_batch(data: np.ndarray, batch_size: int, rng: np.random.Generator,
                     condition: np.ndarray | None = None, idx: np.ndarray | None = None) -> CFMBatch:
    """Draw a training batch: x1 from ``data``, x0 ~ N(0, I), t ~ U[0, 1].

    ``idx`` selects the data rows (a shuffled slice during an epoch);
    otherwise rows are drawn uniformly. ``condition`` must be row-aligned
    with ``data`` and yields the detector-level partner of each x1.
    """
    data = np.asarray(data)
    if condition is not None and np.shape(condition) != data.shape:
        raise ShapeError(f"condition {np.shape(condition)} is not paired with data {data.shape}")
    if idx is None:
        idx = rng.integers(0, data.shape[0], batch_size)
    x1 = data[idx]
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    t = rng.random(x1.shape[0])
    return make_cfm_batch(x0, x1, t, None if condition is None else np.asarray(condition)[idx])


def cfm_loss(net: VelocityNet, batch: CFMBatch) -> float:
    v = net.forward(batch.x_t, batch.t, batch.c)
    loss, _ = nx.mse_rows(v, batch.u_t.astype(v.dtype))
    return loss


def cfm_loss_and_grad(net: VelocityNet, batch: CFMBatch) -> tuple[float, dict[str, np.ndarray]]:
    v, cache = net.forward(batch.x_t, batch.t, batch.c, cache=True)
    loss, grad_v = nx.mse_rows(v, batch.u_t.astype(v.dtype))
    return loss, net.backward(cache, grad_v)


# -- optimizer and schedule ------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; updates parameter arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, state: dict | None = None):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        if state is None:
            self.step_count = 0
            self.m = nx.zeros_like_params(params)
            self.v = nx.zeros_like_params(params)
        else:
            self.step_count = int(state["step"])
            self.m = {k: np.array(state["m"][k]) for k in params}
            self.v = {k: np.array(state["v"][k]) for k in params}
            for k in params:
                if self.m[k].shape != params[k].shape or self.v[k].shape != params[k].shape:
                    raise ShapeError(f"optimizer state for {k} does not match parameter shape")

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             weight_decay: float = 0.0) -> None:
        if set(grads) != set(params):
            raise ShapeError("gradient buffer does not match parameter set")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if weight_decay:
                p *= 1.0 - lr * weight_decay
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(params, grads, state: AdamW, lr: float, weight_decay: float) -> AdamW:
    state.step(params, grads, lr, weight_decay)
    return state


@dataclass
class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without relative improvement."""

    lr: float
    factor: float = 0.5
    patience: int = 50
    floor: float = 1e-7
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, value: float) -> float:
        if value < self.best * (1.0 - self.threshold) or self.best == math.inf:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return asdict(self)


# -- training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    best: CheckpointRecord
    last: CheckpointRecord
    log: list[dict] = field(default_factory=list)


class _Validation:
    """Fixed validation subset, noise and prior draws for the whole run."""

    def __init__(self, x1, cond, stats, cfg: TrainConfig, dim: int):
        rng = np.random.default_rng([cfg.seed, 1])
        n = x1.shape[0]
        k = min(cfg.validation_subset, n)
        self.idx = np.sort(rng.choice(n, k, replace=False)) if k < n else np.arange(n)
        self.x1 = x1[self.idx]
        self.cond = None if cond is None else cond[self.idx]
        self.loss_x0 = rng.standard_normal(self.x1.shape).astype(np.float32)
        self.loss_t = rng.random(k)
        self.prior = rng.standard_normal((k, dim)).astype(np.float32)
        self.truth_phys = invert_preprocess(FeatureMatrix(self.x1, "standardized"), stats).values
        self.stats = stats
        self.solver = SolverConfig(cfg.validation_tol, cfg.validation_tol)
        self.chunk = cfg.batch_size

    def run(self, net: VelocityNet) -> dict:
        total = 0.0
        for s in range(0, self.x1.shape[0], self.chunk):
            sl = slice(s, s + self.chunk)
            batch = make_cfm_batch(self.loss_x0[sl], self.x1[sl], self.loss_t[sl],
                                   None if self.cond is None else self.cond[sl])
            total += cfm_loss(net, batch) * batch.x1.shape[0]
        val_loss = total / self.x1.shape[0]
        gen, nfe = _integrate_chunks(net, self.prior, self.solver, max(self.chunk, 50_000), cond=self.cond)
        gen_phys = invert_preprocess(FeatureMatrix(gen.astype(np.float32), "standardized"), self.stats).values
        report = evaluate(gen_phys, self.truth_phys)
        return {
            "val_loss": val_loss,
            "chi2_mean": report.chi2_mean,
            "wasserstein_mean": report.wasserstein_mean,
            "correlation_distance": report.correlation_distance,
            "nfe_mean": nfe,
        }


def _monitor_value(entry: dict, monitor: str) -> float | None:
    key = "val_loss" if monitor == "loss" else monitor
    value = entry.get(key)
    if value is None and monitor == "chi2_mean":
        value = entry.get("wasserstein_mean")  # degenerate support: chi2 undefined
    return value


def train(data: FeatureMatrix, config: TrainConfig, net_config: NetConfig, stats: PreprocessStats, *,
          resume: CheckpointRecord | None = None, best: CheckpointRecord | None = None,
          on_epoch: Callable[[dict, CheckpointRecord, CheckpointRecord], None] | None = None) -> TrainResult:
    """Optimize the flow matching loss and keep the best checkpoint under ``config.checkpoint_monitor``.

    ``data`` is standardized; for the conditional variant it must be a
    paired matrix (truth columns, then detector columns). ``on_epoch`` is
    called after every epoch with the log entry, the latest state and the
    best record so far.
    """
    if data.space != "standardized":
        raise ConfigError("training data must be standardized")
    if net_config.conditional:
        if not data.paired:
            raise ConfigError("conditional training needs paired truth/detector data")
        truth, detector = data.split_pairs()
        x1, cond = truth.values, detector.values
    else:
        if data.paired:
            raise ConfigError("unconditional training takes plain (unpaired) data")
        x1, cond = data.values, None
    if x1.shape[1] != net_config.dim:
        raise ShapeError(f"data has {x1.shape[1]} features, network expects {net_config.dim}")
    if config.validation_subset > x1.shape[0]:
        log.info("validation subset %d exceeds dataset size %d; using all events",
                 config.validation_subset, x1.shape[0])

    cfg_dict = config.to_dict()
    if resume is not None:
        net = resume.net.copy()
        opt = AdamW(net.params, state=resume.optimizer)
        sched = PlateauScheduler(**resume.scheduler)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        net = init_params(net_config, config.seed)
        opt = AdamW(net.params)
        sched = PlateauScheduler(config.learning_rate, config.lr_decay_factor, config.lr_patience_epochs,
                                 config.lr_floor, config.lr_threshold)
        rng = np.random.default_rng([config.seed, 0])
        start_epoch = 0

    def snapshot(epoch: int, value, with_state: bool) -> CheckpointRecord:
        rec = CheckpointRecord(
            net=net.copy(), stats=stats, train_config=cfg_dict, epoch=epoch,
            monitor=config.checkpoint_monitor, monitor_value=value, rng_digest=rng_digest(rng),
        )
        if with_state:
            rec.optimizer = {"step": opt.step_count, "m": {k: v.copy() for k, v in opt.m.items()},
                             "v": {k: v.copy() for k, v in opt.v.items()}}
            rec.scheduler = sched.state()
            rec.rng_state = rng.bit_generator.state
        return rec

    if best is None:
        best = snapshot(start_epoch, None, with_state=False)
    last = snapshot(start_epoch, best.monitor_value, with_state=True)
    last.best_epoch, last.best_value = best.epoch, best.monitor_value

    validation = _Validation(x1, cond, stats, config, net_config.dim) if config.max_epochs > start_epoch else None
    history: list[dict] = []
    n = x1.shape[0]
    for epoch in range(start_epoch + 1, config.max_epochs + 1):
        t_start = time.perf_counter()
        lr = sched.lr
        perm = rng.permutation(n)
        loss_sum = 0.0
        for b, s in enumerate(range(0, n, config.batch_size)):
            batch = sample_cfm_batch(x1, config.batch_size, rng, cond, idx=perm[s:s + config.batch_size])
            loss, grads = cfm_loss_and_grad(net, batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            opt.step(net.params, grads, lr, config.weight_decay)
            loss_sum += loss * batch.x1.shape[0]
        entry = {"epoch": epoch, "train_loss": loss_sum / n}
        entry.update(validation.run(net))
        if not math.isfinite(entry["val_loss"]):
            raise TrainingDivergedError(epoch, -1, entry["val_loss"])
        sched.step(entry["val_loss"])
        entry["lr"] = lr
        entry["seconds"] = time.perf_counter() - t_start
        entry = {k: entry[k] for k in EPOCH_KEYS}
        history.append(entry)

        value = _monitor_value(entry, config.checkpoint_monitor)
        if value is not None and (best.monitor_value is None or value < best.monitor_value):
            best = snapshot(epoch, value, with_state=False)
        last = snapshot(epoch, value, with_state=True)
        last.best_epoch, last.best_value = best.epoch, best.monitor_value
        log.info("epoch %d loss %.5g val %.5g chi2 %s W1 %.4g nfe %.1f lr %.2g",
                 epoch, entry["train_loss"], entry["val_loss"], entry["chi2_mean"],
                 entry["wasserstein_mean"], entry["nfe_mean"], lr)
        if on_epoch is not None:
            on_epoch(entry, last, best)
    return TrainResult(best=best, last=last, log=history)
