"""Time-conditional residual MLP velocity field, optionally conditioned on a
detector-level event.

Layout of a forward pass::

    e_t = Linear(fourier(t))                      # time embedding
    e_c = SiLU(Linear(SiLU(Linear(c))))           # conditional variant only
    h   = SiLU(Linear([x_t, e_t, e_c]))
    h   = SiLU(Linear(SiLU(Linear(h)))) + h       # repeated ``blocks`` times
    v   = Linear(h)

Weights are stored as (out, in) matrices in a flat name -> array dict so
the optimizer, checkpoint writer and gradient checks can treat them
uniformly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ModeError, ShapeError, StateError

T_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TimeEmbedConfig:
    n_frequencies: int = 32
    omega_min: float = 1.0
    omega_max: float = 64.0
    projected_dim: int = 64

    def frequencies(self) -> np.ndarray:
        k = np.arange(self.n_frequencies, dtype=np.float64)
        if self.n_frequencies == 1:
            return np.array([self.omega_min])
        ratio = self.omega_max / self.omega_min
        return self.omega_min * ratio ** (k / (self.n_frequencies - 1))


@dataclass(frozen=True)
class NetConfig:
    dim: int
    hidden: int = 512
    blocks: int = 5
    conditional: bool = False
    cond_embed_dim: int = 128
    time: TimeEmbedConfig = field(default_factory=TimeEmbedConfig)

    @property
    def mode(self) -> str:
        return "unfold" if self.conditional else "generate"

    @property
    def input_width(self) -> int:
        width = self.dim + self.time.projected_dim
        if self.conditional:
            width += self.cond_embed_dim
        return width

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every parameter tensor, in a fixed order."""
        t = self.time
        shapes: dict[str, tuple[int, ...]] = {
            "time.w": (t.projected_dim, 2 * t.n_frequencies),
            "time.b": (t.projected_dim,),
        }
        if self.conditional:
            e = self.cond_embed_dim
            shapes.update({"cond.w1": (e, self.dim), "cond.b1": (e,), "cond.w2": (e, e), "cond.b2": (e,)})
        shapes.update({"input.w": (self.hidden, self.input_width), "input.b": (self.hidden,)})
        for i in range(self.blocks):
            shapes.update({
                f"block{i}.w1": (self.hidden, self.hidden),
                f"block{i}.b1": (self.hidden,),
                f"block{i}.w2": (self.hidden, self.hidden),
                f"block{i}.b2": (self.hidden,),
            })
        shapes.update({"output.w": (self.dim, self.hidden), "output.b": (self.dim,)})
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.layer_shapes().values()))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["time"] = TimeEmbedConfig(**d.get("time", {}))
        return cls(**d)


def fourier_features(t, cfg: TimeEmbedConfig) -> np.ndarray:
    """Raw [sin(w_k t) ..., cos(w_k t) ...] features, one row per time value."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < -T_TOLERANCE) or np.any(t > 1.0 + T_TOLERANCE):
        raise ValueError(f"time outside [0, 1]: min {t.min()!r}, max {t.max()!r}")
    t = np.clip(t, 0.0, 1.0)
    arg = t[:, None] * cfg.frequencies()[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class VelocityNet:
    """Parameters plus forward/backward for the fixed architecture."""

    def __init__(self, config: NetConfig, params: dict[str, np.ndarray]):
        shapes = config.layer_shapes()
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.params = {name: params[name] for name in shapes}

    @property
    def dtype(self):
        return self.params["input.w"].dtype

    def astype(self, dtype) -> "VelocityNet":
        return VelocityNet(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "VelocityNet":
        return VelocityNet(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- embeddings -------------------------------------------------------

    def embed_time(self, t) -> np.ndarray:
        raw = fourier_features(t, self.config.time).astype(self.dtype)
        return nx.linear_forward(self.params["time.w"], self.params["time.b"], raw)

    def embed_condition(self, c: np.ndarray) -> np.ndarray:
        if not self.config.conditional:
            raise ModeError("condition embedding requested from an unconditional network")
        p = self.params
        c = np.asarray(c, dtype=self.dtype)
        h = nx.silu(nx.linear_forward(p["cond.w1"], p["cond.b1"], c))
        return nx.silu(nx.linear_forward(p["cond.w2"], p["cond.b2"], h))

    # -- forward / backward -----------------------------------------------

    def forward(self, x, t, c=None, *, cond_embedding=None, cache: bool = False):
        """Velocity at state ``x`` and time ``t`` (scalar or one per row).

        ``cond_embedding`` lets callers that hold ``c`` fixed (the ODE
        integrator) embed it once. With ``cache=True`` returns
        ``(v, cache)`` for :meth:`backward`.
        """
        cfg, p = self.config, self.params
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != cfg.dim:
            raise ShapeError(f"state must be (batch, {cfg.dim}), got {x.shape}")
        n = x.shape[0]
        if cfg.conditional and c is None and cond_embedding is None:
            raise ModeError("conditional network called without a condition")
        if not cfg.conditional and (c is not None or cond_embedding is not None):
            raise ModeError("unconditional network called with a condition")

        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            # one shared time: embed once, broadcast over the batch
            raw_t = fourier_features(t_arr, cfg.time).astype(self.dtype)
            e_t = nx.linear_forward(p["time.w"], p["time.b"], raw_t)
            raw_t = np.broadcast_to(raw_t, (n, raw_t.shape[1]))
            e_t = np.broadcast_to(e_t, (n, e_t.shape[1]))
        else:
            if t_arr.shape[0] != n:
                raise ShapeError(f"{t_arr.shape[0]} times for {n} states")
            raw_t = fourier_features(t_arr.reshape(-1), cfg.time).astype(self.dtype)
            e_t = nx.linear_forward(p["time.w"], p["time.b"], raw_t)

        parts = [x, e_t]
        cond = {}
        if cfg.conditional:
            if cond_embedding is None:
                c = np.asarray(c, dtype=self.dtype)
                if c.shape != (n, cfg.dim):
                    raise ShapeError(f"condition must be ({n}, {cfg.dim}), got {c.shape}")
                z1 = nx.linear_forward(p["cond.w1"], p["cond.b1"], c)
                s1 = nx.sigmoid(z1)
                a1 = z1 * s1
                z2 = nx.linear_forward(p["cond.w2"], p["cond.b2"], a1)
                s2 = nx.sigmoid(z2)
                cond_embedding = z2 * s2
                cond = {"c": c, "z1": z1, "s1": s1, "a1": a1, "z2": z2, "s2": s2}
            elif cache:
                raise StateError("cannot cache activations through a precomputed condition embedding")
            parts.append(np.broadcast_to(cond_embedding, (n, cfg.cond_embed_dim)))
        inp = np.concatenate(parts, axis=1)

        z0 = nx.linear_forward(p["input.w"], p["input.b"], inp)
        s0 = nx.sigmoid(z0)
        h = z0 * s0
        blocks = []
        for i in range(cfg.blocks):
            za = nx.linear_forward(p[f"block{i}.w1"], p[f"block{i}.b1"], h)
            sa = nx.sigmoid(za)
            aa = za * sa
            zb = nx.linear_forward(p[f"block{i}.w2"], p[f"block{i}.b2"], aa)
            sb = nx.sigmoid(zb)
            if cache:
                blocks.append((h, za, sa, aa, zb, sb))
            h = zb * sb + h
        v = nx.linear_forward(p["output.w"], p["output.b"], h)
        if not cache:
            return v
        return v, {
            "raw_t": raw_t, "inp": inp, "z0": z0, "s0": s0,
            "blocks": blocks, "h_last": h, "cond": cond,
        }

    def backward(self, cache: dict | None, grad_v: np.ndarray) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of a scalar loss given dL/dv."""
        if cache is None:
            raise StateError("backward called without cached forward activations")
        cfg, p = self.config, self.params
        g: dict[str, np.ndarray] = {}

        dh, g["output.w"], g["output.b"] = nx.linear_backward(p["output.w"], cache["h_last"], grad_v)
        for i in reversed(range(cfg.blocks)):
            h_in, za, sa, aa, zb, sb = cache["blocks"][i]
            dzb = nx.silu_backward(zb, sb, dh)
            daa, g[f"block{i}.w2"], g[f"block{i}.b2"] = nx.linear_backward(p[f"block{i}.w2"], aa, dzb)
            dza = nx.silu_backward(za, sa, daa)
            dh_inner, g[f"block{i}.w1"], g[f"block{i}.b1"] = nx.linear_backward(p[f"block{i}.w1"], h_in, dza)
            dh = dh + dh_inner

        dz0 = nx.silu_backward(cache["z0"], cache["s0"], dh)
        dinp, g["input.w"], g["input.b"] = nx.linear_backward(p["input.w"], cache["inp"], dz0)

        td = cfg.time.projected_dim
        de_t = dinp[:, cfg.dim:cfg.dim + td]
        _, g["time.w"], g["time.b"] = nx.linear_backward(
            p["time.w"], cache["raw_t"], np.ascontiguousarray(de_t), need_input_grad=False
        )
        if cfg.conditional:
            cc = cache["cond"]
            de_c = np.ascontiguousarray(dinp[:, cfg.dim + td:])
            dz2 = nx.silu_backward(cc["z2"], cc["s2"], de_c)
            da1, g["cond.w2"], g["cond.b2"] = nx.linear_backward(p["cond.w2"], cc["a1"], dz2)
            dz1 = nx.silu_backward(cc["z1"], cc["s1"], da1)
            _, g["cond.w1"], g["cond.b1"] = nx.linear_backward(p["cond.w1"], cc["c"], dz1, need_input_grad=False)
        return {name: g[name] for name in p}


def init_params(config: NetConfig, seed: int, dtype=np.float32) -> VelocityNet:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero output head.

    The zero head makes the untrained flow the identity map on the prior.
    """
    rng = np.random.default_rng(seed)
    params = {}
    shapes = config.layer_shapes()
    for name, shape in shapes.items():
        if name.startswith("output."):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shapes[name.replace(".b", ".w")][1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return VelocityNet(config, params)

