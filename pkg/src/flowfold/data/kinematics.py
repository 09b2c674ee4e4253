"""Exclusive gamma p -> rho0 p -> pi+ pi- p kinematics.

Four-vectors are (E, px, py, pz) in GeV with metric (+, -, -, -); every
function is vectorized over a leading event axis.

The 24-column event record is laid out as photon, target proton, recoil
proton, pi+, pi- (four columns each) followed by t, M(pi pi), cos(theta)
and phi. The 10-column feature vector keeps
(photon px, pz), (target px, pz), (pi+ px, py, pz), (pi- px, py, pz).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EventValidationError, KinematicsError

M_PI = 0.13957
M_P = 0.93827
M_RHO = 0.775
GAMMA_RHO = 0.149

PARTICLES = ("photon", "target", "recoil", "piplus", "piminus")
SLOTS = {name: slice(4 * i, 4 * i + 4) for i, name in enumerate(PARTICLES)}
DERIVED = {"t": 20, "m_pipi": 21, "cos_theta": 22, "phi": 23}
FEATURE_NAMES = (
    "photon_px", "photon_pz", "target_px", "target_pz",
    "piplus_px", "piplus_py", "piplus_pz", "piminus_px", "piminus_py", "piminus_pz",
)
PION_FEATURES = slice(4, 10)
PY_TOLERANCE = 1e-6
MASS_SQ_FLOOR = -1e-9


def minkowski_sq(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p[..., 0] ** 2 - p[..., 1] ** 2 - p[..., 2] ** 2 - p[..., 3] ** 2


def on_shell(momentum: np.ndarray, mass: float) -> np.ndarray:
    """Four-vector with energy rebuilt from a 3-momentum and a mass."""
    momentum = np.asarray(momentum, dtype=np.float64)
    energy = np.sqrt(np.sum(momentum**2, axis=-1) + mass**2)
    return np.concatenate([energy[..., None], momentum], axis=-1)


def boost(p: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Lorentz boost of four-vectors ``p`` by velocity ``beta`` (lab sees frame moving at beta)."""
    p = np.asarray(p, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    b2 = np.sum(beta**2, axis=-1)
    gamma = 1.0 / np.sqrt(1.0 - b2)
    bp = np.sum(beta * p[..., 1:], axis=-1)
    safe_b2 = np.where(b2 > 0, b2, 1.0)
    g2 = np.where(b2 > 0, (gamma - 1.0) / safe_b2, 0.0)
    e = gamma * (p[..., 0] + bp)
    mom = p[..., 1:] + (g2 * bp + gamma * p[..., 0])[..., None] * beta
    return np.concatenate([e[..., None], mom], axis=-1)


def _two_body_momentum(m0, m1, m2):
    arg = (m0**2 - (m1 + m2) ** 2) * (m0**2 - (m1 - m2) ** 2)
    return np.sqrt(np.maximum(arg, 0.0)) / (2.0 * m0)


def _unit(cos_t, phi):
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, 1.0))
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)


@dataclass(frozen=True)
class GeneratorConfig:
    """Toy stand-in for the Monte Carlo photoproduction sample.

    The photon carries a small horizontal divergence and the target a
    small in-plane momentum spread so every feature has nonzero variance;
    both keep p_y identically zero.
    """

    e_gamma_min: float = 8.2
    e_gamma_max: float = 8.8
    photon_divergence: float = 1e-3  # rad
    target_spread: float = 0.02  # GeV
    slope: float = 6.0  # GeV^-2, d(sigma)/dt ~ exp(slope * t)
    t_max_abs: float = 1.0
    m_min: float = 0.4
    m_max: float = 1.2


def generate_events(n: int, seed: int, cfg: GeneratorConfig | None = None) -> np.ndarray:
    """Four-momentum conserving (n, 24) event records."""
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(seed)

    e_gamma = rng.uniform(cfg.e_gamma_min, cfg.e_gamma_max, n)
    theta_x = cfg.photon_divergence * rng.standard_normal(n)
    zeros = np.zeros(n)
    p_gamma = np.stack([e_gamma, e_gamma * np.sin(theta_x), zeros, e_gamma * np.cos(theta_x)], axis=1)
    target_mom = np.stack([cfg.target_spread * rng.standard_normal(n), zeros,
                           cfg.target_spread * rng.standard_normal(n)], axis=1)
    p_target = on_shell(target_mom, M_P)

    # rho line shape: Breit-Wigner truncated to [m_min, m_max] by inverse CDF
    lo = np.arctan(2 * (cfg.m_min - M_RHO) / GAMMA_RHO)
    hi = np.arctan(2 * (cfg.m_max - M_RHO) / GAMMA_RHO)
    m_rho = M_RHO + 0.5 * GAMMA_RHO * np.tan(lo + (hi - lo) * rng.random(n))

    total = p_gamma + p_target
    sqrt_s = np.sqrt(minkowski_sq(total))
    beta_cm = total[:, 1:] / total[:, :1]
    gamma_cm = boost(p_gamma, -beta_cm)
    p_in = np.linalg.norm(gamma_cm[:, 1:], axis=1)
    p_out = _two_body_momentum(sqrt_s, m_rho, M_P)
    e_rho = (sqrt_s**2 + m_rho**2 - M_P**2) / (2 * sqrt_s)

    # t = t0 - 2 p_in p_out (1 - cos), exponential in t between its bounds
    t0 = (gamma_cm[:, 0] - e_rho) ** 2 - (p_in - p_out) ** 2
    t_low = np.maximum(t0 - 4 * p_in * p_out, -cfg.t_max_abs)
    u = rng.random(n)
    t = t0 + np.log(u + (1 - u) * np.exp(cfg.slope * (t_low - t0))) / cfg.slope
    cos_cm = np.clip(1.0 - (t0 - t) / (2 * p_in * p_out), -1.0, 1.0)
    phi_cm = rng.uniform(-np.pi, np.pi, n)

    # production plane measured from the photon direction in the CM frame
    z_axis = gamma_cm[:, 1:] / p_in[:, None]
    x_axis = np.cross(np.array([0.0, 1.0, 0.0]), z_axis)
    x_axis /= np.linalg.norm(x_axis, axis=1, keepdims=True)
    y_axis = np.cross(z_axis, x_axis)
    d = _unit(cos_cm, phi_cm)
    rho_dir = d[:, :1] * x_axis + d[:, 1:2] * y_axis + d[:, 2:] * z_axis
    rho_cm = np.concatenate([e_rho[:, None], p_out[:, None] * rho_dir], axis=1)
    p_rho = boost(rho_cm, beta_cm)

    # decay pi+ pi- with sin^2(theta) angular distribution (accept-reject)
    cos_h = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        c = rng.uniform(-1, 1, todo.size)
        keep = rng.random(todo.size) < 1.0 - c**2
        cos_h[todo[keep]] = c[keep]
        todo = todo[~keep]
    phi_h = rng.uniform(-np.pi, np.pi, n)
    q = _two_body_momentum(m_rho, M_PI, M_PI)
    pip_rest = on_shell(q[:, None] * _unit(cos_h, phi_h), M_PI)
    pim_rest = pip_rest * np.array([1.0, -1.0, -1.0, -1.0])
    beta_rho = p_rho[:, 1:] / p_rho[:, :1]
    p_pip = boost(pip_rest, beta_rho)
    p_pim = boost(pim_rest, beta_rho)
    p_recoil = total - p_pip - p_pim

    t_val = minkowski_sq(p_gamma - p_pip - p_pim)
    record = np.concatenate(
        [p_gamma, p_target, p_recoil, p_pip, p_pim,
         t_val[:, None], m_rho[:, None], cos_h[:, None], phi_h[:, None]], axis=1)
    return record


def project_24_to_10(events: np.ndarray) -> np.ndarray:
    """Drop the recoil, energies, derived scalars and the zero p_y columns."""
    ev = np.atleast_2d(np.asarray(events, dtype=np.float64))
    if ev.shape[1] != 24:
        raise EventValidationError(f"event record needs 24 columns, got {ev.shape[1]}")
    g, tgt = ev[:, SLOTS["photon"]], ev[:, SLOTS["target"]]
    worst = max(np.abs(g[:, 2]).max(initial=0.0), np.abs(tgt[:, 2]).max(initial=0.0))
    if worst > PY_TOLERANCE:
        raise EventValidationError(f"photon/target p_y must vanish, found |p_y| = {worst:.3g} GeV")
    pip, pim = ev[:, SLOTS["piplus"]], ev[:, SLOTS["piminus"]]
    out = np.concatenate([g[:, [1, 3]], tgt[:, [1, 3]], pip[:, 1:], pim[:, 1:]], axis=1)
    return out[0] if np.ndim(events) == 1 else out


def four_momenta(features: np.ndarray) -> dict[str, np.ndarray]:
    """Rebuild photon, target and pion four-vectors from 10 features."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    zeros = np.zeros(f.shape[0])
    gamma_mom = np.stack([f[:, 0], zeros, f[:, 1]], axis=1)
    target_mom = np.stack([f[:, 2], zeros, f[:, 3]], axis=1)
    return {
        "photon": on_shell(gamma_mom, 0.0),
        "target": on_shell(target_mom, M_P),
        "piplus": on_shell(f[:, 4:7], M_PI),
        "piminus": on_shell(f[:, 7:10], M_PI),
    }


def infer_recoil(p_gamma, p_target, p_piplus, p_piminus) -> np.ndarray:
    """Recoil four-momentum from conservation; no mass-shell constraint."""
    return (np.asarray(p_gamma, dtype=np.float64) + np.asarray(p_target, dtype=np.float64)
            - np.asarray(p_piplus, dtype=np.float64) - np.asarray(p_piminus, dtype=np.float64))


def infer_recoil_from_features(features: np.ndarray) -> np.ndarray:
    p = four_momenta(features)
    return infer_recoil(p["photon"], p["target"], p["piplus"], p["piminus"])


def invariant_mass(p_a, p_b) -> np.ndarray:
    """Invariant mass of a two-particle system; tiny negative m^2 is clamped."""
    m2 = minkowski_sq(np.asarray(p_a, dtype=np.float64) + np.asarray(p_b, dtype=np.float64))
    if np.any(m2 < MASS_SQ_FLOOR):
        raise KinematicsError(f"negative invariant mass squared {np.min(m2)!r} GeV^2")
    return np.sqrt(np.maximum(m2, 0.0))


def pion_pair_mass(features: np.ndarray) -> np.ndarray:
    p = four_momenta(features)
    return invariant_mass(p["piplus"], p["piminus"])


def mandelstam_t(p_gamma, p_rho) -> np.ndarray:
    return minkowski_sq(np.asarray(p_gamma, dtype=np.float64) - np.asarray(p_rho, dtype=np.float64))


def mandelstam_t_from_features(features: np.ndarray) -> np.ndarray:
    p = four_momenta(features)
    return mandelstam_t(p["photon"], p["piplus"] + p["piminus"])


@dataclass(frozen=True)
class SmearConfig:
    sigma_smear: float = 1.0
    k: float = 0.01  # GeV^-1
    seed: int = 0

    def __post_init__(self):
        if self.sigma_smear < 0:
            raise ValueError("sigma_smear must be nonnegative")
        if not self.k > 0:
            raise ValueError("k must be positive")


def smear_events(truth: np.ndarray, cfg: SmearConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Gaussian smearing of every pion momentum component p_i with width k * sigma * p_i^2.

    Photon and target columns are copied untouched. With sigma 0 the
    input is returned bit for bit.
    """
    x = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if x.shape[1] != 10:
        raise EventValidationError(f"smearing needs 10 features, got {x.shape[1]}")
    out = x.copy()
    if cfg.sigma_smear == 0:
        return out if np.ndim(truth) == 2 else out[0]
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pions = x[:, PION_FEATURES]
    width = cfg.k * cfg.sigma_smear * pions**2
    out[:, PION_FEATURES] = pions + width * rng.standard_normal(pions.shape)
    return out if np.ndim(truth) == 2 else out[0]


smear_event = smear_events
