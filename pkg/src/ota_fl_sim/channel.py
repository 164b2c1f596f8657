"""Analog over-the-air aggregation on a Gaussian multiple-access channel.

Clients scale their model update ``theta_k - theta_prev`` by ``sqrt(p_t)``
and transmit simultaneously; the server sees the sum plus white Gaussian
noise and rescales it back into a global model. Under block fading a
client transmits only when its gain magnitude exceeds ``r_hat`` and
pre-inverts its channel so that every contribution arrives as
``r_hat * sqrt(p_t) * delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConfigError, DegenerateUpdateError, NoParticipantsError

__all__ = [
    "ChannelConfig",
    "FadingDraw",
    "ChannelOutput",
    "PRECODING_MODES",
    "compute_precoding_factor",
    "encode",
    "encode_fading",
    "apply_fading",
    "mac_superpose",
    "decode_full",
    "decode_partial",
    "decode_fading",
    "draw_fading",
    "participation_probability",
    "r_hat_for_participation",
    "snr",
    "snr_db",
    "sigma2_from_snr_db",
    "decoded_noise_variance",
]

PRECODING_MODES = ("oracle", "delayed", "unit")


@dataclass(frozen=True)
class ChannelConfig:
    """Uplink parameters.

    ``baseband="complex"`` runs the fading path with explicit complex gains
    and is meant for cross-checking the default real-equivalent simulation.
    """

    P: float = 1.0
    sigma2: float = 0.0
    fading: bool = False
    r_hat: float = 0.0
    precoding_mode: str = "oracle"
    baseband: str = "real"

    def __post_init__(self):
        if not self.P > 0:
            raise ConfigError("transmit power must be > 0", field="channel.P")
        if self.sigma2 < 0:
            raise ConfigError("noise variance must be >= 0", field="channel.sigma2")
        if self.fading and not self.r_hat > 0:
            raise ConfigError("fading requires r_hat > 0", field="channel.r_hat")
        if self.r_hat < 0:
            raise ConfigError("r_hat must be >= 0", field="channel.r_hat")
        if self.precoding_mode not in PRECODING_MODES:
            raise ConfigError(f"must be one of {PRECODING_MODES}", field="channel.precoding")
        if self.baseband not in ("real", "complex"):
            raise ConfigError("must be 'real' or 'complex'", field="channel.baseband")


@dataclass(frozen=True)
class FadingDraw:
    r: float
    omega: float

    @property
    def gain(self) -> complex:
        return self.r * complex(math.cos(self.omega), math.sin(self.omega))


@dataclass(frozen=True)
class ChannelOutput:
    y: np.ndarray
    p_t: float
    participants: tuple
    noise_seed: Optional[int] = None


def compute_precoding_factor(update_norms_sq, q, P) -> float:
    """``P / sum_k q_k ||delta_k||^2``.

    Raises :class:`DegenerateUpdateError` when every update is zero.
    """
    norms = np.asarray(update_norms_sq, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if norms.shape != q.shape:
        raise ValueError("update_norms_sq and q must have the same length")
    if abs(q.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {q.sum()!r}")
    if np.any(norms < 0):
        raise ValueError("squared norms must be non-negative")
    denom = float(q @ norms)
    if not denom > 0:
        raise DegenerateUpdateError("all client updates are zero; precoding factor undefined")
    p = P / denom
    if not math.isfinite(p):
        raise DegenerateUpdateError(f"precoding factor {p!r} is not finite")
    return p


def _delta(theta_k, theta_prev):
    delta = np.asarray(theta_k, dtype=np.float64) - np.asarray(theta_prev, dtype=np.float64)
    if not np.all(np.isfinite(delta)):
        raise ValueError("model update contains non-finite values")
    return delta


def encode(theta_k, theta_prev, p_t) -> np.ndarray:
    if not p_t > 0:
        raise ValueError("p_t must be > 0")
    return math.sqrt(p_t) * _delta(theta_k, theta_prev)


def encode_fading(theta_k, theta_prev, p_t, draw: FadingDraw, r_hat):
    """Channel-inverted complex transmit signal, or ``None`` when ``r <= r_hat``."""
    if not p_t > 0:
        raise ValueError("p_t must be > 0")
    if draw.r <= r_hat:
        return None
    scale = r_hat * math.sqrt(p_t) / draw.r
    return scale * complex(math.cos(draw.omega), -math.sin(draw.omega)) * _delta(theta_k, theta_prev)


def apply_fading(x, draw: FadingDraw):
    """What the receiver sees from one client: ``r * exp(j*omega) * x``."""
    return draw.gain * x


def mac_superpose(inputs: Sequence[np.ndarray], sigma2, rng) -> np.ndarray:
    """Sum the client signals in list order and add ``N(0, sigma2 I)`` noise."""
    if len(inputs) == 0:
        raise ValueError("no channel inputs to superpose")
    y = np.array(inputs[0], dtype=np.result_type(inputs[0], np.float64), copy=True)
    for x in inputs[1:]:
        if np.shape(x) != y.shape:
            raise ValueError("channel inputs must have equal length")
        y += x
    if sigma2 > 0:
        y = y + math.sqrt(sigma2) * np.random.default_rng(rng).standard_normal(y.shape)
    return y


def decode_partial(y, K_hat, p_t, theta_prev) -> np.ndarray:
    if K_hat < 1:
        raise NoParticipantsError("cannot decode with no participants")
    if not p_t > 0:
        raise ValueError("p_t must be > 0")
    return np.asarray(y) / (K_hat * math.sqrt(p_t)) + np.asarray(theta_prev, dtype=np.float64)


def decode_full(y, K, p_t, theta_prev) -> np.ndarray:
    return decode_partial(y, K, p_t, theta_prev)


def decode_fading(y, r_hat, k_count, p_t, theta_prev) -> np.ndarray:
    if k_count < 1:
        raise NoParticipantsError("no client cleared the fading threshold")
    if not r_hat > 0:
        raise ValueError("r_hat must be > 0")
    return decode_partial(np.asarray(y) / r_hat, k_count, p_t, theta_prev)


def decoded_noise_variance(sigma2, n_participants, p_t, r_hat=1.0) -> float:
    """Per-coordinate variance of the aggregation noise after decoding."""
    return sigma2 / (r_hat ** 2 * n_participants ** 2 * p_t)


def draw_fading(K, rng) -> list:
    """Rayleigh magnitudes with ``E[r^2] = 1`` and uniform phases, one per client."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(rng)
    r = rng.rayleigh(scale=math.sqrt(0.5), size=K)
    omega = rng.uniform(0.0, 2.0 * math.pi, size=K)
    return [FadingDraw(float(a), float(b)) for a, b in zip(r, omega)]


def participation_probability(r_hat) -> float:
    """``P(r > r_hat) = exp(-r_hat^2)`` for unit mean-square Rayleigh fading."""
    return math.exp(-r_hat * r_hat)


def r_hat_for_participation(fraction) -> float:
    """Threshold at which each client clears ``r_hat`` with probability ``fraction``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    return math.sqrt(-math.log(fraction))


def snr(P, d, sigma2) -> float:
    """``P / (d * sigma2)``; ``inf`` for a noiseless channel."""
    if sigma2 == 0:
        return math.inf
    return P / (d * sigma2)


def snr_db(P, d, sigma2) -> float:
    tau = snr(P, d, sigma2)
    return math.inf if math.isinf(tau) else 10.0 * math.log10(tau)


def sigma2_from_snr_db(snr_db_value, P, d) -> float:
    return P / (d * 10.0 ** (snr_db_value / 10.0))
