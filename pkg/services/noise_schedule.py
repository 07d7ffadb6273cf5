# services/noise_schedule.py

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from services.errors import DomainError, InvalidSteps

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_SIGMA_MAX = 1e8
HALF_PI = np.pi / 2


class ScheduleKind(str, Enum):
    LOG_LINEAR = "log_linear"
    COSINE = "cosine"
    COSINE_SQUARED = "cosine_squared"
    LINEAR = "linear"


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha(t) = exp(-sigma(t)), decreasing from ~1 at t=0 to ~0 at t=1."""

    kind: ScheduleKind = ScheduleKind.LOG_LINEAR
    sigma_max: float = DEFAULT_SIGMA_MAX
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.sigma_max <= 0:
            raise DomainError(f"sigma_max must be positive, got {self.sigma_max}")
        if not 0 < self.eps < 0.5:
            raise DomainError(f"eps must lie in (0, 0.5), got {self.eps}")


ALL_KINDS = tuple(ScheduleKind)


def clamp(t, s: NoiseSchedule):
    return np.clip(t, s.eps, 1.0 - s.eps)


def sigma(t, s: NoiseSchedule):
    t = clamp(t, s)
    if s.kind is ScheduleKind.LOG_LINEAR:
        return -np.log1p(-t)
    if s.kind is ScheduleKind.LINEAR:
        return s.sigma_max * t
    if s.kind is ScheduleKind.COSINE:
        return -np.log(np.cos(HALF_PI * t))
    return -2.0 * np.log(np.cos(HALF_PI * t))


def sigma_prime(t, s: NoiseSchedule):
    """d sigma / dt, equal to -alpha'(t) / alpha(t)."""
    t = clamp(t, s)
    if s.kind is ScheduleKind.LOG_LINEAR:
        return 1.0 / (1.0 - t)
    if s.kind is ScheduleKind.LINEAR:
        return np.full_like(np.asarray(t, dtype=np.float64), s.sigma_max)
    if s.kind is ScheduleKind.COSINE:
        return HALF_PI * np.tan(HALF_PI * t)
    return np.pi * np.tan(HALF_PI * t)


def alpha(t, s: NoiseSchedule):
    t = clamp(t, s)
    if s.kind is ScheduleKind.LOG_LINEAR:
        return 1.0 - t
    if s.kind is ScheduleKind.LINEAR:
        return np.exp(-s.sigma_max * t)
    if s.kind is ScheduleKind.COSINE:
        return np.cos(HALF_PI * t)
    return np.cos(HALF_PI * t) ** 2


def alpha_prime(t, s: NoiseSchedule):
    t = clamp(t, s)
    if s.kind is ScheduleKind.LOG_LINEAR:
        return -np.ones_like(np.asarray(t, dtype=np.float64))
    if s.kind is ScheduleKind.LINEAR:
        return -s.sigma_max * np.exp(-s.sigma_max * t)
    if s.kind is ScheduleKind.COSINE:
        return -HALF_PI * np.sin(HALF_PI * t)
    return -HALF_PI * np.sin(np.pi * t)


def nelbo_weight(t, s: NoiseSchedule):
    """alpha'(t) / (1 - alpha(t)); negative on the clamped domain."""
    return alpha_prime(t, s) / (1.0 - alpha(t, s))


def t_of_alpha(a, s: NoiseSchedule):
    """Inverse of alpha, clamped to [eps, 1 - eps]."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    if s.kind is ScheduleKind.LOG_LINEAR:
        t = 1.0 - a
    elif s.kind is ScheduleKind.LINEAR:
        with np.errstate(divide="ignore"):
            t = -np.log(a) / s.sigma_max
    elif s.kind is ScheduleKind.COSINE:
        t = np.arccos(a) / HALF_PI
    else:
        t = np.arccos(np.sqrt(a)) / HALF_PI
    return clamp(t, s)


# ---- gamma = log(1 - alpha) ----

def gamma_of_t(t, s: NoiseSchedule):
    if s.kind is ScheduleKind.LOG_LINEAR:
        return np.log(clamp(t, s))
    with np.errstate(divide="ignore"):
        return np.log(-np.expm1(-sigma(t, s)))


def gamma_range(s: NoiseSchedule) -> tuple[float, float]:
    return float(gamma_of_t(s.eps, s)), float(gamma_of_t(1.0 - s.eps, s))


def time_at_gamma(g, s: NoiseSchedule):
    """Lenient inverse of gamma_of_t; out-of-range gamma is clamped in t."""
    return t_of_alpha(-np.expm1(np.minimum(g, 0.0)), s)


def t_of_gamma(g, s: NoiseSchedule):
    lo, hi = gamma_range(s)
    g_arr = np.asarray(g, dtype=np.float64)
    slack = 1e-12 * np.maximum(1.0, np.abs(g_arr))
    if np.any(g_arr < lo - slack) or np.any(g_arr > hi + slack):
        raise DomainError(f"gamma outside [{lo:.6g}, {hi:.6g}] for {s.kind.value}")
    return time_at_gamma(g_arr, s)


def gamma_rate(g, s: NoiseSchedule):
    """d gamma / dt written as a function of gamma."""
    g = np.asarray(g, dtype=np.float64)
    one_minus_a = np.exp(g)
    a = -np.expm1(g)
    if s.kind is ScheduleKind.LOG_LINEAR:
        return np.exp(-g)
    if s.kind is ScheduleKind.LINEAR:
        return s.sigma_max * a / one_minus_a
    if s.kind is ScheduleKind.COSINE:
        return HALF_PI * np.sqrt(np.clip(1.0 - a * a, 0.0, None)) / one_minus_a
    return np.pi * np.sqrt(np.clip(a * one_minus_a, 0.0, None)) / one_minus_a


def quadrature_gamma_min(s: NoiseSchedule) -> float:
    """Lower end of the gamma window used by quadrature."""
    lo, _ = gamma_range(s)
    return float(min(lo, np.log(s.eps)))


# ---- grids ----

def discrete_alpha_grid(T: int) -> np.ndarray:
    """alpha_{t(i)} = 1 - (i+1)/(T+1) for i = 0..T."""
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise InvalidSteps(f"T must be a positive integer, got {T}")
    T = int(T)
    return 1.0 - (np.arange(T + 1) + 1.0) / (T + 1.0)


def discrete_time_grid(T: int, s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """alpha grid and the matching denoiser evaluation times."""
    alphas = discrete_alpha_grid(T)
    return alphas, t_of_alpha(alphas, s)


def sampling_grid(T: int, s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Times t_k = 1 - k/T with alpha pinned to 0 at the start and 1 at the end."""
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise InvalidSteps(f"T must be a positive integer, got {T}")
    T = int(T)
    times = 1.0 - np.arange(T + 1) / T
    alphas = np.asarray(alpha(times, s), dtype=np.float64).copy()
    alphas[0] = 0.0
    alphas[-1] = 1.0
    return alphas, clamp(times, s)
