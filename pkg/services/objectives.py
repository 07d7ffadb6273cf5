# services/objectives.py

import logging
import math
from enum import Enum
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from pydantic import BaseModel, Field, field_validator, model_validator

from services.categorical import Vocabulary, as_token_seq, make_rng
from services.denoiser import Denoiser
from services.errors import DomainError, InvalidSteps, TooLarge
from services.forward_process import all_mask_patterns, pattern_probabilities, sample_masked_latent
from services.noise_schedule import (
    NoiseSchedule,
    alpha,
    clamp,
    discrete_time_grid,
    gamma_range,
    gamma_rate,
    nelbo_weight,
    quadrature_gamma_min,
    t_of_alpha,
    time_at_gamma,
)

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_STATES = 4096
EXHAUSTIVE_MAX_T = 1024
DEFAULT_NODES = 64


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

class ObjectiveKind(str, Enum):
    D3PM_FULL = "d3pm_full"
    RB2 = "rb2"
    RB2_RB1 = "rb2_rb1_discrete"
    CONTINUOUS = "continuous"


class ObjectiveVariant(BaseModel):
    kind: ObjectiveKind = ObjectiveKind.CONTINUOUS
    T: Optional[int] = Field(None, description="Number of steps; discrete kinds only")

    @model_validator(mode="after")
    def _steps_for_discrete(self):
        if self.kind is not ObjectiveKind.CONTINUOUS and (self.T is None or self.T < 1):
            raise InvalidSteps(f"{self.kind.value} needs T >= 1")
        return self

    @property
    def is_discrete(self) -> bool:
        return self.kind is not ObjectiveKind.CONTINUOUS


class NelboEstimate(BaseModel):
    value: float = Field(..., description="nats per sequence")
    per_datapoint_variance: float = Field(0.0, ge=0.0)
    n_samples: int = 0
    std_error: float = 0.0
    estimator: str = "quadrature"

    @field_validator("value")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError(f"NELBO estimate is not finite: {v}")
        return v


def _check_exhaustive(vocab: Vocabulary, L: int, T: int | None = None) -> None:
    if vocab.K ** L > EXHAUSTIVE_MAX_STATES:
        raise TooLarge(f"K^L = {vocab.K}^{L} exceeds {EXHAUSTIVE_MAX_STATES}; use mc mode")
    if T is not None and T > EXHAUSTIVE_MAX_T:
        raise TooLarge(f"T = {T} exceeds {EXHAUSTIVE_MAX_T}; use mc mode")


# ---------------------------------------------------------------------------
# KL terms
# ---------------------------------------------------------------------------

def _kl_masked(lx, lm, alpha_s: float, alpha_t: float):
    """Two-term KL at a masked position, from log x_theta(x) and log x_theta(mask)."""
    lx = np.asarray(lx, dtype=np.float64)
    pm = np.exp(np.asarray(lm, dtype=np.float64))
    q_x = (alpha_s - alpha_t) / (1.0 - alpha_t)
    q_m = (1.0 - alpha_s) / (1.0 - alpha_t)
    with np.errstate(divide="ignore", invalid="ignore"):
        num_t = np.log(alpha_t * pm + (1.0 - alpha_t))
        first = q_x * (num_t - np.log(1.0 - alpha_t) - lx)
        second = q_m * ((np.log(1.0 - alpha_s) - np.log(alpha_s * pm + (1.0 - alpha_s)))
                        + (num_t - np.log(1.0 - alpha_t)))
    first = np.where(q_x > 0, first, 0.0)
    second = np.where(q_m > 0, second, 0.0)
    return first + second


def kl_term_unsimplified(xout: np.ndarray, x: int, z_t: int, alpha_s: float, alpha_t: float,
                         vocab: Vocabulary) -> float:
    """KL(q(z_s|z_t,x) || p_theta(z_s|z_t)) at one position; xout may carry mask mass."""
    if alpha_s <= alpha_t:
        raise DomainError(f"need alpha_s > alpha_t, got {alpha_s} <= {alpha_t}")
    if z_t != vocab.mask_index:
        return 0.0
    value = float(_kl_masked(xout[x], xout[vocab.mask_index], alpha_s, alpha_t))
    if math.isinf(value):
        logger.warning(f"[Objectives] x_theta gives zero mass to x={x}; KL term is +inf")
    return value


# ---------------------------------------------------------------------------
# Discrete-time NELBO ladder
# ---------------------------------------------------------------------------

def _position_logprobs(x: np.ndarray, z: np.ndarray, denoiser: Denoiser, t: float):
    out = denoiser.predict(z, t)
    rows = np.arange(len(x))
    return out[rows, x], out[:, denoiser.vocab.mask_index]


def _pattern_logprobs(x: np.ndarray, patterns: np.ndarray, denoiser: Denoiser, t: float):
    lx = np.empty(patterns.shape)
    lm = np.empty(patterns.shape)
    for r, pattern in enumerate(patterns):
        z = np.where(pattern, denoiser.vocab.mask_index, x)
        lx[r], lm[r] = _position_logprobs(x, z, denoiser, t)
    return lx, lm


def _term(kind: ObjectiveKind, lx, lm, masked, alpha_s: float, alpha_t: float):
    """Per-step diffusion term summed over positions; leading axes are latents."""
    coeff = (alpha_t - alpha_s) / (1.0 - alpha_t)
    if kind is ObjectiveKind.D3PM_FULL:
        return np.where(masked, _kl_masked(lx, lm, alpha_s, alpha_t), 0.0).sum(axis=-1)
    if kind is ObjectiveKind.RB2:
        return np.where(masked, coeff * lx, 0.0).sum(axis=-1)
    return (coeff * lx).sum(axis=-1)


def _expect(weights: np.ndarray, values: np.ndarray) -> float:
    return float(np.where(weights > 0, weights * values, 0.0).sum())


def prior_loss(x_seq, T: int | float) -> float:
    """Both the forward marginal at t(T) and p_theta(z_{t(T)}) are the all-mask point mass."""
    return 0.0


def reconstruction_loss(x_seq, denoiser: Denoiser, T: int | float, sched: NoiseSchedule,
                        rng: np.random.Generator | None = None, exhaustive: bool = False) -> float:
    """-log p_theta(x | z_{t(0)}) with z_{t(0)} ~ Cat(T/(T+1) x + 1/(T+1) m)."""
    if T is None or math.isinf(T):
        return 0.0
    x = as_token_seq(x_seq, denoiser.vocab, kind="data")
    alpha_0 = T / (T + 1.0)
    t0 = float(t_of_alpha(alpha_0, sched))
    if exhaustive:
        _check_exhaustive(denoiser.vocab, len(x))
        patterns = all_mask_patterns(len(x))
        lx, _ = _pattern_logprobs(x, patterns, denoiser, t0)
        probs = pattern_probabilities(patterns, 1.0 - alpha_0)[0]
        return _expect(probs, -lx.sum(axis=1))
    if rng is None:
        raise DomainError("Monte-Carlo reconstruction needs an rng")
    z = sample_masked_latent(x, alpha_0, denoiser.vocab, rng)
    lx, _ = _position_logprobs(x, z, denoiser, t0)
    return float(-lx.sum())


def diffusion_loss_discrete(variant: ObjectiveVariant, x_seq, denoiser: Denoiser,
                            sched: NoiseSchedule, rng: np.random.Generator | None = None,
                            exhaustive: bool = False) -> float:
    """Discrete-time NELBO: diffusion terms over the alpha grid plus reconstruction."""
    if not variant.is_discrete:
        raise DomainError("diffusion_loss_discrete takes a discrete objective variant")
    x = as_token_seq(x_seq, denoiser.vocab, kind="data")
    T = variant.T
    alphas, times = discrete_time_grid(T, sched)
    mask = denoiser.vocab.mask_index

    if exhaustive:
        _check_exhaustive(denoiser.vocab, len(x), T)
        patterns = all_mask_patterns(len(x))
        mask_probs = pattern_probabilities(patterns, 1.0 - alphas)
        shared = None if denoiser.time_conditioned else _pattern_logprobs(x, patterns, denoiser, None)
        total = 0.0
        for i in range(1, T + 1):
            lx, lm = shared or _pattern_logprobs(x, patterns, denoiser, float(times[i]))
            terms = _term(variant.kind, lx, lm, patterns, alphas[i - 1], alphas[i])
            total += _expect(mask_probs[i], terms)
        return total + reconstruction_loss(x, denoiser, T, sched, exhaustive=True)

    if rng is None:
        raise DomainError("Monte-Carlo mode needs an rng")
    i = int(rng.integers(1, T + 1))
    z = sample_masked_latent(x, alphas[i], denoiser.vocab, rng)
    lx, lm = _position_logprobs(x, z, denoiser, float(times[i]))
    term = float(_term(variant.kind, lx, lm, z == mask, alphas[i - 1], alphas[i]))
    return T * term + reconstruction_loss(x, denoiser, T, sched, rng=rng)


# ---------------------------------------------------------------------------
# Continuous-time NELBO
# ---------------------------------------------------------------------------

def low_discrepancy_times(N: int, rng: np.random.Generator, eps: float = 1e-5) -> np.ndarray:
    """One uniform draw per stratum [(i-1)/N, i/N), shuffled, then clamped."""
    if N < 1:
        raise InvalidSteps(f"N must be >= 1, got {N}")
    t = (np.arange(N) + rng.random(N)) / N
    return np.clip(rng.permutation(t), eps, 1.0 - eps)


def sample_times(n: int, rng: np.random.Generator, sched: NoiseSchedule, sampler: str) -> np.ndarray:
    if sampler == "low_discrepancy":
        return low_discrepancy_times(n, rng, sched.eps)
    if sampler == "uniform":
        return clamp(rng.random(n), sched)
    raise DomainError(f"unknown time sampler {sampler!r}")


def _single_sample(x: np.ndarray, denoiser: Denoiser, sched: NoiseSchedule, t: float,
                   rng: np.random.Generator) -> float:
    z = sample_masked_latent(x, float(alpha(t, sched)), denoiser.vocab, rng)
    lx, _ = _position_logprobs(x, z, denoiser, t)
    return float(nelbo_weight(t, sched) * lx.sum())


def nelbo_mc(x_seq, denoiser: Denoiser, sched: NoiseSchedule, n: int, rng: np.random.Generator,
             sampler: str = "low_discrepancy") -> NelboEstimate:
    """n one-sample estimates, one t and one z_t each."""
    x = as_token_seq(x_seq, denoiser.vocab, kind="data")
    times = sample_times(n, rng, sched, sampler)
    values = np.array([_single_sample(x, denoiser, sched, float(t), rng) for t in times])
    var = float(values.var(ddof=1)) if n > 1 else 0.0
    return NelboEstimate(value=float(values.mean()), per_datapoint_variance=var, n_samples=n,
                         std_error=math.sqrt(var / n), estimator=f"mc:{sampler}")


def nelbo_batch_mc(batch_x: np.ndarray, denoiser: Denoiser, sched: NoiseSchedule,
                   rng: np.random.Generator, sampler: str = "low_discrepancy") -> float:
    """Batch mean of one-sample estimates with times shared out by the sampler."""
    batch_x = np.asarray(batch_x, dtype=np.int64)
    times = sample_times(batch_x.shape[0], rng, sched, sampler)
    return float(np.mean([_single_sample(x, denoiser, sched, float(t), rng)
                          for x, t in zip(batch_x, times)]))


def _gl_nodes(lo: float, hi: float, n_nodes: int):
    nodes, weights = leggauss(n_nodes)
    half = 0.5 * (hi - lo)
    return half * nodes + 0.5 * (hi + lo), half * weights


def _moments_at(x, patterns, denoiser, sched, gammas, exhaustive_z, rng, shared):
    """E[S] and E[S^2] over mask patterns at each gamma, S = -sum_l log <x_theta^l, x^l>."""
    first = np.empty(len(gammas))
    second = np.empty(len(gammas))
    for k, g in enumerate(gammas):
        p = float(np.exp(g))
        if exhaustive_z:
            lx = shared if shared is not None else _pattern_logprobs(
                x, patterns, denoiser, float(time_at_gamma(g, sched)))[0]
            s = -lx.sum(axis=1)
            w = pattern_probabilities(patterns, p)[0]
            first[k] = _expect(w, s)
            second[k] = _expect(w, s * s)
        else:
            z = sample_masked_latent(x, 1.0 - p, denoiser.vocab, rng)
            lx, _ = _position_logprobs(x, z, denoiser, float(time_at_gamma(g, sched)))
            first[k] = -lx.sum()
            second[k] = first[k] ** 2
    return first, second


def nelbo_quadrature(x_seq, denoiser: Denoiser, sched: NoiseSchedule, n_nodes: int = DEFAULT_NODES,
                     exhaustive_z: bool = True, rng: np.random.Generator | None = None) -> NelboEstimate:
    """Gauss-Legendre in gamma = log(1 - alpha) over [gamma_min, 0].

    Also returns the exact variance of the one-sample MC estimator on the clamped t window.
    """
    x = as_token_seq(x_seq, denoiser.vocab, kind="data")
    if exhaustive_z:
        _check_exhaustive(denoiser.vocab, len(x))
    elif rng is None:
        raise DomainError("sampled patterns need an rng")
    patterns = all_mask_patterns(len(x)) if exhaustive_z else None
    shared = None
    if exhaustive_z and not denoiser.time_conditioned:
        shared = _pattern_logprobs(x, patterns, denoiser, None)[0]

    gammas, weights = _gl_nodes(quadrature_gamma_min(sched), 0.0, n_nodes)
    first, _ = _moments_at(x, patterns, denoiser, sched, gammas, exhaustive_z, rng, shared)
    value = float(weights @ first)

    variance = 0.0
    lo, hi = gamma_range(sched)
    if hi - lo > 1e-12:
        v_gammas, v_weights = _gl_nodes(lo, hi, n_nodes)
        v_first, v_second = _moments_at(x, patterns, denoiser, sched, v_gammas, exhaustive_z, rng, shared)
        mean_x = float(v_weights @ v_first)
        second_x = float(v_weights @ (gamma_rate(v_gammas, sched) * v_second))
        variance = max(second_x - mean_x ** 2, 0.0)
    return NelboEstimate(value=value, per_datapoint_variance=variance, n_samples=n_nodes,
                         std_error=0.0, estimator="quadrature")


def nelbo_continuous(x_seq, denoiser: Denoiser, sched: NoiseSchedule, mode: str = "quadrature",
                     n: int = DEFAULT_NODES, rng: np.random.Generator | None = None,
                     sampler: str = "low_discrepancy", exhaustive_z: bool = True) -> NelboEstimate:
    if mode == "quadrature":
        return nelbo_quadrature(x_seq, denoiser, sched, n_nodes=n, exhaustive_z=exhaustive_z, rng=rng)
    if mode == "mc":
        return nelbo_mc(x_seq, denoiser, sched, n, rng if rng is not None else make_rng(0), sampler)
    raise DomainError(f"unknown estimator mode {mode!r}")


# ---------------------------------------------------------------------------
# Coupled estimates across step counts
# ---------------------------------------------------------------------------

def coupled_nelbo_ladder(x_seq, denoiser: Denoiser, T_list: list[int], rng: np.random.Generator,
                         n_draws: int = 1) -> dict[str, np.ndarray]:
    """Per-draw NELBO estimates for every T in T_list and for continuous time ("inf").

    Each draw fixes one uniform u_l per position; the latent at mask rate p is
    {l : u_l < p}, so all step counts see the same nested mask patterns.
    Requires a time-free denoiser.
    """
    if denoiser.time_conditioned:
        raise DomainError("coupled estimates need a time-free denoiser")
    x = as_token_seq(x_seq, denoiser.vocab, kind="data")
    L = len(x)
    mask = denoiser.vocab.mask_index
    out = {str(T): np.empty(n_draws) for T in T_list}
    out["inf"] = np.empty(n_draws)
    for d in range(n_draws):
        u = rng.random(L)
        order = np.argsort(u, kind="stable")
        sorted_u = u[order]
        s_by_count = np.zeros(L + 1)
        z = x.copy()
        for j in range(1, L + 1):
            z[order[j - 1]] = mask
            lx, _ = _position_logprobs(x, z, denoiser, None)
            s_by_count[j] = -lx.sum()
        edges = np.append(sorted_u, 1.0)
        out["inf"][d] = float(s_by_count[1:] @ (np.log(edges[1:]) - np.log(edges[:-1])))
        for T in T_list:
            N = T + 1
            p = np.arange(1, N + 1) / N
            counts = np.searchsorted(sorted_u, p, side="left")
            out[str(T)][d] = float(np.mean(s_by_count[counts] / p))
    return out
