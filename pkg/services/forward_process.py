# services/forward_process.py

import logging
from dataclasses import dataclass

import numpy as np

from services.categorical import Vocabulary, validate_simplex
from services.errors import DataContainsMask, TimeOrderError, UnreachableLatent
from services.noise_schedule import NoiseSchedule, alpha

logger = logging.getLogger(__name__)

UNREACHABLE_TOL = 1e-300


@dataclass(frozen=True)
class PriorSpec:
    """Target distribution pi of the interpolating forward process."""

    pi: tuple[float, ...]
    mask_index: int | None = None

    def __post_init__(self):
        validate_simplex(np.asarray(self.pi))
        if self.mask_index is not None and self.pi[self.mask_index] != 1.0:
            raise DataContainsMask("a masked prior must be a point mass on the mask index")

    @classmethod
    def masked(cls, vocab: Vocabulary) -> "PriorSpec":
        pi = [0.0] * vocab.K
        pi[vocab.mask_index] = 1.0
        return cls(pi=tuple(pi), mask_index=vocab.mask_index)

    @classmethod
    def uniform(cls, K: int) -> "PriorSpec":
        return cls(pi=tuple([1.0 / K] * K))

    @property
    def K(self) -> int:
        return len(self.pi)

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.pi, dtype=np.float64)


def _one_hot(index: int, K: int) -> np.ndarray:
    v = np.zeros(K)
    v[index] = 1.0
    return v


def _check_data(x: int, prior: PriorSpec) -> None:
    if prior.mask_index is not None and x == prior.mask_index:
        raise DataContainsMask(f"data token {x} is the mask index")


def _check_order(alpha_s: float, alpha_t: float) -> None:
    if alpha_t > alpha_s:
        raise TimeOrderError(f"alpha_t={alpha_t} exceeds alpha_s={alpha_s}; need s <= t")


# ---- alpha-parameterized forms ----

def marginal_at(x: int, alpha_t: float, prior: PriorSpec) -> np.ndarray:
    _check_data(x, prior)
    return alpha_t * _one_hot(x, prior.K) + (1.0 - alpha_t) * prior.vector


def transition_at(z_s: int, alpha_s: float, alpha_t: float, prior: PriorSpec) -> np.ndarray:
    _check_order(alpha_s, alpha_t)
    ratio = 1.0 if alpha_s == alpha_t else alpha_t / alpha_s
    return ratio * _one_hot(z_s, prior.K) + (1.0 - ratio) * prior.vector


def posterior_general_at(z_t: int, x: int, alpha_s: float, alpha_t: float,
                         prior: PriorSpec) -> np.ndarray:
    """q(z_s | z_t, x) for an arbitrary prior, evaluated elementwise."""
    _check_data(x, prior)
    _check_order(alpha_s, alpha_t)
    K = prior.K
    pi = prior.vector
    zt = _one_hot(z_t, K)
    xv = _one_hot(x, K)
    ratio = 1.0 if alpha_s == alpha_t else alpha_t / alpha_s
    likelihood = ratio * zt + (1.0 - ratio) * np.ones(K) * (pi @ zt)
    prior_s = alpha_s * xv + (1.0 - alpha_s) * pi
    denom = alpha_t * (zt @ xv) + (1.0 - alpha_t) * (zt @ pi)
    if denom < UNREACHABLE_TOL:
        raise UnreachableLatent(f"z_t={z_t} cannot be reached from x={x}")
    return likelihood * prior_s / denom


def posterior_masked_at(z_t: int, x: int, alpha_s: float, alpha_t: float,
                        vocab: Vocabulary) -> np.ndarray:
    m = vocab.mask_index
    if x == m:
        raise DataContainsMask(f"data token {x} is the mask index")
    _check_order(alpha_s, alpha_t)
    out = np.zeros(vocab.K)
    if z_t != m:
        if z_t != x:
            raise UnreachableLatent(f"z_t={z_t} cannot be reached from x={x}")
        out[z_t] = 1.0
        return out
    denom = 1.0 - alpha_t
    if denom < UNREACHABLE_TOL:
        raise UnreachableLatent("z_t is masked but alpha_t = 1")
    out[m] = (1.0 - alpha_s) / denom
    out[x] = (alpha_s - alpha_t) / denom
    return out


# ---- time-parameterized wrappers ----

def _alphas(s: float, t: float, sched: NoiseSchedule) -> tuple[float, float]:
    if s > t:
        raise TimeOrderError(f"s={s} is after t={t}")
    return float(alpha(s, sched)), float(alpha(t, sched))


def marginal(x: int, t: float, sched: NoiseSchedule, prior: PriorSpec) -> np.ndarray:
    return marginal_at(x, float(alpha(t, sched)), prior)


def transition(z_s: int, s: float, t: float, sched: NoiseSchedule, prior: PriorSpec) -> np.ndarray:
    alpha_s, alpha_t = _alphas(s, t, sched)
    return transition_at(z_s, alpha_s, alpha_t, prior)


def posterior_general(z_t: int, x: int, s: float, t: float, sched: NoiseSchedule,
                      prior: PriorSpec) -> np.ndarray:
    alpha_s, alpha_t = _alphas(s, t, sched)
    return posterior_general_at(z_t, x, alpha_s, alpha_t, prior)


def posterior_masked(z_t: int, x: int, s: float, t: float, sched: NoiseSchedule,
                     vocab: Vocabulary) -> np.ndarray:
    alpha_s, alpha_t = _alphas(s, t, sched)
    return posterior_masked_at(z_t, x, alpha_s, alpha_t, vocab)


# ---- sequence level ----

def sample_masked_latent(x_seq: np.ndarray, alpha_t: float, vocab: Vocabulary,
                         rng: np.random.Generator) -> np.ndarray:
    """z_t ~ q(z_t | x), masking each position independently with prob 1 - alpha_t."""
    x_seq = np.asarray(x_seq, dtype=np.int64)
    z = x_seq.copy()
    z[rng.random(x_seq.shape) < (1.0 - alpha_t)] = vocab.mask_index
    return z


def all_mask_patterns(L: int) -> np.ndarray:
    """Boolean (2^L, L) table; row r masks position l when bit l of r is set."""
    rows = np.arange(2 ** L)[:, None]
    return ((rows >> np.arange(L)[None, :]) & 1).astype(bool)


def pattern_probabilities(patterns: np.ndarray, mask_prob) -> np.ndarray:
    """P(pattern) for each mask probability; shape (len(mask_prob), n_patterns)."""
    p = np.atleast_1d(np.asarray(mask_prob, dtype=np.float64))[:, None]
    m = patterns.sum(axis=1)[None, :]
    L = patterns.shape[1]
    return p ** m * (1.0 - p) ** (L - m)
