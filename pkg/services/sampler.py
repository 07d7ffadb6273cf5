# services/sampler.py

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from services.categorical import TokenSeq, as_token_seq, sample_categorical_rows
from services.denoiser import Denoiser
from services.errors import BlockSizeError, CacheRequiresTimeFree, InvalidSteps, TimeOrderError
from services.noise_schedule import NoiseSchedule, sampling_grid

logger = logging.getLogger(__name__)


@dataclass
class SamplerStats:
    denoiser_calls: int = 0
    steps: int = 0
    tokens_unmasked_per_step: list[int] = field(default_factory=list)
    trajectory: list[np.ndarray] | None = None

    @property
    def histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(self.tokens_unmasked_per_step).items()))


@dataclass
class SemiArRound:
    prefix: np.ndarray
    window: np.ndarray
    stats: SamplerStats


def reverse_step(z_t: TokenSeq, xout: np.ndarray, alpha_s: float, alpha_t: float,
                 rng: np.random.Generator, mask_index: int) -> TokenSeq:
    """p_theta(z_s | z_t): copy unmasked tokens, resample masked ones.

    Exactly one draw per masked position, in ascending position order.
    """
    if alpha_s < alpha_t:
        raise TimeOrderError(f"alpha_s={alpha_s} below alpha_t={alpha_t}")
    z_s = np.array(z_t, dtype=np.int64, copy=True)
    masked = np.flatnonzero(z_s == mask_index)
    if masked.size == 0 or alpha_t >= 1.0:
        return z_s
    probs = (alpha_s - alpha_t) / (1.0 - alpha_t) * np.exp(xout[masked])
    probs[:, mask_index] = (1.0 - alpha_s) / (1.0 - alpha_t)
    z_s[masked] = sample_categorical_rows(probs, rng)
    return z_s


def ancestral_sample(L: int, T: int, denoiser: Denoiser, sched: NoiseSchedule,
                     rng: np.random.Generator, cache: bool = False,
                     z_init: np.ndarray | None = None,
                     record: bool = False) -> tuple[TokenSeq, SamplerStats]:
    if T < 1:
        raise InvalidSteps(f"T must be >= 1, got {T}")
    if cache and denoiser.time_conditioned:
        raise CacheRequiresTimeFree("caching reuses outputs across steps; the denoiser must ignore t")
    mask = denoiser.vocab.mask_index
    alphas, times = sampling_grid(T, sched)
    z = np.full(L, mask, dtype=np.int64) if z_init is None else as_token_seq(z_init, denoiser.vocab).copy()
    stats = SamplerStats(trajectory=[z.copy()] if record else None)
    xout = None
    changed = True
    for k in range(T):
        if xout is None or not cache or changed:
            xout = denoiser.predict(z, float(times[k]))
            stats.denoiser_calls += 1
        z_next = reverse_step(z, xout, float(alphas[k + 1]), float(alphas[k]), rng, mask)
        n_new = int(np.sum((z == mask) & (z_next != mask)))
        stats.tokens_unmasked_per_step.append(n_new)
        stats.steps += 1
        changed = n_new > 0
        z = z_next
        if record:
            stats.trajectory.append(z.copy())
    logger.debug(f"[Sampler] L={L} T={T} cache={cache} calls={stats.denoiser_calls}")
    return z, stats


def semi_ar_generate(L: int, L_prime: int, n_rounds: int, T: int, denoiser: Denoiser,
                     sched: NoiseSchedule, rng: np.random.Generator,
                     cache: bool = False) -> tuple[TokenSeq, list[SemiArRound]]:
    """Sliding-window generation: each round keeps the last L - L_prime tokens as its prefix."""
    if not 0 < L_prime < L:
        raise BlockSizeError(f"need 0 < L_prime < L, got L_prime={L_prime}, L={L}")
    mask = denoiser.vocab.mask_index
    window, stats = ancestral_sample(L, T, denoiser, sched, rng, cache=cache)
    rounds = [SemiArRound(prefix=np.zeros(0, dtype=np.int64), window=window, stats=stats)]
    output = [window]
    keep = L - L_prime
    for _ in range(n_rounds):
        prefix = window[-keep:].copy()
        z_init = np.concatenate([prefix, np.full(L_prime, mask, dtype=np.int64)])
        window, stats = ancestral_sample(L, T, denoiser, sched, rng, cache=cache, z_init=z_init)
        rounds.append(SemiArRound(prefix=prefix, window=window, stats=stats))
        output.append(window[keep:])
    return np.concatenate(output), rounds
