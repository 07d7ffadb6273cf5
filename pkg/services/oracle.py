# services/oracle.py

import itertools
import logging
import math
from functools import reduce

import numpy as np
from pydantic import BaseModel
from scipy.special import xlogy

from services.categorical import as_token_seq
from services.denoiser import DataDistribution, Denoiser
from services.errors import BoundViolation, DomainError, TooLarge
from services.noise_schedule import NoiseSchedule, discrete_time_grid
from services.objectives import ObjectiveKind, ObjectiveVariant, diffusion_loss_discrete

logger = logging.getLogger(__name__)

MAX_K = 6
MAX_L = 4
MAX_T = 64
MAX_WORK = 10 ** 6
BOUND_SLACK = 1e-9


def check_tiny(K: int, L: int, T: int) -> None:
    if K > MAX_K or L > MAX_L or T > MAX_T or K ** L * (T + 1) > MAX_WORK:
        raise TooLarge(f"instance K={K} L={L} T={T} exceeds the oracle guard")


def _require_subs(denoiser: Denoiser) -> None:
    if not denoiser.subs:
        raise DomainError("the reverse-process oracle needs a SUBS-constrained denoiser")


def model_path(T: int, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """alpha path of the T-step model from all-mask to clean, and the time of each latent.

    Path is alpha_{t(T)}=0, ..., alpha_{t(0)}=T/(T+1), then 1 for reconstruction.
    """
    alphas, times = discrete_time_grid(T, sched)
    return np.append(alphas[::-1], 1.0), times[::-1]


def _step_kernels(xout: np.ndarray, z: np.ndarray, alpha_s: float, alpha_t: float, mask: int):
    """Per-position rows of the reverse kernel."""
    probs = np.exp(xout) * (alpha_s - alpha_t) / (1.0 - alpha_t)
    probs[:, mask] = (1.0 - alpha_s) / (1.0 - alpha_t)
    visible = z != mask
    probs[visible] = 0.0
    probs[visible, z[visible]] = 1.0
    return probs


def model_distribution(denoiser: Denoiser, L: int, alphas: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Exact distribution over all K^L states after walking the alpha path from all-mask.

    Returned as a flat array indexed by np.ravel_multi_index over (K,)*L.
    """
    _require_subs(denoiser)
    K, mask = denoiser.vocab.K, denoiser.vocab.mask_index
    check_tiny(K, L, len(alphas) - 1)
    shape = (K,) * L
    p = np.zeros(K ** L)
    p[np.ravel_multi_index((mask,) * L, shape)] = 1.0
    for k in range(len(alphas) - 1):
        nxt = np.zeros_like(p)
        for code in np.flatnonzero(p):
            z = np.array(np.unravel_index(code, shape), dtype=np.int64)
            xout = denoiser.predict(z, float(times[k]))
            rows = _step_kernels(xout, z, float(alphas[k + 1]), float(alphas[k]), mask)
            nxt += p[code] * reduce(np.multiply.outer, rows).reshape(-1)
        p = nxt
    return p


def data_marginal(denoiser: Denoiser, L: int, T: int, sched: NoiseSchedule) -> DataDistribution:
    """p_theta over clean sequences for the T-step discrete model."""
    alphas, times = model_path(T, sched)
    p = model_distribution(denoiser, L, alphas, times)
    seqs = DataDistribution.enumerate_sequences(denoiser.vocab, L)
    shape = (denoiser.vocab.K,) * L
    codes = np.ravel_multi_index(tuple(seqs.T), shape)
    return DataDistribution(denoiser.vocab, L, seqs, p[codes] / p[codes].sum())


def exact_model_nll(x_seq, denoiser: Denoiser, T: int, sched: NoiseSchedule) -> float:
    """-log p_theta(x) by a DP over the 2^L latents compatible with x."""
    _require_subs(denoiser)
    vocab = denoiser.vocab
    x = as_token_seq(x_seq, vocab, kind="data")
    L, mask = len(x), vocab.mask_index
    check_tiny(vocab.K, L, T)
    alphas, times = model_path(T, sched)
    # state bit l set <=> position l still masked
    full = 2 ** L - 1
    mass = {full: 1.0}
    for k in range(len(alphas) - 1):
        alpha_t, alpha_s = float(alphas[k]), float(alphas[k + 1])
        stay = (1.0 - alpha_s) / (1.0 - alpha_t)
        nxt: dict[int, float] = {}
        for state, p in mass.items():
            bits = [(state >> pos) & 1 for pos in range(L)]
            z = np.where(np.array(bits, dtype=bool), mask, x)
            xout = denoiser.predict(z, float(times[k]))
            reveal = np.exp(xout[np.arange(L), x]) * (alpha_s - alpha_t) / (1.0 - alpha_t)
            masked = [pos for pos in range(L) if bits[pos]]
            for choice in itertools.product((0, 1), repeat=len(masked)):
                w = p
                new_state = state
                for pos, unmask in zip(masked, choice):
                    if unmask:
                        w *= reveal[pos]
                        new_state &= ~(1 << pos)
                    else:
                        w *= stay
                if w > 0.0:
                    nxt[new_state] = nxt.get(new_state, 0.0) + w
        mass = nxt
    p_x = mass.get(0, 0.0)
    return math.inf if p_x <= 0.0 else -math.log(p_x)


class BoundGapRow(BaseModel):
    T: int
    nelbo: float
    nll: float
    gap: float


def bound_gap_report(x_seq, denoiser: Denoiser, T_list: list[int], sched: NoiseSchedule) -> list[BoundGapRow]:
    """Exhaustive discrete NELBO against the exact NLL at each T; raises on a violated bound."""
    rows = []
    for T in T_list:
        nelbo = diffusion_loss_discrete(ObjectiveVariant(kind=ObjectiveKind.RB2_RB1, T=T), x_seq,
                                        denoiser, sched, exhaustive=True)
        nll = exact_model_nll(x_seq, denoiser, T, sched)
        gap = nelbo - nll
        rows.append(BoundGapRow(T=T, nelbo=nelbo, nll=nll, gap=gap))
        logger.info(f"[Oracle] T={T} nelbo={nelbo:.6f} nll={nll:.6f} gap={gap:.3e}")
        if gap < -BOUND_SLACK:
            raise BoundViolation(f"NELBO {nelbo} is below the exact NLL {nll} at T={T}")
    return rows


def entropy_rate(p_data: DataDistribution) -> float:
    """Entropy of the sequence distribution, nats."""
    return float(-xlogy(p_data.probs, p_data.probs).sum())


def order_nll(x_seq, denoiser: Denoiser, order) -> float:
    """Chain-rule NLL when positions are revealed in the given order."""
    x = as_token_seq(x_seq, denoiser.vocab, kind="data")
    if denoiser.time_conditioned:
        raise DomainError("order-based likelihoods need a time-free denoiser")
    z = np.full(len(x), denoiser.vocab.mask_index, dtype=np.int64)
    total = 0.0
    for pos in order:
        total -= float(denoiser.predict(z)[pos, x[pos]])
        z[pos] = x[pos]
    return total


def any_order_nll(x_seq, denoiser: Denoiser) -> float:
    """Average chain-rule NLL over all L! reveal orders."""
    L = len(x_seq)
    if L > MAX_L + 2:
        raise TooLarge(f"{L}! orders is too many")
    orders = list(itertools.permutations(range(L)))
    return float(np.mean([order_nll(x_seq, denoiser, o) for o in orders]))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
