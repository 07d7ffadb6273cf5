# services/score_ctmc.py

import logging

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import xlogy

from services.categorical import Vocabulary, make_rng, stable_log_softmax
from services.denoiser import Denoiser
from services.errors import UnreachableLatent
from services.forward_process import PriorSpec, marginal_at, transition_at
from services.noise_schedule import NoiseSchedule, alpha, nelbo_weight, sigma_prime

logger = logging.getLogger(__name__)

# Entry (y', y) of a rate matrix is the rate of the jump y -> y'.


def forward_rate(t: float, sched: NoiseSchedule, vocab: Vocabulary) -> np.ndarray:
    """R_t = (alpha'/alpha) (I - m 1^T)."""
    ratio = -float(sigma_prime(t, sched))
    R = np.eye(vocab.K)
    R[vocab.mask_index, :] -= 1.0
    return ratio * R


def concrete_score(z_t: int, xout: np.ndarray, alpha_t: float, vocab: Vocabulary) -> np.ndarray:
    """s(z_t)_y for every target y, from one SUBS-constrained output position (log space)."""
    m = vocab.mask_index
    score = np.zeros(vocab.K)
    if z_t == m:
        score[:] = alpha_t / (1.0 - alpha_t) * np.exp(xout)
        score[m] = 1.0
    else:
        score[m] = (1.0 - alpha_t) / alpha_t
        score[z_t] = 1.0
    return score


def reverse_rate(y_prime: int, y: int, xout: np.ndarray, t: float, sched: NoiseSchedule,
                 vocab: Vocabulary) -> float:
    """R~_t(y', y) = -(alpha'/(1-alpha)) [y']^T (x_theta(y) - m) <y, m>."""
    m = vocab.mask_index
    if y != m:
        return 0.0
    direction = np.exp(xout)
    direction[m] -= 1.0
    return float(-nelbo_weight(t, sched) * direction[y_prime])


def reverse_rate_matrix(xout: np.ndarray, t: float, sched: NoiseSchedule, vocab: Vocabulary) -> np.ndarray:
    R = np.zeros((vocab.K, vocab.K))
    for y_prime in range(vocab.K):
        R[y_prime, vocab.mask_index] = reverse_rate(y_prime, vocab.mask_index, xout, t, sched, vocab)
    return R


def _k(a):
    return xlogy(a, a) - a


def sedd_nelbo_integrand(y: int, x: int, score: np.ndarray, t: float, sched: NoiseSchedule,
                         vocab: Vocabulary) -> float:
    """sum_{y' != y} R_t(y, y') (s_y' - r log s_y' + K(r)), r = q_t(y'|x) / q_t(y|x)."""
    q = marginal_at(x, float(alpha(t, sched)), PriorSpec.masked(vocab))
    if q[y] <= 0.0:
        raise UnreachableLatent(f"state {y} has zero probability given x={x}")
    R = forward_rate(t, sched, vocab)
    total = 0.0
    for y_prime in range(vocab.K):
        if y_prime == y or R[y, y_prime] == 0.0:
            continue
        r = q[y_prime] / q[y]
        total += R[y, y_prime] * (score[y_prime] - xlogy(r, score[y_prime]) + _k(r))
    return float(total)


def mdlm_integrand(y: int, x: int, xout: np.ndarray, t: float, sched: NoiseSchedule,
                   vocab: Vocabulary) -> float:
    """(alpha'/(1-alpha)) log <x_theta, x> <y, m>."""
    if y != vocab.mask_index:
        return 0.0
    return float(nelbo_weight(t, sched) * xout[x])


def first_order_error(t: float, h: float, sched: NoiseSchedule, vocab: Vocabulary) -> float:
    """max |q(z_{t+h} | z_t) - (I + R_t h)| over all entries."""
    prior = PriorSpec.masked(vocab)
    a_t, a_th = float(alpha(t, sched)), float(alpha(t + h, sched))
    kernel = np.stack([transition_at(y, a_t, a_th, prior) for y in range(vocab.K)], axis=1)
    return float(np.max(np.abs(kernel - (np.eye(vocab.K) + h * forward_rate(t, sched, vocab)))))


# ---------------------------------------------------------------------------
# Equivalence report
# ---------------------------------------------------------------------------

class EquivalenceCase(BaseModel):
    x: int
    y: int
    t: float
    sedd: float
    mdlm: float
    deviation: float
    rate_inconsistency: float


class EquivalenceReport(BaseModel):
    schedule: str
    n_cases: int
    max_deviation: float = Field(..., description="max |SEDD integrand - MDLM integrand|")
    max_rate_inconsistency: float
    max_column_sum: float
    cases: list[EquivalenceCase] = []


def _case_output(denoiser: Denoiser | None, vocab: Vocabulary, x: int, rng: np.random.Generator):
    """One masked output position: from the denoiser if given, else random logits."""
    if denoiser is None:
        logits = rng.normal(0.0, 2.0, size=vocab.K)
        logits[vocab.mask_index] = -np.inf
        return stable_log_softmax(logits)
    z = np.where(rng.random(denoiser.length) < 0.5, vocab.mask_index,
                 rng.choice(vocab.data_tokens, size=denoiser.length))
    pos = int(rng.integers(denoiser.length))
    z[pos] = vocab.mask_index
    return denoiser.predict(z, float(rng.uniform(0.01, 0.99)))[pos]


def equivalence_report(denoiser: Denoiser | None, sched: NoiseSchedule, n_cases: int,
                       rng: np.random.Generator | None = None,
                       vocab: Vocabulary | None = None) -> EquivalenceReport:
    """Numerical witness that the score-entropy integrand under SUBS equals the MDLM one."""
    rng = rng or make_rng(0)
    vocab = vocab or denoiser.vocab
    m = vocab.mask_index
    cases = []
    worst_dev = worst_rate = worst_col = 0.0
    for _ in range(n_cases):
        x = int(rng.choice(vocab.data_tokens))
        y = m if rng.random() < 0.5 else x
        t = float(rng.uniform(0.01, 0.99))
        xout = _case_output(denoiser, vocab, x, rng)
        a_t = float(alpha(t, sched))
        sedd = sedd_nelbo_integrand(y, x, concrete_score(y, xout, a_t, vocab), t, sched, vocab)
        mdlm = mdlm_integrand(y, x, xout, t, sched, vocab)
        R = forward_rate(t, sched, vocab)
        rate_err = 0.0
        for y_state in (m, x):
            score = concrete_score(y_state, xout, a_t, vocab)
            for y_prime in range(vocab.K):
                if y_prime == y_state:
                    continue
                expected = score[y_prime] * R[y_state, y_prime]
                rate_err = max(rate_err, abs(reverse_rate(y_prime, y_state, xout, t, sched, vocab) - expected))
        dev = abs(sedd - mdlm)
        worst_dev = max(worst_dev, dev)
        worst_rate = max(worst_rate, rate_err)
        worst_col = max(worst_col, float(np.max(np.abs(R.sum(axis=0)))))
        cases.append(EquivalenceCase(x=x, y=y, t=t, sedd=sedd, mdlm=mdlm, deviation=dev,
                                     rate_inconsistency=rate_err))
    logger.info(f"[Score] cases={n_cases} max_deviation={worst_dev:.3e} max_rate_err={worst_rate:.3e}")
    return EquivalenceReport(schedule=sched.kind.value, n_cases=n_cases, max_deviation=worst_dev,
                             max_rate_inconsistency=worst_rate, max_column_sum=worst_col, cases=cases)
