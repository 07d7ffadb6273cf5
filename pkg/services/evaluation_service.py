# services/evaluation_service.py

import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from pydantic import BaseModel
from scipy.integrate import quad

from config import get_settings
from services import corpus_service
from services.categorical import Vocabulary, spawn_rngs
from services.denoiser import Denoiser
from services.errors import EmptyInput, ShapeError
from services.noise_schedule import NoiseSchedule, ScheduleKind, alpha
from services.objectives import (
    NelboEstimate,
    ObjectiveVariant,
    diffusion_loss_discrete,
    nelbo_mc,
    nelbo_quadrature,
)

logger = logging.getLogger(__name__)


class EvalResult(BaseModel):
    nats_per_token: float
    ppl: float
    per_datapoint_variance: float
    std_error: float
    n_lines: int
    estimator: str
    objective: str


def check_compatible(denoiser: Denoiser, corpus: np.ndarray) -> np.ndarray:
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise EmptyInput("evaluation corpus is empty")
    if corpus.shape[1] != denoiser.length:
        raise ShapeError(f"corpus length {corpus.shape[1]} does not match model length {denoiser.length}")
    if corpus.max() >= denoiser.vocab.K or np.any(corpus == denoiser.vocab.mask_index):
        raise ShapeError("corpus tokens do not fit the model vocabulary")
    return corpus


def _line_estimate(x, denoiser, sched, objective: ObjectiveVariant, estimator: str, n_samples: int,
                   n_nodes: int, rng) -> NelboEstimate:
    if not objective.is_discrete:
        if estimator == "quadrature":
            return nelbo_quadrature(x, denoiser, sched, n_nodes=n_nodes)
        return nelbo_mc(x, denoiser, sched, n_samples, rng)
    if estimator == "quadrature":
        value = diffusion_loss_discrete(objective, x, denoiser, sched, exhaustive=True)
        return NelboEstimate(value=value, n_samples=0, estimator="exhaustive")
    values = np.array([diffusion_loss_discrete(objective, x, denoiser, sched, rng=rng)
                       for _ in range(n_samples)])
    var = float(values.var(ddof=1)) if n_samples > 1 else 0.0
    return NelboEstimate(value=float(values.mean()), per_datapoint_variance=var, n_samples=n_samples,
                         std_error=math.sqrt(var / n_samples), estimator="mc")


def eval_ppl(denoiser: Denoiser, corpus: np.ndarray, sched: NoiseSchedule, objective: ObjectiveVariant,
             estimator: str = "mc", n_samples: int = 8, n_nodes: int = 64, seed: int = 0,
             threads: int | None = None) -> EvalResult:
    """Mean NELBO per token, its perplexity bound and estimator statistics."""
    corpus = check_compatible(denoiser, corpus)
    threads = max(1, threads or get_settings().THREADS)
    rngs = spawn_rngs(seed, corpus.shape[0])

    def run(i):
        return _line_estimate(corpus[i], denoiser, sched, objective, estimator, n_samples, n_nodes, rngs[i])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        estimates = list(pool.map(run, range(corpus.shape[0])))

    L = corpus.shape[1]
    values = np.array([e.value for e in estimates])
    nats = float(values.mean()) / L
    se = math.sqrt(sum(e.std_error ** 2 for e in estimates)) / len(estimates) / L
    result = EvalResult(
        nats_per_token=nats,
        ppl=math.exp(nats),
        per_datapoint_variance=float(np.mean([e.per_datapoint_variance for e in estimates])),
        std_error=se,
        n_lines=len(estimates),
        estimator=estimates[0].estimator,
        objective=objective.kind.value,
    )
    logger.info(f"[Eval] lines={result.n_lines} nats_per_token={nats:.4f} ppl={result.ppl:.4f} "
                f"se={se:.2e} estimator={result.estimator}")
    return result


class ZeroShotRow(BaseModel):
    corpus: str
    manifest_hash: str | None
    nats_per_token: float
    ppl: float
    std_error: float


def zero_shot(denoiser: Denoiser, corpora: list[tuple[str, np.ndarray, str | None]], sched: NoiseSchedule,
              objective: ObjectiveVariant, estimator: str = "mc", n_samples: int = 8, seed: int = 0,
              threads: int | None = None) -> list[ZeroShotRow]:
    if not corpora:
        raise EmptyInput("zero-shot evaluation needs at least one corpus")
    rows = []
    for name, corpus, digest in corpora:
        result = eval_ppl(denoiser, corpus, sched, objective, estimator, n_samples, seed=seed, threads=threads)
        rows.append(ZeroShotRow(corpus=name, manifest_hash=digest, nats_per_token=result.nats_per_token,
                                ppl=result.ppl, std_error=result.std_error))
    return rows


def masking_factor(sched: NoiseSchedule) -> float:
    """E_t[1 - alpha_t] for t ~ U[0, 1]."""
    if sched.kind is ScheduleKind.LOG_LINEAR:
        return 0.5
    value, _ = quad(lambda t: 1.0 - float(alpha(t, sched)), 0.0, 1.0, limit=200)
    return value


def expected_tokens(steps: int, batch: int, ctx: int, sched: NoiseSchedule,
                    autoregressive: bool = False) -> int:
    """Expected number of masked (loss-bearing) tokens seen during training."""
    total = int(steps) * int(batch) * int(ctx)
    if autoregressive:
        return total
    if sched.kind is ScheduleKind.LOG_LINEAR:
        return total // 2
    return int(round(total * masking_factor(sched)))


def judge_nll_per_token(gen, samples: np.ndarray, vocab: Vocabulary) -> float:
    """Mean per-token NLL of token sequences under the known generator."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
    data = corpus_service.to_data_indices(samples, vocab)
    return float(-np.mean([corpus_service.log_prob(gen, row) for row in data]) / samples.shape[1])


def uniform_samples(n: int, L: int, vocab: Vocabulary, rng: np.random.Generator) -> np.ndarray:
    return vocab.data_tokens[rng.integers(0, vocab.k_data, size=(n, L))]
