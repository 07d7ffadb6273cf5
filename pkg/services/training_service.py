# services/training_service.py

import logging
from dataclasses import dataclass, field

import numpy as np

from services import notification_service
from services.categorical import Vocabulary, make_rng
from services.denoiser import ContextBagParams, TrainingBatch, init_params, loss_and_grad
from services.errors import DataContainsMask, EmptyInput, NumericalError, ShapeError
from services.noise_schedule import NoiseSchedule, alpha, discrete_time_grid, nelbo_weight
from services.objectives import ObjectiveVariant, sample_times
from services.optimizer import AdamState, adam_step, warmup_lr

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainerConfig:
    d_emb: int = 32
    d_hidden: int = 64
    time_conditioning: bool = False
    objective: ObjectiveVariant = field(default_factory=ObjectiveVariant)
    steps: int = 5000
    batch_size: int = 64
    lr: float = 3e-3
    warmup_steps: int = 100
    seed: int = 0
    log_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    time_sampler: str = "low_discrepancy"
    deterministic: bool = False


@dataclass
class TrainResult:
    params: ContextBagParams
    loss_trace: np.ndarray          # nats per token, one entry per step
    logged: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        tail = self.loss_trace[-min(len(self.loss_trace), 50):]
        return float(tail.mean()) if len(tail) else float("nan")


def _check_corpus(corpus: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise EmptyInput("training corpus is empty")
    if corpus.min() < 0 or corpus.max() >= vocab.K:
        raise ShapeError(f"corpus tokens outside [0, {vocab.K})")
    if np.any(corpus == vocab.mask_index):
        raise DataContainsMask("training corpus contains the mask token")
    return corpus


def _scale(grad: ContextBagParams, factor: float) -> ContextBagParams:
    return ContextBagParams.from_arrays({k: v * factor for k, v in grad.arrays().items()})


def _batch_grad(params, batch, vocab, cfg: TrainerConfig):
    if not cfg.deterministic:
        return loss_and_grad(params, batch, vocab, cfg.time_conditioning)
    # Fixed left-to-right reduction over batch elements.
    total, acc = 0.0, params.zeros_like()
    for b in range(len(batch)):
        one = TrainingBatch(batch.x[b:b + 1], batch.z[b:b + 1], batch.t[b:b + 1], batch.weight[b:b + 1])
        loss, grad = loss_and_grad(params, one, vocab, cfg.time_conditioning)
        total += loss
        acc = ContextBagParams.from_arrays({k: acc.arrays()[k] + v for k, v in grad.arrays().items()})
    return total, acc


def discrete_step_weights(T: int, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """alpha, time and loss weight for step i = 0..T of the discrete NELBO, drawn uniformly.

    Step 0 is the reconstruction term at alpha = T/(T+1); steps 1..T are the diffusion terms.
    Weights carry the (T+1) factor of uniform step sampling. Under SUBS the d3pm_full KL
    collapses to the rb2 term, so one weight serves every discrete kind.
    """
    alphas, times = discrete_time_grid(T, sched)
    weights = np.empty(T + 1)
    weights[0] = -1.0
    weights[1:] = (alphas[1:] - alphas[:-1]) / (1.0 - alphas[1:])
    return alphas, times, (T + 1) * weights


def sample_training_batch(corpus: np.ndarray, vocab: Vocabulary, sched: NoiseSchedule,
                          cfg: TrainerConfig, rng: np.random.Generator) -> TrainingBatch:
    B = cfg.batch_size
    x = corpus[rng.integers(0, corpus.shape[0], size=B)]
    if cfg.objective.is_discrete:
        alphas, times, weights = discrete_step_weights(cfg.objective.T, sched)
        i = rng.integers(0, cfg.objective.T + 1, size=B)
        alpha_t, t, weight = alphas[i], times[i], weights[i]
    else:
        t = sample_times(B, rng, sched, cfg.time_sampler)
        alpha_t = alpha(t, sched)
        weight = nelbo_weight(t, sched)
    masked = rng.random(x.shape) < (1.0 - alpha_t)[:, None]
    z = np.where(masked, vocab.mask_index, x)
    return TrainingBatch(x=x, z=z, t=np.asarray(t, dtype=np.float64), weight=np.asarray(weight))


def train(corpus: np.ndarray, vocab: Vocabulary, sched: NoiseSchedule,
          cfg: TrainerConfig) -> TrainResult:
    """Minimize the NELBO (the nonnegative bound) with Adam and linear warmup."""
    corpus = _check_corpus(corpus, vocab)
    L = corpus.shape[1]
    rng = make_rng(cfg.seed)
    params = init_params(vocab, L, cfg.d_emb, cfg.d_hidden, cfg.seed)
    state = AdamState.for_params(params)
    trace = np.empty(cfg.steps)
    logged = []
    logger.info(f"[Train] start steps={cfg.steps} batch={cfg.batch_size} L={L} K={vocab.K} "
                f"objective={cfg.objective.kind.value} time_conditioning={cfg.time_conditioning}")

    for step in range(cfg.steps):
        batch = sample_training_batch(corpus, vocab, sched, cfg, rng)
        try:
            loss, grad = _batch_grad(params, batch, vocab, cfg)
        except NumericalError as e:
            notification_service.notify_critical_error(e, {"step": step, "t": batch.t.tolist()})
            raise
        loss /= cfg.batch_size
        lr = warmup_lr(step, cfg.lr, cfg.warmup_steps)
        params, state = adam_step(params, _scale(grad, 1.0 / cfg.batch_size), state, lr,
                                  cfg.beta1, cfg.beta2, cfg.adam_eps)
        trace[step] = loss / L
        if cfg.log_every and step % cfg.log_every == 0:
            logged.append({"step": step, "loss_per_token": float(trace[step]), "lr": lr})
            logger.info(f"[Train] step={step} loss_per_token={trace[step]:.4f} lr={lr:.2e}")

    for name, value in params.arrays().items():
        if not np.all(np.isfinite(value)):
            err = NumericalError(f"parameter {name} became non-finite")
            notification_service.notify_critical_error(err, {"steps": cfg.steps})
            raise err
    logger.info(f"[Train] done final_loss_per_token={TrainResult(params, trace).final_loss:.4f}")
    return TrainResult(params=params, loss_trace=trace, logged=logged)
