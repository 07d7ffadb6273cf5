# services/ablation_service.py

import logging
import math
from dataclasses import replace

import numpy as np
from pydantic import BaseModel

from services.categorical import Vocabulary, make_rng, spawn_rngs
from services.denoiser import ContextBagDenoiser, Denoiser, RandomTableDenoiser
from services.errors import CheckFailed
from services.evaluation_service import check_compatible, eval_ppl
from services.noise_schedule import ALL_KINDS, NoiseSchedule
from services.objectives import (
    ObjectiveKind,
    ObjectiveVariant,
    coupled_nelbo_ladder,
    diffusion_loss_discrete,
    nelbo_mc,
    nelbo_quadrature,
)
from services.training_service import TrainerConfig, train

logger = logging.getLogger(__name__)

SCHEDULE_TOL = 1e-3
LADDER_TOL = 1e-12
T_SWEEP_TOL = 0.005


# ---------------------------------------------------------------------------
# Noise schedules
# ---------------------------------------------------------------------------

class ScheduleRow(BaseModel):
    schedule: str
    nats_per_token: float
    ppl: float
    variance_per_datapoint: float


def ablate_schedules(denoiser: Denoiser, lines: np.ndarray, sigma_max: float, eps: float,
                     n_nodes: int = 64) -> list[ScheduleRow]:
    """Quadrature NELBO and one-sample estimator variance under each schedule.

    Means must agree for time-free denoisers; time-conditioned ones are reported only.
    """
    lines = check_compatible(denoiser, lines)
    per_line = {}
    rows = []
    for kind in ALL_KINDS:
        sched = NoiseSchedule(kind=kind, sigma_max=sigma_max, eps=eps)
        estimates = [nelbo_quadrature(x, denoiser, sched, n_nodes=n_nodes) for x in lines]
        per_line[kind.value] = np.array([e.value for e in estimates])
        nats = float(per_line[kind.value].mean()) / lines.shape[1]
        rows.append(ScheduleRow(schedule=kind.value, nats_per_token=nats, ppl=math.exp(nats),
                                variance_per_datapoint=float(np.mean([e.per_datapoint_variance
                                                                      for e in estimates]))))
    table = np.stack(list(per_line.values()))
    spread = float(np.max(table.max(axis=0) - table.min(axis=0)))
    logger.info(f"[Ablate] schedules spread={spread:.2e}")
    if spread > SCHEDULE_TOL:
        if denoiser.time_conditioned:
            logger.warning(f"[Ablate] time-conditioned denoiser: schedule spread {spread:.2e} reported only")
        else:
            raise CheckFailed(f"schedule means differ by {spread:.2e}", {"rows": [r.model_dump() for r in rows]})
    return rows


# ---------------------------------------------------------------------------
# Number of steps
# ---------------------------------------------------------------------------

class StepsRow(BaseModel):
    T: str
    nats_per_token: float
    ppl: float
    std_error: float


def ablate_steps(denoiser: Denoiser, lines: np.ndarray, T_list: list[int], sched: NoiseSchedule,
                 n_draws: int = 8, seed: int = 0) -> list[StepsRow]:
    """PPL bound at each T and in continuous time; must not increase with T."""
    lines = check_compatible(denoiser, lines)
    L = lines.shape[1]
    rngs = spawn_rngs(seed, len(lines))
    draws = {str(T): [] for T in T_list}
    draws["inf"] = []
    for x, rng in zip(lines, rngs):
        if denoiser.time_conditioned:
            for T in T_list:
                variant = ObjectiveVariant(kind=ObjectiveKind.RB2_RB1, T=T)
                draws[str(T)].append(np.mean([diffusion_loss_discrete(variant, x, denoiser, sched, rng=rng)
                                              for _ in range(n_draws)]))
            draws["inf"].append(nelbo_mc(x, denoiser, sched, n_draws, rng).value)
        else:
            for label, values in coupled_nelbo_ladder(x, denoiser, T_list, rng, n_draws).items():
                draws[label].append(values.mean())
    rows = []
    for label, values in draws.items():
        values = np.asarray(values) / L
        se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
        nats = float(values.mean())
        rows.append(StepsRow(T=label, nats_per_token=nats, ppl=math.exp(nats), std_error=se))
    ppls = [r.ppl for r in rows]
    for prev, cur, row in zip(ppls, ppls[1:], rows[1:]):
        if cur > prev * (1.0 + T_SWEEP_TOL):
            raise CheckFailed(f"PPL bound increased at T={row.T}", {"rows": [r.model_dump() for r in rows]})
    if ppls[-1] > min(ppls) * (1.0 + T_SWEEP_TOL):
        raise CheckFailed("continuous-time bound is not the minimum", {"rows": [r.model_dump() for r in rows]})
    logger.info("[Ablate] steps " + " ".join(f"T={r.T}:{r.ppl:.4f}" for r in rows))
    return rows


# ---------------------------------------------------------------------------
# Time conditioning
# ---------------------------------------------------------------------------

class TimeConditioningRow(BaseModel):
    time_conditioning: bool
    final_train_loss: float
    ppl: float
    std_error: float


def ablate_time_conditioning(corpus: np.ndarray, eval_lines: np.ndarray, vocab: Vocabulary,
                             sched: NoiseSchedule, cfg: TrainerConfig, n_samples: int = 8,
                             seed: int = 0) -> tuple[list[TimeConditioningRow], float]:
    """Train with and without time features from the same seed; returns rows and |delta PPL|."""
    rows = []
    for flag in (False, True):
        result = train(corpus, vocab, sched, replace(cfg, time_conditioning=flag))
        model = ContextBagDenoiser(result.params, vocab, time_conditioned=flag)
        ev = eval_ppl(model, eval_lines, sched, ObjectiveVariant(), estimator="mc",
                      n_samples=n_samples, seed=seed)
        rows.append(TimeConditioningRow(time_conditioning=flag, final_train_loss=result.final_loss,
                                        ppl=ev.ppl, std_error=ev.std_error))
    delta = abs(rows[1].ppl - rows[0].ppl)
    logger.info(f"[Ablate] time conditioning |dPPL|={delta:.4f}")
    return rows, delta


# ---------------------------------------------------------------------------
# Objective ladder
# ---------------------------------------------------------------------------

class LadderRow(BaseModel):
    instance: int
    k_data: int
    L: int
    T: int
    d3pm_full: float
    rb2: float
    rb2_rb1: float
    d3pm_full_unconstrained: float
    continuous: float


def ablate_objective_ladder(n_instances: int, sched: NoiseSchedule, seed: int = 0) -> list[LadderRow]:
    """Exhaustive ladder on random tiny instances (K <= 4, L <= 3, T <= 8)."""
    rng = make_rng(seed)
    rows = []
    for i in range(n_instances):
        k_data = int(rng.integers(2, 4))
        L = int(rng.integers(1, 4))
        T = int(rng.integers(1, 9))
        vocab = Vocabulary.with_data_size(k_data)
        x = vocab.data_tokens[rng.integers(0, k_data, size=L)]
        inst_seed = int(rng.integers(2 ** 31))
        subs = RandomTableDenoiser(vocab, L, inst_seed)
        free = RandomTableDenoiser(vocab, L, inst_seed, subs=False)
        values = {kind: diffusion_loss_discrete(ObjectiveVariant(kind=kind, T=T), x, subs, sched, exhaustive=True)
                  for kind in (ObjectiveKind.D3PM_FULL, ObjectiveKind.RB2, ObjectiveKind.RB2_RB1)}
        unconstrained = diffusion_loss_discrete(ObjectiveVariant(kind=ObjectiveKind.D3PM_FULL, T=T), x, free,
                                                sched, exhaustive=True)
        row = LadderRow(instance=i, k_data=k_data, L=L, T=T,
                        d3pm_full=values[ObjectiveKind.D3PM_FULL], rb2=values[ObjectiveKind.RB2],
                        rb2_rb1=values[ObjectiveKind.RB2_RB1], d3pm_full_unconstrained=unconstrained,
                        continuous=nelbo_quadrature(x, subs, sched).value)
        rows.append(row)
        spread = max(abs(row.d3pm_full - row.rb2), abs(row.rb2 - row.rb2_rb1))
        if spread > LADDER_TOL:
            raise CheckFailed(f"ladder values differ by {spread:.2e} on instance {i}", row.model_dump())
        if row.d3pm_full_unconstrained < row.rb2 - LADDER_TOL:
            raise CheckFailed(f"unconstrained D3PM bound below RB2 on instance {i}", row.model_dump())
    return rows
