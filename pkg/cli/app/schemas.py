# cli/app/schemas.py

import math
from pathlib import Path
from typing import Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from services.errors import ConfigError
from services.noise_schedule import DEFAULT_EPS, DEFAULT_SIGMA_MAX, NoiseSchedule, ScheduleKind
from services.objectives import ObjectiveKind, ObjectiveVariant
from services.report_service import sha256_of
from services.training_service import TrainerConfig

ARTIFACT_VERSION = "1.0.0"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# MODEL / SCHEDULE / OBJECTIVE
# ---------------------------------------------------------------------------

class ModelSection(_Section):
    d_emb: int = Field(32, ge=1)
    d_hidden: int = Field(64, ge=1)
    time_conditioning: bool = False


class ScheduleSection(_Section):
    kind: ScheduleKind = ScheduleKind.LOG_LINEAR
    sigma_max: float = Field(DEFAULT_SIGMA_MAX, gt=0)
    eps: float = Field(DEFAULT_EPS, gt=0, lt=0.5)

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(kind=self.kind, sigma_max=self.sigma_max, eps=self.eps)


class ObjectiveSection(_Section):
    kind: ObjectiveKind = ObjectiveKind.CONTINUOUS
    T: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _steps_for_discrete(self):
        if self.kind is not ObjectiveKind.CONTINUOUS and self.T is None:
            raise ValueError(f"objective {self.kind.value} needs T")
        return self

    def variant(self) -> ObjectiveVariant:
        return ObjectiveVariant(kind=self.kind, T=self.T)


# ---------------------------------------------------------------------------
# TRAIN / EVAL / SAMPLE
# ---------------------------------------------------------------------------

class TrainSection(_Section):
    steps: int = Field(5000, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(3e-3, gt=0)
    warmup_steps: int = Field(100, ge=0)
    seed: int = 0
    log_every: int = Field(100, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    time_sampler: Literal["low_discrepancy", "uniform"] = "low_discrepancy"


class EvalSection(_Section):
    estimator: Literal["mc", "quadrature"] = "mc"
    n_samples: int = Field(8, ge=1)
    n_nodes: int = Field(64, ge=2)


class SampleSection(_Section):
    mode: Literal["plain", "semi_ar"] = "plain"
    n: int = Field(16, ge=1)
    T: int = Field(100, ge=1)
    cache: bool = True
    L_prime: Optional[int] = Field(None, ge=1, description="new tokens per semi-AR round")
    rounds: int = Field(2, ge=0)


# ---------------------------------------------------------------------------
# CORPUS / BENCH / ABLATE
# ---------------------------------------------------------------------------

class CorpusSection(_Section):
    generator: Literal["uniform", "markov1", "templated"] = "markov1"
    k_data: int = Field(6, ge=1)
    length: int = Field(16, ge=1)
    n: int = Field(2000, ge=1)
    n_eval: int = Field(200, ge=0)
    seed: int = 0
    concentration: float = Field(0.5, gt=0)
    n_templates: int = Field(4, ge=1)
    noise: float = Field(0.1, ge=0, le=1)
    initial: Optional[List[float]] = Field(None, description="markov1 start distribution; drawn when omitted")
    transition: Optional[List[List[float]]] = Field(None, description="markov1 transition table; drawn when omitted")


class BenchSection(_Section):
    T_list: List[int] = [16, 64, 256]
    n_seq: int = Field(8, ge=1)
    L: Optional[int] = Field(None, ge=1, description="defaults to the checkpoint length")
    repetitions: int = Field(5, ge=1)


class AblateSection(_Section):
    T_list: List[int] = [10, 100, 1000]
    n_draws: int = Field(8, ge=1)
    n_lines: int = Field(64, ge=1)
    n_instances: int = Field(10, ge=1)

    @field_validator("T_list")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])) or any(T < 1 for T in v):
            raise ValueError("T_list must be strictly increasing positive integers")
        return v


# ---------------------------------------------------------------------------
# RUN CONFIG
# ---------------------------------------------------------------------------

class RunConfig(_Section):
    model: ModelSection = ModelSection()
    schedule: ScheduleSection = ScheduleSection()
    objective: ObjectiveSection = ObjectiveSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    sample: SampleSection = SampleSection()
    corpus: CorpusSection = CorpusSection()
    bench: BenchSection = BenchSection()
    ablate: AblateSection = AblateSection()
    seed: int = 0
    out_dir: Optional[str] = None
    deterministic: bool = False

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            d_emb=self.model.d_emb,
            d_hidden=self.model.d_hidden,
            time_conditioning=self.model.time_conditioning,
            objective=self.objective.variant(),
            steps=self.train.steps,
            batch_size=self.train.batch_size,
            lr=self.train.lr,
            warmup_steps=self.train.warmup_steps,
            seed=self.train.seed,
            log_every=self.train.log_every,
            beta1=self.train.beta1,
            beta2=self.train.beta2,
            adam_eps=self.train.adam_eps,
            time_sampler=self.train.time_sampler,
            deterministic=self.deterministic,
        )


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return RunConfig.model_validate(data)
    except (OSError, yaml.YAMLError, ValidationError, ValueError) as e:
        raise ConfigError(f"invalid run config {path}: {e}") from e


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    return sha256_of(cfg)


# ---------------------------------------------------------------------------
# REPORT
# ---------------------------------------------------------------------------

class Report(BaseModel):
    command: str
    config_hash: str
    metrics: Dict[str, float] = {}
    tables: Dict[str, List[dict]] = {}
    timings: Dict[str, float] = {}
    artifact_version: str = ARTIFACT_VERSION

    @field_validator("metrics")
    @classmethod
    def _finite(cls, v):
        bad = [k for k, x in v.items() if not math.isfinite(x)]
        if bad:
            raise ValueError(f"non-finite metrics: {bad}")
        return v
