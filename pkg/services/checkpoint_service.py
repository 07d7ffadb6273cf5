# services/checkpoint_service.py

import json
import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from services.categorical import Vocabulary
from services.denoiser import ContextBagDenoiser, ContextBagParams
from services.errors import ConfigError, ShapeError
from services.noise_schedule import NoiseSchedule

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ScheduleHeader(BaseModel):
    kind: str
    sigma_max: float
    eps: float


class CheckpointHeader(BaseModel):
    format_version: int = FORMAT_VERSION
    K: int = Field(..., ge=2)
    L: int = Field(..., ge=1)
    d_emb: int = Field(..., ge=1)
    d_hidden: int = Field(..., ge=1)
    time_conditioning: bool
    schedule: ScheduleHeader
    seed: int

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(kind=self.schedule.kind, sigma_max=self.schedule.sigma_max, eps=self.schedule.eps)


def header_for(params: ContextBagParams, sched: NoiseSchedule, time_conditioning: bool,
               seed: int) -> CheckpointHeader:
    K, L, d_emb, d_hidden = params.shape_info
    return CheckpointHeader(K=K, L=L, d_emb=d_emb, d_hidden=d_hidden,
                            time_conditioning=time_conditioning,
                            schedule=ScheduleHeader(kind=sched.kind.value, sigma_max=sched.sigma_max,
                                                    eps=sched.eps),
                            seed=seed)


def save_checkpoint(path: str | Path, params: ContextBagParams, header: CheckpointHeader) -> None:
    payload = {
        "header": header.model_dump(mode="json"),
        "arrays": {name: {"shape": list(value.shape), "data": value.reshape(-1).tolist()}
                   for name, value in params.arrays().items()},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    logger.info(f"[Checkpoint] saved K={header.K} L={header.L} to {path}")


def load_checkpoint(path: str | Path) -> tuple[CheckpointHeader, ContextBagParams]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        header = CheckpointHeader.model_validate(payload["header"])
        stored = payload.get("arrays")
        if not isinstance(stored, dict):
            raise ValueError("arrays must be a mapping of name to shape and data")
    except (OSError, KeyError, TypeError, AttributeError, ValueError, ValidationError) as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    if header.format_version != FORMAT_VERSION:
        raise ConfigError(f"checkpoint format {header.format_version} is not supported")
    arrays = {}
    for name in ContextBagParams.names():
        entry = stored.get(name)
        if not isinstance(entry, dict) or "data" not in entry or "shape" not in entry:
            raise ShapeError(f"checkpoint {path} is missing array {name}")
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(entry["shape"])):
            raise ShapeError(f"array {name} has {data.size} values for shape {entry['shape']}")
        arrays[name] = data.reshape(entry["shape"])
    params = ContextBagParams.from_arrays(arrays)
    params.validate(Vocabulary.with_data_size(header.K - 1), header.L)
    return header, params


def load_denoiser(path: str | Path) -> tuple[ContextBagDenoiser, CheckpointHeader]:
    header, params = load_checkpoint(path)
    vocab = Vocabulary.with_data_size(header.K - 1)
    return ContextBagDenoiser(params, vocab, time_conditioned=header.time_conditioning), header
