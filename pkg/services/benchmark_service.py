# services/benchmark_service.py

import logging
import time

import numpy as np
from pydantic import BaseModel

from services.categorical import spawn_rngs
from services.denoiser import Denoiser
from services.errors import CheckFailed
from services.noise_schedule import NoiseSchedule
from services.sampler import ancestral_sample

logger = logging.getLogger(__name__)


class CachingRow(BaseModel):
    T: int
    n_seq: int
    calls_uncached: int
    calls_cached: int
    max_calls_cached_per_seq: int
    ms_uncached: float
    ms_cached: float
    speedup: float
    identical: bool


def _run(L, T, denoiser, sched, seed, n_seq, cache):
    outputs, calls = [], []
    started = time.perf_counter()
    for rng in spawn_rngs(seed, n_seq):
        tokens, stats = ancestral_sample(L, T, denoiser, sched, rng, cache=cache)
        outputs.append(tokens)
        calls.append(stats.denoiser_calls)
    return outputs, calls, (time.perf_counter() - started) * 1e3


def bench_caching(denoiser: Denoiser, L: int, T_list: list[int], n_seq: int, sched: NoiseSchedule,
                  seed: int = 0, repetitions: int = 5) -> list[CachingRow]:
    """Cached vs uncached ancestral sampling on identical seeds; one sequence at a time."""
    rows = []
    for T in T_list:
        timings = {False: [], True: []}
        results = {}
        for _ in range(repetitions):
            for cache in (False, True):
                outputs, calls, ms = _run(L, T, denoiser, sched, seed, n_seq, cache)
                timings[cache].append(ms)
                results[cache] = (outputs, calls)
        (plain_out, plain_calls), (cached_out, cached_calls) = results[False], results[True]
        identical = all(np.array_equal(a, b) for a, b in zip(plain_out, cached_out))
        ms_plain = float(np.median(timings[False]))
        ms_cached = float(np.median(timings[True]))
        row = CachingRow(T=T, n_seq=n_seq, calls_uncached=sum(plain_calls), calls_cached=sum(cached_calls),
                         max_calls_cached_per_seq=max(cached_calls), ms_uncached=ms_plain,
                         ms_cached=ms_cached, speedup=ms_plain / max(ms_cached, 1e-9), identical=identical)
        logger.info(f"[Bench] T={T} calls {row.calls_uncached}->{row.calls_cached} "
                    f"speedup={row.speedup:.2f} identical={identical}")
        if not identical:
            raise CheckFailed(f"cached and uncached samples differ at T={T}", row.model_dump())
        if any(c > p for c, p in zip(cached_calls, plain_calls)) or row.max_calls_cached_per_seq > T:
            raise CheckFailed(f"caching increased denoiser calls at T={T}", row.model_dump())
        rows.append(row)
    return rows
