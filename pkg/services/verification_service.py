# services/verification_service.py

import logging
import math
import time

import numpy as np
from pydantic import BaseModel

from services.ablation_service import ablate_objective_ladder
from services.categorical import Vocabulary, make_rng, spawn_rngs
from services.denoiser import (
    BayesDenoiser,
    ContextBagDenoiser,
    DataDistribution,
    RandomTableDenoiser,
    TrainingBatch,
    check_gradients,
    init_params,
)
from services.errors import BoundViolation, CheckFailed, UnreachableLatent
from services.evaluation_service import expected_tokens
from services.forward_process import PriorSpec, posterior_general_at, posterior_masked_at
from services.noise_schedule import ALL_KINDS, NoiseSchedule, ScheduleKind, sampling_grid
from services.notification_service import notify_check_failures
from services.objectives import nelbo_batch_mc, nelbo_quadrature
from services.oracle import (
    bound_gap_report,
    entropy_rate,
    model_distribution,
    model_path,
    order_nll,
    total_variation,
)
from services.sampler import ancestral_sample, semi_ar_generate
from services.score_ctmc import equivalence_report, first_order_error

logger = logging.getLogger(__name__)


class CheckResult(BaseModel):
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


FULL_SIZES = {
    "ladder_instances": 10,
    "bound_denoisers": 20,
    "schedule_pairs": 10,
    "sampler_samples": 100_000,
    "cache_runs": 50,
    "score_cases": 1000,
    "grad_configs": 20,
    "ld_trials": 1000,
}

QUICK_SIZES = {
    "ladder_instances": 4,
    "bound_denoisers": 5,
    "schedule_pairs": 3,
    "sampler_samples": 20_000,
    "cache_runs": 20,
    "score_cases": 200,
    "grad_configs": 5,
    "ld_trials": 1000,
}


def _result(name: str, value: float, threshold: float, passed: bool, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), value=float(value), threshold=float(threshold),
                       detail=detail)


def _random_tiny(rng: np.random.Generator, max_k_data: int = 3, max_L: int = 3):
    k_data = int(rng.integers(2, max_k_data + 1))
    L = int(rng.integers(1, max_L + 1))
    vocab = Vocabulary.with_data_size(k_data)
    x = vocab.data_tokens[rng.integers(0, k_data, size=L)]
    return vocab, L, x, int(rng.integers(2 ** 31))


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------

def check_posterior_collapse(n_grid: int = 20) -> CheckResult:
    """General posterior with the masked prior vs the masked closed form, entrywise."""
    vocab = Vocabulary.with_data_size(3)
    prior = PriorSpec.masked(vocab)
    grid = np.linspace(0.0, 1.0, n_grid)
    worst = 0.0
    compared = 0
    for alpha_s in grid:
        for alpha_t in grid[grid <= alpha_s]:
            for x in vocab.data_tokens:
                for z_t in range(vocab.K):
                    try:
                        general = posterior_general_at(z_t, int(x), float(alpha_s), float(alpha_t), prior)
                    except UnreachableLatent:
                        continue
                    masked = posterior_masked_at(z_t, int(x), float(alpha_s), float(alpha_t), vocab)
                    worst = max(worst, float(np.max(np.abs(general - masked))))
                    compared += 1
    return _result("posterior_collapse", worst, 1e-12, worst <= 1e-12, f"{compared} cases")


def check_objective_ladder(n_instances: int, sched: NoiseSchedule, seed: int) -> CheckResult:
    try:
        rows = ablate_objective_ladder(n_instances, sched, seed=seed)
    except CheckFailed as e:
        return _result("objective_ladder", -1.0, 1e-12, False, str(e))
    spread = max(max(abs(r.d3pm_full - r.rb2), abs(r.rb2 - r.rb2_rb1)) for r in rows)
    return _result("objective_ladder", spread, 1e-12, True, f"{len(rows)} instances")


def check_variational_bound(n_denoisers: int, sched: NoiseSchedule, seed: int,
                            T_list: tuple[int, ...] = (2, 4, 8, 16)) -> CheckResult:
    rng = make_rng(seed)
    worst = math.inf
    for i in range(n_denoisers):
        vocab, L, x, inst_seed = _random_tiny(rng)
        denoiser = RandomTableDenoiser(vocab, L, inst_seed, time_conditioned=bool(i % 2))
        try:
            rows = bound_gap_report(x, denoiser, list(T_list), sched)
        except BoundViolation as e:
            return _result("variational_bound", -1.0, -1e-9, False, str(e))
        worst = min(worst, min(r.gap for r in rows))
    return _result("variational_bound", worst, -1e-9, worst >= -1e-9,
                   f"min gap over {n_denoisers} denoisers x T={list(T_list)}")


def check_dp_mass(n_models: int, sched: NoiseSchedule, seed: int, T: int = 4) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        vocab, L, _, inst_seed = _random_tiny(rng)
        alphas, times = model_path(T, sched)
        p = model_distribution(RandomTableDenoiser(vocab, L, inst_seed), L, alphas, times)
        seqs = DataDistribution.enumerate_sequences(vocab, L)
        codes = np.ravel_multi_index(tuple(seqs.T), (vocab.K,) * L)
        worst = max(worst, abs(float(p[codes].sum()) - 1.0))
    return _result("dp_mass_conservation", worst, 1e-10, worst <= 1e-10)


def check_continuous_tightness(sched: NoiseSchedule, seed: int, k_data: int = 2, L: int = 3) -> CheckResult:
    """Bayes denoiser: two reveal orders give -log p(x), quadrature NELBO averages to the entropy."""
    rng = make_rng(seed)
    vocab = Vocabulary.with_data_size(k_data)
    seqs = DataDistribution.enumerate_sequences(vocab, L)
    dist = DataDistribution(vocab, L, seqs, rng.dirichlet(np.ones(len(seqs))))
    bayes = BayesDenoiser(dist)
    order_err = 0.0
    cross_entropy = 0.0
    for x, p in zip(dist.sequences, dist.probs):
        target = -math.log(p)
        for order in (range(L), reversed(range(L))):
            order_err = max(order_err, abs(order_nll(x, bayes, list(order)) - target))
        cross_entropy += p * nelbo_quadrature(x, bayes, sched).value
    gap = abs(cross_entropy - entropy_rate(dist))
    passed = order_err <= 1e-10 and gap <= 1e-3
    return _result("continuous_tightness", gap, 1e-3, passed, f"chain-rule oracle error {order_err:.2e}")


def check_schedule_invariance(n_pairs: int, seed: int) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    variances = {kind.value: [] for kind in ALL_KINDS}
    for _ in range(n_pairs):
        vocab, L, x, inst_seed = _random_tiny(rng)
        denoiser = RandomTableDenoiser(vocab, L, inst_seed)
        values = []
        for kind in ALL_KINDS:
            est = nelbo_quadrature(x, denoiser, NoiseSchedule(kind=kind))
            values.append(est.value)
            variances[kind.value].append(est.per_datapoint_variance)
        worst = max(worst, max(values) - min(values))
    detail = " ".join(f"{k}:var={np.mean(v):.4g}" for k, v in variances.items())
    return _result("schedule_invariance", worst, 1e-3, worst <= 1e-3, detail)


def check_sampler_distribution(n_samples: int, sched: NoiseSchedule, seed: int,
                               n_models: int = 3, T: int = 4) -> CheckResult:
    """Empirical ancestral samples against the exact distribution of the same reverse chain."""
    tolerance = 0.02 * max(1.0, math.sqrt(100_000 / n_samples))
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        vocab = Vocabulary.with_data_size(2)
        L = 2
        denoiser = RandomTableDenoiser(vocab, L, int(rng.integers(2 ** 31)))
        alphas, times = sampling_grid(T, sched)
        exact = model_distribution(denoiser, L, alphas, times)
        shape = (vocab.K,) * L
        counts = np.zeros_like(exact)
        sample_rng = make_rng(int(rng.integers(2 ** 31)))
        for _ in range(n_samples):
            tokens, _ = ancestral_sample(L, T, denoiser, sched, sample_rng, cache=True)
            counts[np.ravel_multi_index(tuple(tokens), shape)] += 1
        worst = max(worst, total_variation(counts / n_samples, exact))
    return _result("sampler_distribution", worst, tolerance, worst <= tolerance, f"n={n_samples} per model")


def check_cache_equivalence(n_runs: int, sched: NoiseSchedule, seed: int, L: int = 16, T: int = 64) -> CheckResult:
    vocab = Vocabulary.with_data_size(4)
    denoiser = ContextBagDenoiser(init_params(vocab, L, 8, 16, seed), vocab)
    strictly_fewer = 0
    for i, (a, b) in enumerate(zip(spawn_rngs(seed, n_runs), spawn_rngs(seed, n_runs))):
        plain, plain_stats = ancestral_sample(L, T, denoiser, sched, a, cache=False)
        cached, cached_stats = ancestral_sample(L, T, denoiser, sched, b, cache=True)
        if not np.array_equal(plain, cached):
            return _result("cache_equivalence", 0.0, 0.9, False, f"outputs differ on run {i}")
        strictly_fewer += cached_stats.denoiser_calls < plain_stats.denoiser_calls
    share = strictly_fewer / n_runs
    return _result("cache_equivalence", share, 0.9, share >= 0.9, f"L={L} T={T}")


def check_semi_ar(sched: NoiseSchedule, seed: int, L: int = 8, L_prime: int = 3, n_rounds: int = 3) -> CheckResult:
    vocab = Vocabulary.with_data_size(4)
    denoiser = ContextBagDenoiser(init_params(vocab, L, 8, 16, seed), vocab)
    tokens, rounds = semi_ar_generate(L, L_prime, n_rounds, 16, denoiser, sched, make_rng(seed))
    keep = L - L_prime
    prefixes_kept = all(np.array_equal(r.window[:keep], r.prefix) for r in rounds[1:])
    length_ok = len(tokens) == L + n_rounds * L_prime
    no_mask = not np.any(tokens == vocab.mask_index)
    return _result("semi_ar", float(len(tokens)), float(L + n_rounds * L_prime),
                   prefixes_kept and length_ok and no_mask,
                   f"prefixes_kept={prefixes_kept} no_mask={no_mask}")


def check_score_equivalence(n_cases: int, sched: NoiseSchedule, seed: int) -> CheckResult:
    report = equivalence_report(None, sched, n_cases, rng=make_rng(seed), vocab=Vocabulary.with_data_size(4))
    passed = (report.max_deviation <= 1e-10 and report.max_column_sum <= 1e-12
              and report.max_rate_inconsistency <= 1e-10)
    return _result("score_equivalence", report.max_deviation, 1e-10, passed,
                   f"column_sum={report.max_column_sum:.2e} rate={report.max_rate_inconsistency:.2e}")


def check_first_order(sched: NoiseSchedule, t: float = 0.5) -> CheckResult:
    vocab = Vocabulary.with_data_size(3)
    coarse = first_order_error(t, 1e-3, sched, vocab)
    fine = first_order_error(t, 1e-4, sched, vocab)
    ratio = coarse / max(fine, 1e-300)
    return _result("rate_first_order", ratio, 50.0, ratio >= 50.0, f"err(1e-3)={coarse:.2e} err(1e-4)={fine:.2e}")


def check_gradient_fidelity(n_configs: int, seed: int) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for i in range(n_configs):
        vocab = Vocabulary.with_data_size(int(rng.integers(2, 5)))
        L = int(rng.integers(2, 5))
        tc = bool(i % 2)
        params = init_params(vocab, L, int(rng.integers(2, 6)), int(rng.integers(2, 7)),
                             int(rng.integers(2 ** 31)))
        B = 4
        x = vocab.data_tokens[rng.integers(0, vocab.k_data, size=(B, L))]
        z = np.where(rng.random((B, L)) < 0.6, vocab.mask_index, x)
        batch = TrainingBatch(x=x, z=z, t=rng.uniform(0.05, 0.95, size=B), weight=rng.uniform(-2.0, 0.0, size=B))
        worst = max(worst, check_gradients(params, batch, vocab, tc, max_coords=40, rng=rng))
    return _result("gradient_fidelity", worst, 1e-4, worst < 1e-4, f"{n_configs} configs")


def check_low_discrepancy(n_trials: int, seed: int, L: int = 6, batch: int = 16) -> CheckResult:
    """Batch-mean variance of the stratified-time estimator against i.i.d. uniform times."""
    vocab = Vocabulary.with_data_size(2)
    seqs = np.array([[0] * L, [1] * L], dtype=np.int64)
    bayes = BayesDenoiser(DataDistribution(vocab, L, seqs, np.array([0.5, 0.5])))
    lines = seqs[np.arange(batch) % 2]
    sched = NoiseSchedule(kind=ScheduleKind.LOG_LINEAR)
    rng = make_rng(seed)
    stratified = [nelbo_batch_mc(lines, bayes, sched, rng, "low_discrepancy") for _ in range(n_trials)]
    uniform = [nelbo_batch_mc(lines, bayes, sched, rng, "uniform") for _ in range(n_trials)]
    v_ld, v_u = float(np.var(stratified)), float(np.var(uniform))
    return _result("low_discrepancy", v_ld, v_u, v_ld < v_u, f"uniform variance {v_u:.4g}")


def check_token_accounting() -> CheckResult:
    value = expected_tokens(10 ** 6, 512, 128, NoiseSchedule(kind=ScheduleKind.LOG_LINEAR))
    return _result("token_accounting", value, 32_768_000_000, value == 32_768_000_000)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def run_suite(seed: int = 0, quick: bool = False) -> tuple[list[CheckResult], dict[str, float]]:
    """Run every oracle check; returns results and per-check wall-clock seconds."""
    sizes = QUICK_SIZES if quick else FULL_SIZES
    sched = NoiseSchedule(kind=ScheduleKind.LOG_LINEAR)
    checks = [
        ("posterior_collapse", lambda: check_posterior_collapse()),
        ("objective_ladder", lambda: check_objective_ladder(sizes["ladder_instances"], sched, seed)),
        ("variational_bound", lambda: check_variational_bound(sizes["bound_denoisers"], sched, seed)),
        ("dp_mass_conservation", lambda: check_dp_mass(3, sched, seed)),
        ("continuous_tightness", lambda: check_continuous_tightness(sched, seed)),
        ("schedule_invariance", lambda: check_schedule_invariance(sizes["schedule_pairs"], seed)),
        ("sampler_distribution", lambda: check_sampler_distribution(sizes["sampler_samples"], sched, seed)),
        ("cache_equivalence", lambda: check_cache_equivalence(sizes["cache_runs"], sched, seed)),
        ("semi_ar", lambda: check_semi_ar(sched, seed)),
        ("score_equivalence", lambda: check_score_equivalence(sizes["score_cases"], sched, seed)),
        ("rate_first_order", lambda: check_first_order(sched)),
        ("gradient_fidelity", lambda: check_gradient_fidelity(sizes["grad_configs"], seed)),
        ("low_discrepancy", lambda: check_low_discrepancy(sizes["ld_trials"], seed)),
        ("token_accounting", check_token_accounting),
    ]
    results, timings = [], {}
    for name, run in checks:
        started = time.perf_counter()
        result = run()
        timings[name] = time.perf_counter() - started
        results.append(result)
        status = "PASS" if result.passed else "FAIL"
        logger.info(f"[Verify] {status} {name} value={result.value:.4g} threshold={result.threshold:.4g} "
                    f"seconds={timings[name]:.2f}")
    failures = [r.name for r in results if not r.passed]
    if failures:
        notify_check_failures("verify", failures)
    return results, timings
