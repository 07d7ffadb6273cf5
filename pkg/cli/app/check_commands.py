# cli/app/check_commands.py

import logging
import time

import click

from services.categorical import Vocabulary, make_rng
from services.errors import CheckFailed
from services.notification_service import notify_check_failures
from services.score_ctmc import equivalence_report
from services.verification_service import run_suite

from .commands import common_options, emit_report, load_model, resolve_config

logger = logging.getLogger(__name__)

SCORE_TOL = 1e-10
COLUMN_SUM_TOL = 1e-12


@click.command("score-check")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Take denoiser outputs from a checkpoint instead of random logits.")
@click.option("--n-cases", type=int, default=1000, show_default=True)
@click.option("--k-data", type=int, default=4, show_default=True, help="Vocabulary size for random logits.")
def score_check_cmd(config_path, seed, out_dir, deterministic, checkpoint, n_cases, k_data):
    """Score-entropy integrand under the SUBS score against the masked-diffusion integrand."""
    started = time.perf_counter()
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    denoiser, sched, vocab = None, cfg.schedule.noise_schedule(), Vocabulary.with_data_size(k_data)
    if checkpoint is not None:
        denoiser, header = load_model(checkpoint)
        sched, vocab = header.noise_schedule(), denoiser.vocab
    report = equivalence_report(denoiser, sched, n_cases, rng=make_rng(cfg.seed), vocab=vocab)
    metrics = {"max_deviation": report.max_deviation,
               "max_rate_inconsistency": report.max_rate_inconsistency,
               "max_column_sum": report.max_column_sum,
               "n_cases": report.n_cases}
    emit_report("score-check", cfg, out, metrics,
                {"cases": [c.model_dump(mode="json") for c in report.cases]},
                {"total_seconds": time.perf_counter() - started})
    failures = []
    if report.max_deviation > SCORE_TOL:
        failures.append("integrand_equivalence")
    if report.max_rate_inconsistency > SCORE_TOL:
        failures.append("reverse_rate")
    if report.max_column_sum > COLUMN_SUM_TOL:
        failures.append("column_sums")
    if failures:
        notify_check_failures("score-check", failures)
        raise CheckFailed(f"score-check failed: {', '.join(failures)}", metrics)


@click.command("verify")
@common_options
@click.option("--quick", is_flag=True, default=False, help="Smaller sample sizes with scaled tolerances.")
def verify_cmd(config_path, seed, out_dir, deterministic, quick):
    """Run the oracle suite and emit pass/fail JSON."""
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    results, timings = run_suite(seed=cfg.seed, quick=quick)
    passed = sum(r.passed for r in results)
    emit_report("verify", cfg, out, {"checks": len(results), "passed": passed},
                {"checks": [r.model_dump(mode="json") for r in results]},
                {f"{k}_seconds": v for k, v in timings.items()})
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"{len(failed)} oracle checks failed: {', '.join(failed)}")


COMMANDS = [
    score_check_cmd,
    verify_cmd,
]
