# cli/app/commands.py

import logging
import math
import time
from pathlib import Path

import click
import numpy as np

from config import get_settings
from services import corpus_service
from services.ablation_service import (
    ablate_objective_ladder,
    ablate_schedules,
    ablate_steps,
    ablate_time_conditioning,
)
from services.benchmark_service import bench_caching
from services.categorical import make_rng
from services.checkpoint_service import header_for, load_denoiser, save_checkpoint
from services.denoiser import BayesDenoiser
from services.errors import ConfigError, ShapeError
from services.evaluation_service import (
    eval_ppl,
    expected_tokens,
    judge_nll_per_token,
    uniform_samples,
    zero_shot,
)
from services.report_service import write_report
from services.sampler import ancestral_sample, semi_ar_generate
from services.training_service import train

from .schemas import Report, RunConfig, config_hash, dump_run_config, load_run_config

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def common_options(f):
    f = click.option("--deterministic", is_flag=True, default=False,
                     help="Fixed sequential reductions and a single eval worker.")(f)
    f = click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                     help="Output directory (overrides out_dir).")(f)
    f = click.option("--seed", type=int, default=None, help="Overrides seed, train.seed and corpus.seed.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="YAML run config.")(f)
    return f


def resolve_config(config_path, seed, out_dir, deterministic) -> tuple[RunConfig, Path]:
    cfg = load_run_config(config_path)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
        updates["train"] = cfg.train.model_copy(update={"seed": seed})
        updates["corpus"] = cfg.corpus.model_copy(update={"seed": seed})
    if out_dir is not None:
        updates["out_dir"] = out_dir
    if deterministic:
        updates["deterministic"] = True
    cfg = cfg.model_copy(update=updates)
    out = Path(cfg.out_dir or get_settings().OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_run_config(cfg), encoding="utf-8")
    return cfg, out


def eval_threads(cfg: RunConfig) -> int:
    return 1 if cfg.deterministic else get_settings().THREADS


def emit_report(command: str, cfg: RunConfig, out: Path, metrics: dict, tables: dict | None = None,
                timings: dict | None = None) -> Report:
    report = Report(command=command, config_hash=config_hash(cfg),
                    metrics={k: float(v) for k, v in metrics.items()},
                    tables=tables or {}, timings=timings or {})
    path = write_report(report, out, command.replace("-", "_"))
    click.echo(path.read_text(encoding="utf-8").strip())
    return report


def load_model(checkpoint: str):
    denoiser, header = load_denoiser(checkpoint)
    logger.info(f"[CLI] loaded checkpoint {checkpoint} K={header.K} L={header.L} "
                f"time_conditioning={header.time_conditioning}")
    return denoiser, header


def eval_lines_for(corpus_path: str) -> Path:
    """Held-out split next to the corpus when present, else the corpus itself."""
    held_out = Path(corpus_path).parent / corpus_service.EVAL_FILE
    return held_out if held_out.exists() else Path(corpus_path)


# ---------------------------------------------------------------------------
# Data and training
# ---------------------------------------------------------------------------

@click.command("gen-corpus")
@common_options
@click.option("--kind", type=click.Choice(["uniform", "markov1", "templated"]), default=None,
              help="Generator family (overrides corpus.generator).")
def gen_corpus_cmd(config_path, seed, out_dir, deterministic, kind):
    """Write a synthetic corpus, held-out split, vocabulary and generator manifest."""
    started = time.perf_counter()
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    c = cfg.corpus
    gen = corpus_service.build_generator(kind or c.generator, c.k_data, c.length, c.seed,
                                         concentration=c.concentration, n_templates=c.n_templates,
                                         noise=c.noise, initial=c.initial, transition=c.transition)
    paths = corpus_service.gen_corpus(gen, c.n, c.n_eval, c.seed, out)
    metrics = {"n": c.n, "n_eval": c.n_eval, "length": c.length, "k_data": c.k_data}
    entropy = corpus_service.entropy_per_sequence(gen)
    if entropy is not None:
        metrics["entropy_per_token"] = entropy / c.length
    tables = {"files": [{"name": k, "path": str(v)} for k, v in paths.items()],
              "manifest": [{"kind": gen.kind, "manifest_hash": corpus_service.manifest_hash(gen)}]}
    emit_report("gen-corpus", cfg, out, metrics, tables, {"total_seconds": time.perf_counter() - started})


@click.command("train")
@common_options
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
def train_cmd(config_path, seed, out_dir, deterministic, corpus_path):
    """Train the context-bag denoiser on a corpus and save a checkpoint."""
    started = time.perf_counter()
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    corpus, vocab, _ = corpus_service.load_bundle(corpus_path)
    sched = cfg.schedule.noise_schedule()
    result = train(corpus, vocab, sched, cfg.trainer_config())
    checkpoint = out / "checkpoint.json"
    save_checkpoint(checkpoint, result.params,
                    header_for(result.params, sched, cfg.model.time_conditioning, cfg.train.seed))
    trace = [{"step": i, "loss_per_token": float(v)} for i, v in enumerate(result.loss_trace)]
    emit_report("train", cfg, out,
                {"final_loss_per_token": result.final_loss, "steps": cfg.train.steps},
                {"loss_trace": trace, "checkpoint": [{"path": str(checkpoint)}]},
                {"total_seconds": time.perf_counter() - started})


# ---------------------------------------------------------------------------
# Likelihood evaluation
# ---------------------------------------------------------------------------

@click.command("eval")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
def eval_cmd(config_path, seed, out_dir, deterministic, checkpoint, corpus_path):
    """NELBO perplexity bound of a checkpoint on a corpus."""
    started = time.perf_counter()
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    denoiser, header = load_model(checkpoint)
    corpus, _, gen = corpus_service.load_bundle(corpus_path)
    result = eval_ppl(denoiser, corpus, header.noise_schedule(), cfg.objective.variant(),
                      estimator=cfg.eval.estimator, n_samples=cfg.eval.n_samples, n_nodes=cfg.eval.n_nodes,
                      seed=cfg.seed, threads=eval_threads(cfg))
    metrics = {"nats_per_token": result.nats_per_token, "ppl": result.ppl,
               "per_datapoint_variance": result.per_datapoint_variance, "std_error": result.std_error,
               "n_lines": result.n_lines}
    if gen is not None:
        metrics["uniform_ppl"] = gen.k_data
        entropy = corpus_service.entropy_per_sequence(gen)
        if entropy is not None:
            metrics["reference_ppl"] = math.exp(entropy / gen.length)
    emit_report("eval", cfg, out, metrics, {"estimator": [result.model_dump(mode="json")]},
                {"total_seconds": time.perf_counter() - started})


@click.command("zero-shot")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--corpus", "corpus_paths", type=click.Path(exists=True, dir_okay=False), multiple=True,
              help="Repeat for every corpus to score.")
def zero_shot_cmd(config_path, seed, out_dir, deterministic, checkpoint, corpus_paths):
    """Perplexity bound of one checkpoint on several corpora."""
    started = time.perf_counter()
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    denoiser, header = load_model(checkpoint)
    corpora = []
    for path in corpus_paths:
        corpus, _, gen = corpus_service.load_bundle(path)
        name = f"{Path(path).parent.name}/{Path(path).name}"
        corpora.append((name, corpus, corpus_service.manifest_hash(gen) if gen is not None else None))
    rows = zero_shot(denoiser, corpora, header.noise_schedule(), cfg.objective.variant(),
                     estimator=cfg.eval.estimator, n_samples=cfg.eval.n_samples, seed=cfg.seed,
                     threads=eval_threads(cfg))
    emit_report("zero-shot", cfg, out, {"n_corpora": len(rows)},
                {"corpora": [r.model_dump(mode="json") for r in rows]},
                {"total_seconds": time.perf_counter() - started})


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@click.command("sample")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Corpus whose manifest generator judges the samples.")
@click.option("--mode", type=click.Choice(["plain", "semi_ar"]), default=None,
              help="Overrides sample.mode.")
def sample_cmd(config_path, seed, out_dir, deterministic, checkpoint, corpus_path, mode):
    """Draw samples, write them detokenized and score them under the generator."""
    started = time.perf_counter()
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    denoiser, header = load_model(checkpoint)
    sched = header.noise_schedule()
    s = cfg.sample
    mode = mode or s.mode
    vocab, gen = denoiser.vocab, None
    if corpus_path is not None:
        _, vocab, gen = corpus_service.load_bundle(corpus_path)
    L = denoiser.length
    rng = make_rng(cfg.seed)
    samples, calls = [], []
    for _ in range(s.n):
        if mode == "semi_ar":
            L_prime = s.L_prime if s.L_prime is not None else max(1, L // 2)
            tokens, rounds = semi_ar_generate(L, L_prime, s.rounds, s.T, denoiser, sched, rng, cache=s.cache)
            calls.append(sum(r.stats.denoiser_calls for r in rounds))
        else:
            tokens, stats = ancestral_sample(L, s.T, denoiser, sched, rng, cache=s.cache)
            calls.append(stats.denoiser_calls)
        samples.append(tokens)
    samples = np.stack(samples)
    text_path = out / "samples.txt"
    text_path.write_text("\n".join(vocab.detokenize(row) for row in samples) + "\n", encoding="utf-8")
    metrics = {"n": s.n, "sample_length": samples.shape[1], "mean_denoiser_calls": float(np.mean(calls)),
               "mask_tokens": int(np.sum(samples == vocab.mask_index))}
    if gen is not None:
        try:
            judge = judge_nll_per_token(gen, samples, vocab)
            baseline = judge_nll_per_token(gen, uniform_samples(s.n, samples.shape[1], vocab, make_rng(cfg.seed)),
                                           vocab)
            metrics.update({"judge_nll_per_token": judge, "judge_ppl": math.exp(judge),
                            "uniform_judge_ppl": math.exp(baseline)})
        except ShapeError as e:
            logger.warning(f"[CLI] judge skipped: {e}")
    emit_report("sample", cfg, out, metrics, {"samples": [{"mode": mode, "path": str(text_path)}]},
                {"total_seconds": time.perf_counter() - started})


@click.command("bench-caching")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
def bench_caching_cmd(config_path, seed, out_dir, deterministic, checkpoint):
    """Wall clock and denoiser calls of cached vs uncached sampling."""
    started = time.perf_counter()
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    denoiser, header = load_model(checkpoint)
    b = cfg.bench
    rows = bench_caching(denoiser, b.L or denoiser.length, b.T_list, b.n_seq, header.noise_schedule(),
                         seed=cfg.seed, repetitions=b.repetitions)
    table, timings = [], {}
    for row in rows:
        data = row.model_dump(mode="json")
        for key in ("ms_uncached", "ms_cached", "speedup"):
            timings[f"T{row.T}_{key}"] = data.pop(key)
        table.append(data)
    timings["total_seconds"] = time.perf_counter() - started
    emit_report("bench-caching", cfg, out,
                {"calls_uncached": sum(r.calls_uncached for r in rows),
                 "calls_cached": sum(r.calls_cached for r in rows)},
                {"caching": table}, timings)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@click.command("ablate")
@common_options
@click.option("--kind", type=click.Choice(["schedules", "T", "time_conditioning", "objective_ladder"]),
              required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), default=None)
def ablate_cmd(config_path, seed, out_dir, deterministic, kind, checkpoint, corpus_path):
    """Run one ablation sweep and emit its table."""
    started = time.perf_counter()
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    a = cfg.ablate
    sched = cfg.schedule.noise_schedule()

    if kind == "objective_ladder":
        rows = ablate_objective_ladder(a.n_instances, sched, seed=cfg.seed)
        spread = max(max(abs(r.d3pm_full - r.rb2), abs(r.rb2 - r.rb2_rb1)) for r in rows)
        metrics = {"max_ladder_spread": spread,
                   "min_unconstrained_gap": min(r.d3pm_full_unconstrained - r.rb2 for r in rows)}
    else:
        if corpus_path is None:
            raise click.UsageError(f"ablate --kind {kind} needs --corpus")
        if kind == "time_conditioning":
            corpus, vocab, _ = corpus_service.load_bundle(corpus_path)
            held_out = corpus_service.read_corpus(eval_lines_for(corpus_path), vocab)
            rows, delta = ablate_time_conditioning(corpus, held_out[:a.n_lines], vocab, sched,
                                                   cfg.trainer_config(), n_samples=cfg.eval.n_samples,
                                                   seed=cfg.seed)
            metrics = {"abs_delta_ppl": delta}
        elif kind == "schedules":
            corpus, vocab, gen = corpus_service.load_bundle(corpus_path)
            if checkpoint is not None:
                denoiser, _ = load_model(checkpoint)
            elif gen is not None:
                denoiser = BayesDenoiser(corpus_service.data_distribution(gen, vocab))
            else:
                raise ConfigError("schedule sweep needs --checkpoint or a corpus manifest")
            rows = ablate_schedules(denoiser, corpus[:a.n_lines], cfg.schedule.sigma_max, cfg.schedule.eps,
                                    n_nodes=cfg.eval.n_nodes)
            means = [r.nats_per_token for r in rows]
            metrics = {"schedule_spread_nats_per_token": max(means) - min(means)}
        else:
            if checkpoint is None:
                raise click.UsageError("ablate --kind T needs --checkpoint")
            denoiser, header = load_model(checkpoint)
            _, vocab, _ = corpus_service.load_bundle(corpus_path)
            lines = corpus_service.read_corpus(eval_lines_for(corpus_path), vocab)[:a.n_lines]
            rows = ablate_steps(denoiser, lines, a.T_list, header.noise_schedule(), n_draws=a.n_draws,
                                seed=cfg.seed)
            metrics = {f"ppl_T_{r.T}": r.ppl for r in rows}
    emit_report("ablate", cfg, out, metrics,
                {kind: [r.model_dump(mode="json") for r in rows]},
                {"total_seconds": time.perf_counter() - started})


@click.command("expected-tokens")
@common_options
@click.option("--steps", type=int, required=True)
@click.option("--batch", type=int, required=True)
@click.option("--ctx", type=int, required=True)
@click.option("--autoregressive", is_flag=True, default=False, help="Count every token (factor 1.0).")
def expected_tokens_cmd(config_path, seed, out_dir, deterministic, steps, batch, ctx, autoregressive):
    """Expected number of loss-bearing tokens seen in training."""
    cfg, out = resolve_config(config_path, seed, out_dir, deterministic)
    value = expected_tokens(steps, batch, ctx, cfg.schedule.noise_schedule(), autoregressive=autoregressive)
    logger.info(f"[CLI] expected tokens={value}")
    emit_report("expected-tokens", cfg, out, {"expected_tokens": value})


COMMANDS = [
    gen_corpus_cmd,
    train_cmd,
    eval_cmd,
    zero_shot_cmd,
    sample_cmd,
    bench_caching_cmd,
    ablate_cmd,
    expected_tokens_cmd,
]
