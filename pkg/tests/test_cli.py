import json

import pytest
import yaml
from click.testing import CliRunner

from cli.app import check_commands
from cli.app.main import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, cli, main
from services.checkpoint_service import header_for, save_checkpoint
from services.noise_schedule import NoiseSchedule
from services.verification_service import CheckResult

TINY = {
    "seed": 0,
    "deterministic": True,
    "model": {"d_emb": 4, "d_hidden": 8},
    "objective": {"kind": "rb2_rb1_discrete", "T": 8},
    "train": {"steps": 30, "batch_size": 8, "lr": 0.01, "warmup_steps": 5, "log_every": 10},
    "eval": {"estimator": "quadrature", "n_nodes": 64},
    "sample": {"n": 4, "T": 8},
    "corpus": {"generator": "markov1", "k_data": 3, "length": 4, "n": 60, "n_eval": 20},
    "bench": {"T_list": [4, 8], "n_seq": 2, "repetitions": 1},
    "ablate": {"T_list": [2, 8], "n_draws": 4, "n_lines": 8, "n_instances": 2},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture
def run(config_file, tmp_path):
    def _run(*args, out="out"):
        return main([args[0], "--config", str(config_file), "--out", str(tmp_path / out), *args[1:]])
    return _run


def _report(tmp_path, out, name):
    return json.loads((tmp_path / out / f"{name}.json").read_text())


def test_gen_corpus_is_deterministic(run, tmp_path):
    assert run("gen-corpus", out="a") == EXIT_OK
    assert run("gen-corpus", out="b") == EXIT_OK
    assert (tmp_path / "a" / "corpus.txt").read_bytes() == (tmp_path / "b" / "corpus.txt").read_bytes()
    a, b = _report(tmp_path, "a", "gen_corpus"), _report(tmp_path, "b", "gen_corpus")
    assert a["metrics"] == b["metrics"]
    assert a["tables"]["manifest"] == b["tables"]["manifest"]
    assert (tmp_path / "a" / "config.yaml").exists()


def test_seed_override_changes_the_corpus(run, tmp_path):
    run("gen-corpus", out="a")
    run("gen-corpus", "--seed", "7", out="b")
    assert (tmp_path / "a" / "corpus.txt").read_bytes() != (tmp_path / "b" / "corpus.txt").read_bytes()


def test_train_eval_sample_pipeline(run, tmp_path):
    assert run("gen-corpus", out="data") == EXIT_OK
    corpus = str(tmp_path / "data" / "corpus.txt")
    assert run("train", "--corpus", corpus, out="model") == EXIT_OK
    checkpoint = str(tmp_path / "model" / "checkpoint.json")
    trained = _report(tmp_path, "model", "train")
    assert len(trained["tables"]["loss_trace"]) == 30

    assert run("eval", "--checkpoint", checkpoint, "--corpus", corpus, out="eval") == EXIT_OK
    metrics = _report(tmp_path, "eval", "eval")["metrics"]
    assert metrics["uniform_ppl"] == 3.0
    assert metrics["ppl"] > 1.0 and "reference_ppl" in metrics

    assert run("sample", "--checkpoint", checkpoint, "--corpus", corpus, out="sample") == EXIT_OK
    lines = (tmp_path / "sample" / "samples.txt").read_text().splitlines()
    assert len(lines) == 4 and all("<mask>" not in ln for ln in lines)
    assert run("sample", "--checkpoint", checkpoint, "--mode", "semi_ar", out="semi") == EXIT_OK

    assert run("zero-shot", "--checkpoint", checkpoint, "--corpus", corpus, out="zs") == EXIT_OK
    assert run("bench-caching", "--checkpoint", checkpoint, out="bench") == EXIT_OK
    assert run("score-check", "--checkpoint", checkpoint, "--n-cases", "50", out="score") == EXIT_OK


def test_step_ablation_passes_on_a_trained_checkpoint(markov_bundle, markov_trained, tmp_path):
    _, paths = markov_bundle
    checkpoint = tmp_path / "model" / "checkpoint.json"
    params = markov_trained.params
    save_checkpoint(checkpoint, params, header_for(params, NoiseSchedule(), False, seed=0))
    config = tmp_path / "ablate.yaml"
    config.write_text(yaml.safe_dump({"seed": 0, "ablate": {"T_list": [10, 100, 1000], "n_draws": 8, "n_lines": 64}}))
    code = main(["ablate", "--config", str(config), "--out", str(tmp_path / "abl"), "--kind", "T",
                 "--checkpoint", str(checkpoint), "--corpus", str(paths["corpus"])])
    assert code == EXIT_OK
    metrics = _report(tmp_path, "abl", "ablate")["metrics"]
    assert set(metrics) == {"ppl_T_10", "ppl_T_100", "ppl_T_1000", "ppl_T_inf"}
    assert metrics["ppl_T_inf"] < 6.0


def test_ablations_without_checkpoint(run, tmp_path):
    run("gen-corpus", out="data")
    corpus = str(tmp_path / "data" / "corpus.txt")
    assert run("ablate", "--kind", "objective_ladder", out="ladder") == EXIT_OK
    assert run("ablate", "--kind", "schedules", "--corpus", corpus, out="sched") == EXIT_OK
    assert run("ablate", "--kind", "T", "--corpus", corpus, out="t") == EXIT_USAGE


def test_expected_tokens_command(tmp_path):
    result = CliRunner().invoke(cli, ["expected-tokens", "--out", str(tmp_path), "--steps", "1000000",
                                      "--batch", "512", "--ctx", "128"])
    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["metrics"]["expected_tokens"] == 32_768_000_000


def test_bad_config_is_a_usage_error(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("modle:\n  d_emb: 4\n")
    assert main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    bad.write_text("objective:\n  kind: rb2\n")
    assert main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path), "--corpus", str(tmp_path / "missing.txt")]) == EXIT_USAGE


def test_verify_exit_code_follows_results(monkeypatch, tmp_path):
    failing = CheckResult(name="toy", passed=False, value=1.0, threshold=0.0)
    monkeypatch.setattr(check_commands, "run_suite", lambda seed, quick: ([failing], {"toy": 0.01}))
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_CHECK_FAILED
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["metrics"]["passed"] == 0.0

    passing = failing.model_copy(update={"passed": True})
    monkeypatch.setattr(check_commands, "run_suite", lambda seed, quick: ([passing], {"toy": 0.01}))
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK
