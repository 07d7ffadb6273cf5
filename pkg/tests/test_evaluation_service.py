import json
import math

import numpy as np
import pytest
from pydantic import BaseModel

from services import corpus_service
from services.denoiser import BayesDenoiser, DataDistribution, RandomTableDenoiser
from services.errors import EmptyInput, ShapeError
from services.evaluation_service import (
    eval_ppl,
    expected_tokens,
    judge_nll_per_token,
    masking_factor,
    uniform_samples,
    zero_shot,
)
from services.noise_schedule import NoiseSchedule, ScheduleKind
from services.objectives import ObjectiveKind, ObjectiveVariant
from services.report_service import canonical_json, report_digest, write_report


@pytest.fixture
def uniform_lines(vocab2):
    return DataDistribution.enumerate_sequences(vocab2, 3)


def test_token_accounting(sched):
    assert expected_tokens(10 ** 6, 512, 128, sched) == 32_768_000_000
    assert expected_tokens(10 ** 6, 512, 128, sched, autoregressive=True) == 65_536_000_000
    assert masking_factor(sched) == 0.5
    cosine = NoiseSchedule(kind=ScheduleKind.COSINE)
    assert masking_factor(cosine) == pytest.approx(1.0 - 2.0 / math.pi, abs=1e-6)


def test_bayes_ppl_on_uniform_data(vocab2, sched, uniform_lines):
    bayes = BayesDenoiser(DataDistribution.uniform(vocab2, 3))
    quad = eval_ppl(bayes, uniform_lines, sched, ObjectiveVariant(), estimator="quadrature", n_nodes=32)
    assert quad.ppl == pytest.approx(2.0, abs=1e-3)
    assert quad.n_lines == 8
    exact = eval_ppl(bayes, uniform_lines, sched, ObjectiveVariant(kind=ObjectiveKind.RB2, T=5),
                     estimator="quadrature")
    assert exact.nats_per_token == pytest.approx(math.log(2.0), abs=1e-12)
    assert exact.estimator == "exhaustive"


def test_eval_is_seed_deterministic_across_threads(random_subs, sched, uniform_lines):
    variant = ObjectiveVariant(kind=ObjectiveKind.RB2_RB1, T=8)
    one = eval_ppl(random_subs, uniform_lines, sched, variant, n_samples=4, seed=3, threads=1)
    four = eval_ppl(random_subs, uniform_lines, sched, variant, n_samples=4, seed=3, threads=4)
    assert one.nats_per_token == four.nats_per_token
    assert one.std_error > 0


def test_eval_rejects_mismatched_corpus(random_subs, sched):
    with pytest.raises(ShapeError):
        eval_ppl(random_subs, np.zeros((2, 5), dtype=np.int64), sched, ObjectiveVariant())
    with pytest.raises(EmptyInput):
        eval_ppl(random_subs, np.zeros((0, 3), dtype=np.int64), sched, ObjectiveVariant())


def test_zero_shot_rows(random_subs, sched, uniform_lines):
    rows = zero_shot(random_subs, [("a", uniform_lines, "abc"), ("b", uniform_lines[:2], None)], sched,
                     ObjectiveVariant(), n_samples=2)
    assert [r.corpus for r in rows] == ["a", "b"]
    assert rows[0].manifest_hash == "abc" and rows[1].manifest_hash is None
    with pytest.raises(EmptyInput):
        zero_shot(random_subs, [], sched, ObjectiveVariant())


def test_judge_scores_generator_samples(vocab2, rng):
    gen = corpus_service.build_generator("uniform", 2, 4, seed=0)
    samples = uniform_samples(10, 4, vocab2, rng)
    assert judge_nll_per_token(gen, samples, vocab2) == pytest.approx(math.log(2.0))


class _Toy(BaseModel):
    name: str
    value: float
    timings: dict = {}


def test_reports_are_canonical(tmp_path):
    a = _Toy(name="x", value=1.5, timings={"s": 0.1})
    b = _Toy(name="x", value=1.5, timings={"s": 9.0})
    assert report_digest(a) == report_digest(b)
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'
    with pytest.raises(ValueError):
        canonical_json({"v": float("nan")})
    path = write_report(a, tmp_path, "toy")
    assert json.loads(path.read_text())["value"] == 1.5
    assert (tmp_path / "report.schema.json").exists()
