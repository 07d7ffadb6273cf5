# services/corpus_service.py

import hashlib
import json
import logging
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, Field, TypeAdapter, ValidationError, field_validator, model_validator
from scipy.special import logsumexp, xlogy

from services.categorical import Vocabulary, make_rng, safe_log
from services.denoiser import DataDistribution
from services.errors import ConfigError, DataContainsMask, EmptyInput, ShapeError

logger = logging.getLogger(__name__)

CORPUS_FILE = "corpus.txt"
EVAL_FILE = "eval.txt"
VOCAB_FILE = "vocab.txt"
MANIFEST_FILE = "manifest.json"


# ---------------------------------------------------------------------------
# Generator manifests
# ---------------------------------------------------------------------------

class UniformGenerator(BaseModel):
    kind: Literal["uniform"] = "uniform"
    k_data: int = Field(..., ge=1)
    length: int = Field(..., ge=1)


class Markov1Generator(BaseModel):
    kind: Literal["markov1"] = "markov1"
    k_data: int = Field(..., ge=1)
    length: int = Field(..., ge=1)
    initial: list[float]
    transition: list[list[float]] = Field(..., description="row i: distribution of the next token after i")

    @field_validator("transition")
    @classmethod
    def _rows_are_distributions(cls, rows):
        for row in rows:
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise ValueError("each transition row must be a probability vector")
        return rows

    @model_validator(mode="after")
    def _tables_match_k_data(self):
        K = self.k_data
        if len(self.initial) != K or any(len(row) != K for row in self.transition) or len(self.transition) != K:
            raise ValueError(f"markov1 tables must be {K} and {K}x{K}")
        if any(p < 0 for p in self.initial) or abs(sum(self.initial) - 1.0) > 1e-9:
            raise ValueError("initial must be a probability vector")
        return self


class TemplatedGenerator(BaseModel):
    kind: Literal["templated"] = "templated"
    k_data: int = Field(..., ge=1)
    length: int = Field(..., ge=1)
    templates: list[list[int]]
    weights: list[float]
    noise: float = Field(0.1, ge=0.0, le=1.0, description="per-token chance of a uniform replacement")


GeneratorManifest = Annotated[Union[UniformGenerator, Markov1Generator, TemplatedGenerator],
                              Field(discriminator="kind")]
_manifest_adapter = TypeAdapter(GeneratorManifest)


def build_generator(kind: str, k_data: int, length: int, seed: int, concentration: float = 0.5,
                    n_templates: int = 4, noise: float = 0.1, initial: list[float] | None = None,
                    transition: list[list[float]] | None = None):
    """Draw a concrete generator (tables, templates) from its family, deterministically.

    For markov1, explicit `initial` / `transition` tables replace the Dirichlet draws.
    """
    if (initial is not None or transition is not None) and kind != "markov1":
        raise ConfigError(f"explicit initial/transition tables only apply to markov1, not {kind!r}")
    rng = make_rng(seed)
    if kind == "uniform":
        return UniformGenerator(k_data=k_data, length=length)
    if kind == "markov1":
        draw_initial = rng.dirichlet(np.full(k_data, max(concentration, 1.0)))
        table = rng.dirichlet(np.full(k_data, concentration), size=k_data)
        try:
            return Markov1Generator(
                k_data=k_data, length=length,
                initial=np.asarray(initial if initial is not None else draw_initial, dtype=np.float64).tolist(),
                transition=np.asarray(transition if transition is not None else table, dtype=np.float64).tolist())
        except (ValidationError, ValueError) as e:
            raise ConfigError(f"invalid markov1 tables: {e}") from e
    if kind == "templated":
        templates = rng.integers(0, k_data, size=(n_templates, length))
        weights = rng.dirichlet(np.ones(n_templates))
        return TemplatedGenerator(k_data=k_data, length=length, templates=templates.tolist(),
                                  weights=weights.tolist(), noise=noise)
    raise ConfigError(f"unknown generator kind {kind!r}")


def sample_corpus(gen, n: int, rng: np.random.Generator) -> np.ndarray:
    """n sequences of data-token indices in [0, k_data)."""
    L, K = gen.length, gen.k_data
    if gen.kind == "uniform":
        return rng.integers(0, K, size=(n, L))
    if gen.kind == "markov1":
        initial = np.asarray(gen.initial)
        cdf = np.cumsum(np.asarray(gen.transition), axis=1)
        out = np.empty((n, L), dtype=np.int64)
        out[:, 0] = np.minimum(np.searchsorted(np.cumsum(initial), rng.random(n), side="right"), K - 1)
        for pos in range(1, L):
            u = rng.random(n)
            out[:, pos] = np.minimum((cdf[out[:, pos - 1]] <= u[:, None]).sum(axis=1), K - 1)
        return out
    templates = np.asarray(gen.templates, dtype=np.int64)
    which = rng.choice(len(templates), size=n, p=np.asarray(gen.weights) / np.sum(gen.weights))
    out = templates[which].copy()
    noisy = rng.random((n, L)) < gen.noise
    out[noisy] = rng.integers(0, K, size=int(noisy.sum()))
    return out


def log_prob(gen, x) -> float:
    """Exact log-probability of one sequence of data-token indices."""
    x = np.asarray(x, dtype=np.int64)
    K = gen.k_data
    if gen.kind == "uniform":
        return -len(x) * float(np.log(K))
    if gen.kind == "markov1":
        trans = np.asarray(gen.transition)
        lp = float(safe_log(gen.initial[x[0]]))
        return lp + float(safe_log(trans[x[:-1], x[1:]]).sum())
    templates = np.asarray(gen.templates)
    if len(x) != gen.length:
        raise ShapeError(f"templated generator scores length {gen.length}, got {len(x)}")
    per_token = np.where(templates == x[None, :], 1.0 - gen.noise, 0.0) + gen.noise / K
    weights = np.asarray(gen.weights) / np.sum(gen.weights)
    return float(logsumexp(safe_log(per_token).sum(axis=1) + safe_log(weights)))


def entropy_per_sequence(gen) -> float | None:
    """Closed-form entropy where one exists (uniform, markov1)."""
    if gen.kind == "uniform":
        return gen.length * float(np.log(gen.k_data))
    if gen.kind == "markov1":
        initial = np.asarray(gen.initial)
        trans = np.asarray(gen.transition)
        row_entropy = -xlogy(trans, trans).sum(axis=1)
        total = float(-xlogy(initial, initial).sum())
        marginal = initial
        for _ in range(gen.length - 1):
            total += float(marginal @ row_entropy)
            marginal = marginal @ trans
        return total
    return None


def data_distribution(gen, vocab: Vocabulary) -> DataDistribution:
    """Explicit table over all k_data^L sequences (tiny generators only)."""
    seqs = DataDistribution.enumerate_sequences(vocab, gen.length)
    logp = np.array([log_prob(gen, to_data_indices(s, vocab)) for s in seqs])
    p = np.exp(logp)
    return DataDistribution(vocab, gen.length, seqs, p / p.sum())


# ---------------------------------------------------------------------------
# Token mapping and files
# ---------------------------------------------------------------------------

def to_tokens(data_indices: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    return vocab.data_tokens[np.asarray(data_indices, dtype=np.int64)]


def to_data_indices(tokens: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    return vocab.data_index(tokens)


def write_corpus(path: str | Path, tokens: np.ndarray) -> None:
    lines = [" ".join(str(int(v)) for v in row) for row in np.asarray(tokens)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: str | Path, vocab: Vocabulary) -> np.ndarray:
    rows = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not rows:
        raise EmptyInput(f"corpus {path} has no sequences")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ShapeError(f"corpus {path} mixes sequence lengths {sorted(lengths)}")
    corpus = np.array(rows, dtype=np.int64)
    if corpus.min() < 0 or corpus.max() >= vocab.K:
        raise ShapeError(f"corpus {path} has token ids outside [0, {vocab.K})")
    if np.any(corpus == vocab.mask_index):
        raise DataContainsMask(f"corpus {path} contains the mask token")
    return corpus


def manifest_json(gen) -> str:
    return json.dumps(gen.model_dump(mode="json"), sort_keys=True, indent=2)


def manifest_hash(gen) -> str:
    return hashlib.sha256(json.dumps(gen.model_dump(mode="json"), sort_keys=True).encode()).hexdigest()


def write_manifest(path: str | Path, gen) -> None:
    Path(path).write_text(manifest_json(gen) + "\n", encoding="utf-8")


def read_manifest(path: str | Path):
    try:
        return _manifest_adapter.validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read generator manifest {path}: {e}") from e


def gen_corpus(gen, n: int, n_eval: int, seed: int, out_dir: str | Path) -> dict[str, Path]:
    """Write corpus, held-out split, vocabulary and manifest; deterministic per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.with_data_size(gen.k_data)
    rng = make_rng(seed)
    train = to_tokens(sample_corpus(gen, n, rng), vocab)
    held_out = to_tokens(sample_corpus(gen, n_eval, rng), vocab)
    paths = {
        "corpus": out / CORPUS_FILE,
        "eval": out / EVAL_FILE,
        "vocab": out / VOCAB_FILE,
        "manifest": out / MANIFEST_FILE,
    }
    write_corpus(paths["corpus"], train)
    if n_eval:
        write_corpus(paths["eval"], held_out)
    else:
        # A leftover split from an earlier run would be picked up as held-out data.
        paths.pop("eval").unlink(missing_ok=True)
    vocab.to_file(paths["vocab"])
    write_manifest(paths["manifest"], gen)
    logger.info(f"[Corpus] wrote n={n} n_eval={n_eval} L={gen.length} kind={gen.kind} to {out}")
    return paths


def load_bundle(corpus_path: str | Path):
    """(corpus, vocab, manifest) from a corpus file and its sibling vocab/manifest files."""
    folder = Path(corpus_path).parent
    vocab_path = folder / VOCAB_FILE
    if not vocab_path.exists():
        raise ConfigError(f"no {VOCAB_FILE} next to {corpus_path}")
    vocab = Vocabulary.from_file(vocab_path)
    manifest_path = folder / MANIFEST_FILE
    gen = read_manifest(manifest_path) if manifest_path.exists() else None
    return read_corpus(corpus_path, vocab), vocab, gen
