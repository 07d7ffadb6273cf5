# services/categorical.py

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, logsumexp

from services.errors import DataContainsMask, InvalidDistribution, MaskQueryError, ShapeError

logger = logging.getLogger(__name__)

MASK_SYMBOL = "<mask>"
SIMPLEX_TOL = 1e-12

# A token sequence is a 1-D integer array of category indices.
TokenSeq = np.ndarray


@dataclass(frozen=True)
class Vocabulary:
    K: int
    mask_index: int
    symbols: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.K < 2:
            raise InvalidDistribution(f"vocabulary needs K >= 2, got {self.K}")
        if not 0 <= self.mask_index < self.K:
            raise InvalidDistribution(f"mask_index {self.mask_index} outside [0, {self.K})")
        if self.symbols and len(self.symbols) != self.K:
            raise ShapeError(f"{len(self.symbols)} symbols for K={self.K}")

    @classmethod
    def with_data_size(cls, k_data: int) -> "Vocabulary":
        symbols = tuple(f"t{i}" for i in range(k_data)) + (MASK_SYMBOL,)
        return cls(K=k_data + 1, mask_index=k_data, symbols=symbols)

    @property
    def k_data(self) -> int:
        return self.K - 1

    @property
    def data_tokens(self) -> np.ndarray:
        return np.array([i for i in range(self.K) if i != self.mask_index], dtype=np.int64)

    def data_index(self, tokens) -> np.ndarray:
        """Position of each (non-mask) token among the K-1 data columns."""
        tokens = np.asarray(tokens, dtype=np.int64)
        return tokens - (tokens > self.mask_index)

    def symbol(self, index: int) -> str:
        if self.symbols:
            return self.symbols[index]
        return MASK_SYMBOL if index == self.mask_index else str(index)

    def detokenize(self, tokens) -> str:
        return " ".join(self.symbol(int(i)) for i in tokens)

    # ---- vocabulary file: one symbol per line, last line is the mask ----

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines or lines[-1] != MASK_SYMBOL:
            raise InvalidDistribution(f"vocabulary file {path} must end with {MASK_SYMBOL}")
        return cls(K=len(lines), mask_index=len(lines) - 1, symbols=tuple(lines))

    def to_file(self, path: str | Path) -> None:
        symbols = self.symbols or tuple(self.symbol(i) for i in range(self.K))
        Path(path).write_text("\n".join(symbols) + "\n", encoding="utf-8")


def as_token_seq(tokens, vocab: Vocabulary, kind: str = "latent") -> TokenSeq:
    seq = np.asarray(tokens, dtype=np.int64)
    if seq.ndim != 1:
        raise ShapeError(f"token sequence must be 1-D, got shape {seq.shape}")
    if seq.size and (seq.min() < 0 or seq.max() >= vocab.K):
        raise ShapeError(f"token index outside [0, {vocab.K})")
    if kind == "data" and np.any(seq == vocab.mask_index):
        raise DataContainsMask("data sequence contains the mask token")
    return seq


def validate_simplex(p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 1 or p.shape[-1] == 0:
        raise InvalidDistribution("empty probability vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidDistribution("probabilities must be finite and nonnegative")
    err = np.max(np.abs(p.sum(axis=-1) - 1.0))
    if err > tol:
        raise InvalidDistribution(f"probabilities sum to 1 +/- {err:.3e}")
    return p


# ---- randomness ----

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; the same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(ss)) for ss in children]


def _inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf <= u[:, None]).sum(axis=-1)
    # Rounding can leave cdf[-1] just below u; fall back to the last supported index.
    last = p.shape[-1] - 1 - np.argmax(p[:, ::-1] > 0, axis=-1)
    return np.minimum(idx, last)


def sample_categorical(p, rng: np.random.Generator) -> int:
    p = validate_simplex(p)
    if p.ndim != 1:
        raise InvalidDistribution("sample_categorical takes a single probability vector")
    return int(_inverse_cdf(p[None, :], np.array([rng.random()]))[0])


def sample_categorical_rows(P, rng: np.random.Generator) -> np.ndarray:
    """One draw per row, rows consumed in ascending order."""
    P = validate_simplex(P)
    if P.ndim != 2:
        raise InvalidDistribution("expected a 2-D array of probability rows")
    if P.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _inverse_cdf(P, rng.random(P.shape[0])).astype(np.int64)


# ---- log space ----

def stable_log_softmax(logits, axis: int = -1) -> np.ndarray:
    return log_softmax(np.asarray(logits, dtype=np.float64), axis=axis)


def safe_log(p) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=np.float64))


def log_prob_of(log_p, target: int, mask_index: int | None = None) -> float:
    """log p_target from log-space scores (normalized or raw logits).

    Pass mask_index for SUBS-constrained outputs; querying it raises MaskQueryError.
    """
    log_p = np.asarray(log_p, dtype=np.float64)
    if not 0 <= target < log_p.shape[-1]:
        raise ShapeError(f"target {target} outside [0, {log_p.shape[-1]})")
    if mask_index is not None and target == mask_index:
        raise MaskQueryError("the mask category has zero probability under SUBS")
    return float(log_p[target] - logsumexp(log_p))
