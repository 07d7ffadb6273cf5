# services/denoiser.py

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, fields

import numpy as np

from services.categorical import (
    Vocabulary,
    as_token_seq,
    make_rng,
    safe_log,
    stable_log_softmax,
    validate_simplex,
)
from services.errors import DomainError, NumericalError, ShapeError, TooLarge, UnreachableLatent

logger = logging.getLogger(__name__)

N_TIME_FEATURES = 8
INIT_SCALE = 0.1
MAX_TABLE_SIZE = 10 ** 6


# ---------------------------------------------------------------------------
# SUBS parameterization
# ---------------------------------------------------------------------------

def subs_wrap(raw_logits: np.ndarray, z: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Zero the mask probability, then carry unmasked tokens over unchanged."""
    logits = np.array(raw_logits, dtype=np.float64)
    logits[..., vocab.mask_index] = -np.inf
    out = stable_log_softmax(logits, axis=-1)
    visible = np.flatnonzero(np.asarray(z) != vocab.mask_index)
    out[visible] = -np.inf
    out[visible, np.asarray(z)[visible]] = 0.0
    return out


class Denoiser(ABC):
    """x_theta(z_t, t): per-position log-probabilities over the K categories."""

    def __init__(self, vocab: Vocabulary, length: int, time_conditioned: bool = False,
                 subs: bool = True):
        self.vocab = vocab
        self.length = int(length)
        self.time_conditioned = bool(time_conditioned)
        self.subs = bool(subs)

    @abstractmethod
    def raw_logits(self, z: np.ndarray, t: float | None) -> np.ndarray:
        """Unconstrained (L, K) logits."""

    def _check_input(self, z, t):
        z = as_token_seq(z, self.vocab, kind="latent")
        if z.shape[0] != self.length:
            raise ShapeError(f"expected length {self.length}, got {z.shape[0]}")
        if self.time_conditioned and t is None:
            raise DomainError("time-conditioned denoiser needs t")
        return z

    def predict(self, z, t: float | None = None) -> np.ndarray:
        z = self._check_input(z, t)
        raw = self.raw_logits(z, t)
        if self.subs:
            return subs_wrap(raw, z, self.vocab)
        return stable_log_softmax(raw, axis=-1)


# ---------------------------------------------------------------------------
# Context-bag network
# ---------------------------------------------------------------------------

@dataclass
class ContextBagParams:
    embed: np.ndarray       # (L, K, d_emb), one row per (position, token) incl. mask
    w_hidden: np.ndarray    # (d_hidden, d_emb)
    b_hidden: np.ndarray    # (d_hidden,)
    w_out: np.ndarray       # (L, K-1, d_hidden)
    b_out: np.ndarray       # (L, K-1)
    w_time: np.ndarray      # (d_emb, N_TIME_FEATURES)

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ContextBagParams":
        return cls(**{name: np.asarray(arrays[name], dtype=np.float64) for name in cls.names()})

    def zeros_like(self) -> "ContextBagParams":
        return ContextBagParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def copy(self) -> "ContextBagParams":
        return ContextBagParams(**{k: v.copy() for k, v in self.arrays().items()})

    @property
    def shape_info(self) -> tuple[int, int, int, int]:
        """(K, L, d_emb, d_hidden)"""
        L, K, d_emb = self.embed.shape
        return K, L, d_emb, self.w_hidden.shape[0]

    def validate(self, vocab: Vocabulary, length: int) -> None:
        K, L, d_emb, d_hidden = self.shape_info
        expected = {
            "embed": (length, vocab.K, d_emb),
            "w_hidden": (d_hidden, d_emb),
            "b_hidden": (d_hidden,),
            "w_out": (length, vocab.K - 1, d_hidden),
            "b_out": (length, vocab.K - 1),
            "w_time": (d_emb, N_TIME_FEATURES),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"{name} has shape {actual}, expected {shape}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"{name} has non-finite entries")


def init_params(vocab: Vocabulary, length: int, d_emb: int, d_hidden: int, seed: int,
                zero: bool = False) -> ContextBagParams:
    shapes = {
        "embed": (length, vocab.K, d_emb),
        "w_hidden": (d_hidden, d_emb),
        "b_hidden": (d_hidden,),
        "w_out": (length, vocab.K - 1, d_hidden),
        "b_out": (length, vocab.K - 1),
        "w_time": (d_emb, N_TIME_FEATURES),
    }
    if zero:
        return ContextBagParams(**{k: np.zeros(v) for k, v in shapes.items()})
    rng = make_rng(seed)
    arrays = {}
    for name, shape in shapes.items():
        if name.startswith("b_"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    return ContextBagParams(**arrays)


def time_features(t) -> np.ndarray:
    """Sinusoidal features sin/cos(pi * 2^k * t), k = 0..3."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * 2.0 ** np.arange(N_TIME_FEATURES // 2)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class TrainingBatch:
    x: np.ndarray        # (B, L) clean data
    z: np.ndarray        # (B, L) latents
    t: np.ndarray        # (B,)
    weight: np.ndarray   # (B,) NELBO coefficient per element

    def __len__(self):
        return self.x.shape[0]


def _forward(params: ContextBagParams, z: np.ndarray, t: np.ndarray | None,
             time_conditioned: bool):
    L = z.shape[1]
    c = params.embed[np.arange(L)[None, :], z].sum(axis=1)
    feats = None
    if time_conditioned:
        feats = time_features(t)
        c = c + np.einsum("bf,df->bd", feats, params.w_time)
    h = np.tanh(np.einsum("bd,hd->bh", c, params.w_hidden) + params.b_hidden)
    logits = np.einsum("bh,lkh->blk", h, params.w_out) + params.b_out
    return c, feats, h, logits


def loss_and_grad(params: ContextBagParams, batch: TrainingBatch, vocab: Vocabulary,
                  time_conditioned: bool) -> tuple[float, ContextBagParams]:
    """Sum over the batch of weight * sum_l log <x_theta^l, x^l>, with its gradient.

    Only masked positions contribute; carried-over positions have log 1 = 0.
    """
    z = np.asarray(batch.z, dtype=np.int64)
    x = np.asarray(batch.x, dtype=np.int64)
    weight = np.asarray(batch.weight, dtype=np.float64)
    B, L = z.shape
    c, feats, h, logits = _forward(params, z, batch.t, time_conditioned)
    logp = stable_log_softmax(logits, axis=-1)
    masked = z == vocab.mask_index
    target = vocab.data_index(np.where(masked, x, 0))
    lp_target = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    lp_target = np.where(masked, lp_target, 0.0)
    loss = float(np.einsum("b,b->", weight, lp_target.sum(axis=1)))
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")

    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    g_logits = weight[:, None, None] * (onehot - np.exp(logp)) * masked[..., None]

    grad = params.zeros_like()
    grad.w_out = np.einsum("blk,bh->lkh", g_logits, h)
    grad.b_out = g_logits.sum(axis=0)
    d_pre = np.einsum("blk,lkh->bh", g_logits, params.w_out) * (1.0 - h * h)
    grad.w_hidden = np.einsum("bh,bd->hd", d_pre, c)
    grad.b_hidden = d_pre.sum(axis=0)
    d_c = np.einsum("bh,hd->bd", d_pre, params.w_hidden)
    positions = np.broadcast_to(np.arange(L)[None, :], (B, L))
    np.add.at(grad.embed, (positions, z), np.broadcast_to(d_c[:, None, :], (B, L, d_c.shape[1])))
    if time_conditioned:
        grad.w_time = np.einsum("bd,bf->df", d_c, feats)
    return loss, grad


class ContextBagDenoiser(Denoiser):
    """Bag of (position, token) embeddings -> tanh hidden layer -> per-position logits."""

    def __init__(self, params: ContextBagParams, vocab: Vocabulary, time_conditioned: bool = False):
        K, L, _, _ = params.shape_info
        super().__init__(vocab, L, time_conditioned=time_conditioned, subs=True)
        params.validate(vocab, L)
        self.params = params

    def raw_logits(self, z, t):
        t_arr = None if t is None else np.array([t], dtype=np.float64)
        _, _, _, logits = _forward(self.params, z[None, :], t_arr, self.time_conditioned)
        return np.insert(logits[0], self.vocab.mask_index, 0.0, axis=-1)

    def loss_and_grad(self, batch: TrainingBatch) -> tuple[float, ContextBagParams]:
        return loss_and_grad(self.params, batch, self.vocab, self.time_conditioned)


def check_gradients(params: ContextBagParams, batch: TrainingBatch, vocab: Vocabulary,
                    time_conditioned: bool, h: float = 1e-5, max_coords: int = 200,
                    rng: np.random.Generator | None = None) -> float:
    """max |analytic - central difference| / max |analytic| over sampled coordinates."""
    _, grad = loss_and_grad(params, batch, vocab, time_conditioned)
    rng = rng or make_rng(0)
    worst = 0.0
    scale = max(max(np.max(np.abs(g)) for g in grad.arrays().values()), 1e-12)
    for name, value in params.arrays().items():
        if name == "w_time" and not time_conditioned:
            continue
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g_flat = getattr(grad, name).reshape(-1)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + h
            up, _ = loss_and_grad(params, batch, vocab, time_conditioned)
            flat[i] = saved - h
            down, _ = loss_and_grad(params, batch, vocab, time_conditioned)
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, abs(numeric - g_flat[i]))
    rel = worst / scale
    logger.debug(f"[Denoiser] gradient check rel_error={rel:.3e}")
    return rel


# ---------------------------------------------------------------------------
# Exact Bayes denoiser over an explicit data distribution
# ---------------------------------------------------------------------------

@dataclass
class DataDistribution:
    """Explicit table of data sequences and their probabilities."""

    vocab: Vocabulary
    length: int
    sequences: np.ndarray   # (N, L) token ids, no masks
    probs: np.ndarray       # (N,)

    def __post_init__(self):
        if self.vocab.k_data ** self.length > MAX_TABLE_SIZE:
            raise TooLarge(f"{self.vocab.k_data}^{self.length} sequences exceeds {MAX_TABLE_SIZE}")
        self.sequences = np.asarray(self.sequences, dtype=np.int64).reshape(-1, self.length)
        self.probs = validate_simplex(self.probs)
        if self.sequences.shape[0] != self.probs.shape[0]:
            raise ShapeError("one probability per sequence is required")
        if np.any(self.sequences == self.vocab.mask_index):
            raise ShapeError("data sequences cannot contain the mask token")

    @staticmethod
    def enumerate_sequences(vocab: Vocabulary, length: int) -> np.ndarray:
        if vocab.k_data ** length > MAX_TABLE_SIZE:
            raise TooLarge(f"{vocab.k_data}^{length} sequences exceeds {MAX_TABLE_SIZE}")
        return np.array(list(itertools.product(vocab.data_tokens, repeat=length)),
                        dtype=np.int64).reshape(-1, length)

    @classmethod
    def uniform(cls, vocab: Vocabulary, length: int) -> "DataDistribution":
        seqs = cls.enumerate_sequences(vocab, length)
        return cls(vocab, length, seqs, np.full(len(seqs), 1.0 / len(seqs)))

    @classmethod
    def from_support(cls, vocab: Vocabulary, sequences, weights=None) -> "DataDistribution":
        seqs = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
        w = np.ones(len(seqs)) if weights is None else np.asarray(weights, dtype=np.float64)
        return cls(vocab, seqs.shape[1], seqs, w / w.sum())

    def prob_of(self, x) -> float:
        hits = np.all(self.sequences == np.asarray(x)[None, :], axis=1)
        return float(self.probs[hits].sum())

    def log_prob(self, x) -> float:
        return float(safe_log(self.prob_of(x)))


class BayesDenoiser(Denoiser):
    """q(x^l | z_t) by enumeration; the mask-pattern likelihood cancels."""

    def __init__(self, dist: DataDistribution):
        super().__init__(dist.vocab, dist.length, time_conditioned=False, subs=True)
        self.dist = dist
        self._cache: dict[bytes, np.ndarray] = {}

    def raw_logits(self, z, t):
        return self.predict(z, t)

    def predict(self, z, t=None):
        z = self._check_input(z, t)
        key = z.tobytes()
        if key in self._cache:
            return self._cache[key].copy()
        masked = z == self.vocab.mask_index
        compatible = np.all((self.dist.sequences == z[None, :]) | masked[None, :], axis=1)
        weights = self.dist.probs * compatible
        total = weights.sum()
        if total <= 0.0:
            raise UnreachableLatent("latent is inconsistent with the data distribution")
        probs = np.zeros((self.length, self.vocab.K))
        for pos in range(self.length):
            if masked[pos]:
                probs[pos] = np.bincount(self.dist.sequences[:, pos], weights=weights,
                                         minlength=self.vocab.K) / total
            else:
                probs[pos, z[pos]] = 1.0
        out = safe_log(probs)
        self._cache[key] = out
        return out.copy()


def exact_bayes_denoiser(p_data: DataDistribution, z, t: float | None = None) -> np.ndarray:
    return BayesDenoiser(p_data).predict(z, t)


# ---------------------------------------------------------------------------
# Random table denoiser for tiny instances
# ---------------------------------------------------------------------------

class RandomTableDenoiser(Denoiser):
    """Independent Gaussian logits for every latent sequence, optionally linear in t."""

    def __init__(self, vocab: Vocabulary, length: int, seed: int, scale: float = 2.0,
                 subs: bool = True, time_conditioned: bool = False):
        super().__init__(vocab, length, time_conditioned=time_conditioned, subs=subs)
        self.seed = int(seed)
        self.scale = float(scale)
        self._tables: dict[bytes, np.ndarray] = {}

    def _table(self, z: np.ndarray) -> np.ndarray:
        key = z.tobytes()
        if key not in self._tables:
            code = int(np.ravel_multi_index(tuple(z), (self.vocab.K,) * self.length))
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, code])))
            self._tables[key] = rng.normal(0.0, self.scale, size=(2, self.length, self.vocab.K))
        return self._tables[key]

    def raw_logits(self, z, t):
        table = self._table(z)
        if self.time_conditioned:
            return table[0] + 4.0 * float(t) * table[1]
        return table[0]
