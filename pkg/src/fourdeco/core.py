"""Domain types and numeric primitives shared across the package.

All probabilities are natural-log values; ``-inf`` is an exact zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

NEG_INF = -math.inf

T_ = TypeVar("T_")


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory with the four special symbols.

    The canonical layout built by :meth:`build` is::

        0           blank
        1..K        real tokens
        K+1         eos
        K+2         sos
        K+3         mask

    so CTC/RNN-T outputs are ids ``0..K``, attention outputs are ids ``1..K+1``
    (tokens and eos) and MLM outputs are ids ``1..K``.
    """

    tokens: tuple[str, ...]
    blank_id: int
    sos_id: int
    eos_id: int
    mask_id: int

    def __post_init__(self):
        specials = (self.blank_id, self.sos_id, self.eos_id, self.mask_id)
        if len(set(specials)) != 4:
            raise ValueError("special token ids must be distinct")
        if any(not 0 <= i < len(self.tokens) for i in specials):
            raise ValueError("special token id out of range")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token strings must be unique")

    @classmethod
    def build(cls, symbols: Sequence[str]) -> "Vocabulary":
        syms = tuple(symbols)
        k = len(syms)
        return cls(("<blank>",) + syms + ("<eos>", "<sos>", "<mask>"), 0, k + 2, k + 1, k + 3)

    @classmethod
    def of_size(cls, k: int) -> "Vocabulary":
        return cls.build([f"t{i}" for i in range(k)])

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_tokens(self) -> int:
        """Number of real (non-special) tokens."""
        return len(self.tokens) - 4

    @property
    def is_canonical(self) -> bool:
        k = self.n_tokens
        return (self.blank_id, self.eos_id, self.sos_id, self.mask_id) == (0, k + 1, k + 2, k + 3)

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        index = {t: i for i, t in enumerate(self.tokens)}
        return tuple(index[w] for w in words)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]

    def __init__(self, ids: Iterable[int] = (), blank_id: int | None = 0):
        ids = tuple(int(i) for i in ids)
        if blank_id is not None and blank_id in ids:
            raise ValueError("token sequence must not contain blank")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


@dataclass(frozen=True)
class FeatureSeq:
    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError("features must be a (frames, dim) matrix with at least one frame")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "frames", f)


@dataclass(frozen=True)
class EncodedSeq:
    states: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.states, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 1:
            raise ValueError("encoded states must be a (T, D) matrix with T >= 1")
        if not np.all(np.isfinite(h)):
            raise ValueError("encoded states must be finite")
        object.__setattr__(self, "states", h)

    @property
    def T(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class AlignmentSeq:
    labels: tuple[int, ...]
    kind: str = "ctc"
    blank_id: int = 0

    def __post_init__(self):
        if self.kind not in ("ctc", "rnnt"):
            raise ValueError(f"unknown alignment kind {self.kind!r}")
        if self.kind == "rnnt" and self.labels and self.labels[-1] != self.blank_id:
            raise ValueError("rnnt alignment must end in blank")

    @property
    def n_frames(self) -> int:
        if self.kind == "ctc":
            return len(self.labels)
        return sum(1 for z in self.labels if z == self.blank_id)


@dataclass(frozen=True)
class DecoderWeights:
    """Decoding weights, normalized to sum to one at construction."""

    mu_ctc: float
    mu_att: float
    mu_rnnt: float

    def __post_init__(self):
        w = (self.mu_ctc, self.mu_att, self.mu_rnnt)
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise ValueError("decoder weights must be finite and nonnegative")
        total = sum(w)
        if total <= 0:
            raise ValueError("decoder weights must not all be zero")
        for name, x in zip(("mu_ctc", "mu_att", "mu_rnnt"), w):
            object.__setattr__(self, name, x / total)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.mu_ctc, self.mu_att, self.mu_rnnt)

    def combine(self, ctc: float, att: float, rnnt: float) -> float:
        # zero weights are skipped so that 0 * -inf never yields nan
        return weighted_sum((self.mu_ctc, self.mu_att, self.mu_rnnt), (ctc, att, rnnt))


@dataclass(frozen=True)
class BeamConfig:
    k_beam: int = 4
    k_pre: int = 6
    max_output_len: int = 32
    length_norm: bool = False

    def __post_init__(self):
        if self.k_beam < 1 or self.k_pre < 1:
            raise ValueError("k_beam and k_pre must be >= 1")
        if self.max_output_len < 0:
            raise ValueError("max_output_len must be >= 0")


@dataclass
class Hypothesis:
    """A beam entry: prefix plus per-decoder log scores and cached scorer states."""

    prefix: tuple[int, ...]
    score_ctc: float = 0.0
    score_att: float = 0.0
    score_rnnt: float = 0.0
    joint_score: float = 0.0
    ctc_state: object = None
    rnnt_state: object = None
    att_state: object = None
    extra: dict = field(default_factory=dict)


def weighted_sum(weights: Sequence[float], values: Sequence[float]) -> float:
    total = 0.0
    for w, v in zip(weights, values):
        if w != 0.0:
            total += w * v
    return total


def log_sum_exp(values: Iterable[float]) -> float:
    """Stable ``log(sum(exp(values)))``; ``-inf`` for all-``-inf`` input."""
    vals = list(values)
    if not vals:
        raise ValueError("log_sum_exp of an empty list")
    m = max(vals)
    if m == NEG_INF:
        return NEG_INF
    if m == math.inf:
        return math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in vals))


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def collapse(alignment: AlignmentSeq, vocab: Vocabulary | None = None) -> TokenSeq:
    """CTC many-to-one map: merge adjacent repeats, then drop blanks."""
    if alignment.kind != "ctc":
        raise ValueError("collapse is defined for ctc alignments only")
    blank = vocab.blank_id if vocab is not None else alignment.blank_id
    out = []
    prev = None
    for z in alignment.labels:
        if z != prev and z != blank:
            out.append(z)
        prev = z
    return TokenSeq(out, blank_id=blank)


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, dict[str, int]]:
    """Levenshtein distance with unit costs and a sub/ins/del breakdown."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # cost, subs, ins, dels
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            d, s, a, r = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = (d, s, a, r)
            else:
                best = (d + 1, s + 1, a, r)
            d, s, a, r = cur[j - 1]
            if d + 1 < best[0]:
                best = (d + 1, s, a + 1, r)
            d, s, a, r = prev[j]
            if d + 1 < best[0]:
                best = (d + 1, s, a, r + 1)
            cur.append(best)
        prev = cur
    dist, subs, ins, dels = prev[m]
    return dist, {"sub": subs, "ins": ins, "del": dels}


def error_rate(ref: Sequence, hyp: Sequence) -> float:
    return edit_distance(ref, hyp)[0] / max(1, len(ref))


def top_k(items: Iterable[T_], k: int, score: Callable[[T_], float],
          key: Callable[[T_], Sequence[int]]) -> list[T_]:
    """The ``k`` best items by ``score``; ties go to the lexicographically smaller key."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(items, key=lambda it: (-score(it), tuple(key(it))))
    return ranked[:k]
