"""Exact dynamic-programming losses, their analytic gradients, and the
multitask combiner.

Every loss takes pre-softmax logits (log-posteriors are accepted too, since
``log_softmax`` is idempotent on them) and returns a negative log-likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import NEG_INF, log_softmax, weighted_sum


@dataclass(frozen=True)
class TrainWeights:
    """Multitask weights in (ctc, rnnt, att, mlm) order, normalized to sum to one."""

    lambda_ctc: float
    lambda_rnnt: float
    lambda_att: float
    lambda_mlm: float

    def __post_init__(self):
        w = self.as_tuple()
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise ValueError("training weights must be finite and nonnegative")
        total = sum(w)
        if total <= 0:
            raise ValueError("training weights must not all be zero")
        for name, x in zip(("lambda_ctc", "lambda_rnnt", "lambda_att", "lambda_mlm"), w):
            object.__setattr__(self, name, x / total)

    @classmethod
    def uniform(cls) -> "TrainWeights":
        return cls(0.25, 0.25, 0.25, 0.25)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_ctc, self.lambda_rnnt, self.lambda_att, self.lambda_mlm)


@dataclass(frozen=True)
class MaskedBatch:
    full_seq: tuple[int, ...]
    mask_positions: tuple[int, ...]

    def __post_init__(self):
        S = len(self.full_seq)
        pos = tuple(sorted(set(int(p) for p in self.mask_positions)))
        if any(not 0 <= p < S for p in pos):
            raise ValueError("mask position out of range")
        if S >= 1 and not pos:
            raise ValueError("at least one position must be masked")
        object.__setattr__(self, "mask_positions", pos)

    @property
    def observed_positions(self) -> tuple[int, ...]:
        m = set(self.mask_positions)
        return tuple(i for i in range(len(self.full_seq)) if i not in m)

    def masked_input(self, mask_id: int) -> tuple[int, ...]:
        m = set(self.mask_positions)
        return tuple(mask_id if i in m else t for i, t in enumerate(self.full_seq))


class CtcResult(NamedTuple):
    nll: float
    feasible: bool


# ---------------------------------------------------------------- CTC


def ctc_min_frames(y: Sequence[int]) -> int:
    """Shortest alignment length for ``y``: one frame per label plus a blank between repeats."""
    y = list(y)
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def _ctc_extended(y: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(y) + 1, blank, dtype=np.int64)
    ext[1::2] = y
    return ext


def _ctc_alpha_beta(lp: np.ndarray, y: Sequence[int], blank: int):
    T = lp.shape[0]
    ext = _ctc_extended(y, blank)
    L = ext.size
    # skip transition s-2 -> s allowed for labels that differ from the previous label
    skip = np.zeros(L, dtype=bool)
    if L > 3:
        skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]  # (T, L)

    alpha = np.full((T, L), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if L > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    # beta[t, s]: mass of frames t+1..T-1 given state s at frame t
    beta = np.full((T, L), NEG_INF)
    beta[T - 1, L - 1] = 0.0
    if L > 1:
        beta[T - 1, L - 2] = 0.0
    skip_from = np.zeros(L, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_from[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    ends = [alpha[T - 1, L - 1]] + ([alpha[T - 1, L - 2]] if L > 1 else [])
    log_z = float(np.logaddexp.reduce(ends))
    return ext, alpha, beta, log_z


def ctc_forward(logits: np.ndarray, y: Sequence[int], blank: int = 0) -> CtcResult:
    """CTC negative log-likelihood with an explicit feasibility flag."""
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    y = list(y)
    if blank in y:
        raise ValueError("target must not contain blank")
    if ctc_min_frames(y) > lp.shape[0]:
        return CtcResult(math.inf, False)
    _, _, _, log_z = _ctc_alpha_beta(lp, y, blank)
    return CtcResult(-log_z, math.isfinite(log_z))


def ctc_loss(logits: np.ndarray, y: Sequence[int], blank: int = 0) -> float:
    """-log sum over all alignments of ``y``; ``+inf`` when ``y`` cannot fit in T frames."""
    return ctc_forward(logits, y, blank).nll


def ctc_grad(logits: np.ndarray, y: Sequence[int], blank: int = 0) -> np.ndarray:
    """Gradient of :func:`ctc_loss` with respect to the pre-softmax logits."""
    logits = np.asarray(logits, dtype=np.float64)
    lp = log_softmax(logits)
    y = list(y)
    if ctc_min_frames(y) > lp.shape[0]:
        raise ValueError("infeasible CTC target: too few frames")
    ext, alpha, beta, log_z = _ctc_alpha_beta(lp, y, blank)
    occ = np.exp(alpha + beta - log_z)  # (T, L)
    gamma = np.zeros_like(lp)
    np.add.at(gamma.T, ext, occ.T)
    return np.exp(lp) - gamma


# ---------------------------------------------------------------- RNN-T


def _rnnt_terms(logits: np.ndarray, y: Sequence[int], blank: int):
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(list(y), dtype=np.int64)
    if logits.ndim != 3:
        raise ValueError("rnnt lattice must be (T, S+1, V+1)")
    T, S1, _ = logits.shape
    if S1 != y.size + 1:
        raise ValueError(f"lattice has {S1 - 1} label steps but target has {y.size} labels")
    if T < 1:
        raise ValueError("lattice needs at least one frame")
    lp = log_softmax(logits)
    lp_blank = lp[:, :, blank]  # (T, S+1)
    lp_label = lp[:, np.arange(y.size), y] if y.size else np.zeros((T, 0))  # (T, S)
    return lp, lp_blank, lp_label


def _rnnt_alpha_beta(lp_blank: np.ndarray, lp_label: np.ndarray):
    T, S1 = lp_blank.shape
    # cum[t, s] = sum_{j<s} lp_label[t, j]
    cum = np.zeros((T, S1))
    if S1 > 1:
        cum[:, 1:] = np.cumsum(lp_label, axis=1)

    alpha = np.empty((T, S1))
    base = np.full(S1, NEG_INF)
    base[0] = 0.0
    for t in range(T):
        if t > 0:
            base = alpha[t - 1] + lp_blank[t - 1]
        alpha[t] = cum[t] + np.logaddexp.accumulate(base - cum[t])

    # beta[t, s]: completion mass from (t, s), including the blank that leaves frame t
    beta = np.empty((T, S1))
    after = np.full(S1, NEG_INF)
    after[-1] = 0.0
    for t in range(T - 1, -1, -1):
        v = cum[t] + lp_blank[t] + after
        beta[t] = np.logaddexp.accumulate(v[::-1])[::-1] - cum[t]
        after = beta[t]
    log_z = float(alpha[T - 1, S1 - 1] + lp_blank[T - 1, S1 - 1])
    return alpha, beta, log_z


def rnnt_loss(logits: np.ndarray, y: Sequence[int], blank: int = 0) -> float:
    """Transducer NLL over a (frame, emitted-count, symbol) lattice of joint logits.

    Paths start at (0, 0), label steps advance the emitted count, blank steps
    advance the frame, and the path must leave the last frame by a blank at
    (T-1, S): every path has exactly T blanks and S labels.
    """
    _, lp_blank, lp_label = _rnnt_terms(logits, y, blank)
    _, _, log_z = _rnnt_alpha_beta(lp_blank, lp_label)
    return -log_z


def rnnt_grad(logits: np.ndarray, y: Sequence[int], blank: int = 0) -> np.ndarray:
    """Gradient of :func:`rnnt_loss` with respect to the lattice logits."""
    lp, lp_blank, lp_label = _rnnt_terms(logits, y, blank)
    alpha, beta, log_z = _rnnt_alpha_beta(lp_blank, lp_label)
    T, S1, _ = lp.shape
    y = np.asarray(list(y), dtype=np.int64)

    beta_next = np.full((T, S1), NEG_INF)
    beta_next[:-1] = beta[1:]
    beta_next[-1, -1] = 0.0
    occ_blank = np.exp(alpha + lp_blank + beta_next - log_z)
    node = np.exp(alpha + beta - log_z)  # total occupancy of each lattice cell
    grad = np.exp(lp) * node[:, :, None]
    grad[:, :, blank] -= occ_blank
    if y.size:
        occ_label = np.exp(alpha[:, :-1] + lp_label + beta[:, 1:] - log_z)
        ts, ss = np.meshgrid(np.arange(T), np.arange(y.size), indexing="ij")
        np.subtract.at(grad, (ts, ss, y[ss]), occ_label)
    return grad


# ---------------------------------------------------------------- attention / MLM


def att_loss(step_logits: np.ndarray, y: Sequence[int], eos: int | None = None) -> float:
    """Teacher-forced cross-entropy: one step per label plus a final eos step.

    ``y`` and ``eos`` are column indices of ``step_logits``; ``eos`` defaults
    to the last column.
    """
    step_logits = np.asarray(step_logits, dtype=np.float64)
    eos = step_logits.shape[1] - 1 if eos is None else eos
    targets = list(y) + [eos]
    if step_logits.shape[0] != len(targets):
        raise ValueError(f"expected {len(targets)} decoder steps, got {step_logits.shape[0]}")
    lp = log_softmax(step_logits)
    return -float(lp[np.arange(len(targets)), targets].sum())


def att_grad(step_logits: np.ndarray, y: Sequence[int], eos: int | None = None) -> np.ndarray:
    step_logits = np.asarray(step_logits, dtype=np.float64)
    eos = step_logits.shape[1] - 1 if eos is None else eos
    targets = list(y) + [eos]
    g = np.exp(log_softmax(step_logits))
    g[np.arange(len(targets)), targets] -= 1.0
    return g


def _mlm_targets(batch: MaskedBatch, id_offset: int) -> np.ndarray:
    if not batch.mask_positions:
        raise ValueError("mlm loss needs at least one masked position")
    return np.array([batch.full_seq[p] - id_offset for p in batch.mask_positions])


def mlm_loss(masked_logits: np.ndarray, batch: MaskedBatch, id_offset: int = 0) -> float:
    """Mean cross-entropy over the masked positions only.

    Row ``i`` of ``masked_logits`` scores ``batch.mask_positions[i]``; token id
    ``v`` lives in column ``v - id_offset``.
    """
    targets = _mlm_targets(batch, id_offset)
    masked_logits = np.asarray(masked_logits, dtype=np.float64)
    if masked_logits.shape[0] != targets.size:
        raise ValueError("need one logit row per masked position")
    lp = log_softmax(masked_logits)
    return -float(lp[np.arange(targets.size), targets].mean())


def mlm_grad(masked_logits: np.ndarray, batch: MaskedBatch, id_offset: int = 0) -> np.ndarray:
    targets = _mlm_targets(batch, id_offset)
    g = np.exp(log_softmax(np.asarray(masked_logits, dtype=np.float64)))
    g[np.arange(targets.size), targets] -= 1.0
    return g / targets.size


def sample_masks(y: Sequence[int], rng_seed: int | np.random.Generator) -> MaskedBatch:
    """Draw the number of masks uniformly from 1..S, then that many positions without replacement."""
    y = tuple(y)
    S = len(y)
    if S == 0:
        raise ValueError("cannot mask an empty sequence")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = int(rng.integers(1, S + 1))
    pos = rng.choice(S, size=n, replace=False)
    return MaskedBatch(y, tuple(int(p) for p in pos))


def multitask_loss(weights: TrainWeights, l_ctc: float, l_rnnt: float, l_att: float,
                   l_mlm: float) -> float:
    return weighted_sum(weights.as_tuple(), (l_ctc, l_rnnt, l_att, l_mlm))
