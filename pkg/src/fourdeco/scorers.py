"""Incremental prefix scorers consumed by the beam searches.

Each scorer is bound to one utterance and caches its states by prefix, so
a prefix reached through different expansion orders always gets the same
state object (replay equivalence). Call counters feed the benchmark report.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import models
from .core import NEG_INF, log_sum_exp
from .models import ModelParams

Prefix = tuple[int, ...]


# ---------------------------------------------------------------- CTC, frame-synchronous


@dataclass(frozen=True)
class CtcPrefixState:
    """Mass of alignments of frames 1..t collapsing exactly to ``prefix``,
    split by whether the last frame was blank (``log_pb``) or not (``log_pn``)."""

    prefix: Prefix
    t: int
    log_pb: float
    log_pn: float

    @property
    def score(self) -> float:
        return float(np.logaddexp(self.log_pb, self.log_pn))

    @classmethod
    def initial(cls) -> "CtcPrefixState":
        return cls((), 0, 0.0, NEG_INF)


def ctc_frame_expand(state: CtcPrefixState, frame_logp: np.ndarray, symbol: int, t: int,
                     blank: int = 0) -> list[CtcPrefixState]:
    """Contributions of emitting ``symbol`` at frame ``t`` (1-based) from ``state``.

    Blank keeps the prefix. A label equal to the prefix's last token yields
    two contributions: a merged repeat that keeps the prefix and a genuine
    extension reachable only through a blank. Contributions to the same
    prefix must be merged with :func:`merge_ctc_states`.
    """
    if t != state.t + 1:
        raise ValueError(f"frame {t} does not follow frame {state.t}")
    lp = float(frame_logp[symbol])
    pre = state.prefix
    if symbol == blank:
        return [CtcPrefixState(pre, t, state.score + lp, NEG_INF)]
    ext = pre + (symbol,)
    if pre and pre[-1] == symbol:
        return [CtcPrefixState(pre, t, NEG_INF, state.log_pn + lp),
                CtcPrefixState(ext, t, NEG_INF, state.log_pb + lp)]
    return [CtcPrefixState(ext, t, NEG_INF, state.score + lp)]


def merge_ctc_states(states: Sequence[CtcPrefixState]) -> CtcPrefixState:
    first = states[0]
    if any(s.prefix != first.prefix or s.t != first.t for s in states):
        raise ValueError("can only merge states of one prefix at one frame")
    pb = log_sum_exp([s.log_pb for s in states])
    pn = log_sum_exp([s.log_pn for s in states])
    return CtcPrefixState(first.prefix, first.t, pb, pn)


def ctc_frame_step(states: Mapping[Prefix, CtcPrefixState], frame_logp: np.ndarray,
                   symbols: Sequence[int], t: int, blank: int = 0,
                   max_len: int | None = None) -> dict[Prefix, CtcPrefixState]:
    """Expand every state by every symbol in ``symbols`` and merge by prefix.

    Contributions with zero mass are dropped.
    """
    buckets: dict[Prefix, list[CtcPrefixState]] = {}
    for st in states.values():
        for z in symbols:
            for c in ctc_frame_expand(st, frame_logp, z, t, blank):
                # zero-mass contributions are not CTC alignments at all
                if c.log_pb == NEG_INF and c.log_pn == NEG_INF:
                    continue
                if max_len is not None and len(c.prefix) > max_len:
                    continue
                buckets.setdefault(c.prefix, []).append(c)
    return {p: merge_ctc_states(v) for p, v in buckets.items()}


# ---------------------------------------------------------------- CTC prefix score over all frames


class CtcPrefixScorer:
    """Probability that the label sequence starts with a given prefix, over all T frames.

    Keeps, per prefix, the forward vectors ``r_n[t]`` / ``r_b[t]`` (mass of
    frames 0..t collapsing exactly to the prefix, ending in non-blank / blank).
    """

    def __init__(self, log_posteriors: np.ndarray, blank: int = 0):
        self.lp = np.asarray(log_posteriors, dtype=np.float64)
        self.blank = blank
        self.T = self.lp.shape[0]
        self.calls = Counter()
        r_b = np.cumsum(self.lp[:, blank])
        r_n = np.full(self.T, NEG_INF)
        self._cache: dict[Prefix, tuple[np.ndarray, np.ndarray, float]] = {(): (r_n, r_b, 0.0)}
        self._cum_blank = np.concatenate([[0.0], r_b])

    def _state(self, prefix: Prefix):
        hit = self._cache.get(prefix)
        if hit is not None:
            return hit
        parent_rn, parent_rb, _ = self._state(prefix[:-1])
        c = prefix[-1]
        self.calls["ctc_steps"] += 1
        lp_c = self.lp[:, c]
        if len(prefix) > 1 and prefix[-2] == c:
            phi = parent_rb
        else:
            phi = np.logaddexp(parent_rn, parent_rb)
        # start[t]: mass entering the new label at frame t
        start = np.empty(self.T)
        start[0] = 0.0 if len(prefix) == 1 else NEG_INF
        start[1:] = phi[:-1]
        psi = log_sum_exp(start + lp_c)
        cum_c = np.concatenate([[0.0], np.cumsum(lp_c)])
        r_n = cum_c[1:] + np.logaddexp.accumulate(start - cum_c[:-1])
        # r_b[t] = lp_b[t] + logaddexp(r_b[t-1], r_n[t-1]) with r_b[0] = -inf
        enter = np.full(self.T, NEG_INF)
        enter[1:] = r_n[:-1]
        cb = self._cum_blank
        r_b = cb[1:] + np.logaddexp.accumulate(enter - cb[:-1])
        state = (r_n, r_b, psi)
        self._cache[prefix] = state
        return state

    def prefix_score(self, prefix: Sequence[int]) -> float:
        """log of the total mass of label sequences that begin with ``prefix``."""
        prefix = tuple(prefix)
        self.calls["ctc_calls"] += 1
        if len(prefix) > self.T:
            return NEG_INF
        return self._state(prefix)[2]

    def full_score(self, prefix: Sequence[int]) -> float:
        """log P_ctc(prefix) as a complete sequence."""
        prefix = tuple(prefix)
        if len(prefix) > self.T:
            return NEG_INF
        r_n, r_b, _ = self._state(prefix)
        return float(np.logaddexp(r_n[-1], r_b[-1]))


def ctc_prefix_score(prefix: Sequence[int], log_posteriors: np.ndarray, blank: int = 0) -> float:
    return CtcPrefixScorer(log_posteriors, blank).prefix_score(prefix)


# ---------------------------------------------------------------- RNN-T


@dataclass(frozen=True)
class RnntDecState:
    """Prediction-network state after consuming ``sos`` and ``prefix``."""

    prefix: Prefix
    g: np.ndarray
    last: int

    def advance(self, params: ModelParams, symbol: int, blank: int = 0) -> "RnntDecState":
        if symbol == blank:
            return self
        return RnntDecState(self.prefix + (symbol,), models.pred_step(params, self.g, symbol), symbol)

    @classmethod
    def initial(cls, params: ModelParams) -> "RnntDecState":
        sos = params.cfg.vocab.sos_id
        return cls((), models.pred_step(params, None, sos), sos)


def rnnt_step(params: ModelParams, state: RnntDecState, h_t: np.ndarray) -> np.ndarray:
    """Joint-network log-distribution over blank and tokens for one frame."""
    hp = h_t @ params["joint.Wh"]
    return models.log_softmax(models.joint_logits(params, hp, state.g))


class RnntScorer:
    """Per-utterance transducer scorer with prefix-keyed prediction states.

    Joint log-probabilities are computed for all frames of a prefix at once
    (``joint_logp(prefix)[t]``), which serves both the frame loop and the
    prefix lattices of the CTC-driven search.
    """

    def __init__(self, params: ModelParams, H: np.ndarray):
        self.params = params
        self.H = H
        self.T = H.shape[0]
        self.blank = params.cfg.vocab.blank_id
        self.Hp = models.joint_proj_enc(params, H)
        self.calls = Counter()
        self._states: dict[Prefix, RnntDecState] = {(): RnntDecState.initial(params)}
        self._joint: dict[Prefix, np.ndarray] = {}

    def state(self, prefix: Prefix) -> RnntDecState:
        st = self._states.get(prefix)
        if st is None:
            st = self.state(prefix[:-1]).advance(self.params, prefix[-1], self.blank)
            self.calls["pred_steps"] += 1
            self._states[prefix] = st
        return st

    def joint_logp(self, prefix: Prefix) -> np.ndarray:
        jl = self._joint.get(prefix)
        if jl is None:
            self.calls["joint_evals"] += 1
            g = self.state(prefix).g
            jl = models.log_softmax(models.joint_logits(self.params, self.Hp, g))
            self._joint[prefix] = jl
        return jl

    def frame_logp(self, prefix: Prefix, t: int) -> np.ndarray:
        """Distribution at 0-based frame ``t`` after emitting ``prefix``."""
        return self.joint_logp(prefix)[t]


def rnnt_transition_sum(prev: Mapping[Prefix, float], target: Prefix, t: int,
                        scorer: RnntScorer) -> float:
    """log mass of reaching ``target`` by the end of frame ``t`` (0-based) from
    hypotheses ending frame ``t-1``: each source emits the missing labels
    within frame ``t`` and then the frame-advancing blank."""
    target = tuple(target)
    sources = [(p, v) for p, v in prev.items() if target[:len(p)] == p]
    if not sources:
        raise ValueError("target is not reachable from any previous hypothesis")
    blank = scorer.blank
    scorer.calls["rnnt_calls"] += 1
    # label log-probs along the target within frame t
    steps = [scorer.frame_logp(target[:j], t)[target[j]] for j in range(len(target))]
    suffix = np.concatenate([[0.0], np.cumsum(steps[::-1])])[::-1] if steps else np.zeros(1)
    end_blank = scorer.frame_logp(target, t)[blank]
    terms = [v + suffix[len(p)] for p, v in sources]
    return log_sum_exp(terms) + end_blank


class RnntPrefixLattice:
    """Exact transducer forward variables restricted to one prefix.

    ``logA[s, t]`` is the log mass of emitting ``prefix[:s]`` within frames
    1..t with frame t closed by blank; ``logE[s, t]`` is the same before that
    blank. Columns are filled up to ``self.t``. ``score`` is ``logA[S, t]``.
    """

    def __init__(self, scorer: RnntScorer, prefix: Prefix, logA: np.ndarray, logE: np.ndarray, t: int):
        self.scorer = scorer
        self.prefix = prefix
        self.logA = logA
        self.logE = logE
        self.t = t

    @classmethod
    def initial(cls, scorer: RnntScorer) -> "RnntPrefixLattice":
        T = scorer.T
        logA = np.full((1, T + 1), NEG_INF)
        logA[0, 0] = 0.0
        return cls(scorer, (), logA, np.full((1, T + 1), NEG_INF), 0)

    @property
    def score(self) -> float:
        return float(self.logA[-1, self.t])

    def advance(self) -> "RnntPrefixLattice":
        """Add column ``t+1``: every emitted count, closed by blank."""
        sc = self.scorer
        t = self.t + 1
        S = len(self.prefix)
        sc.calls["rnnt_calls"] += 1
        blank_lp = np.array([sc.frame_logp(self.prefix[:s], t - 1)[sc.blank] for s in range(S + 1)])
        label_lp = np.array([sc.frame_logp(self.prefix[:s], t - 1)[self.prefix[s]] for s in range(S)])
        cum = np.concatenate([[0.0], np.cumsum(label_lp)])
        logA = self.logA.copy()
        logE = self.logE.copy()
        logE[:, t] = cum + np.logaddexp.accumulate(logA[:, t - 1] - cum)
        logA[:, t] = logE[:, t] + blank_lp
        return RnntPrefixLattice(sc, self.prefix, logA, logE, t)

    def extend(self, symbol: int) -> "RnntPrefixLattice":
        """Lattice of ``prefix + (symbol,)`` over the same frames 1..t."""
        sc = self.scorer
        S = len(self.prefix)
        new = self.prefix + (symbol,)
        T1 = self.logA.shape[1]
        rowA = np.full(T1, NEG_INF)
        rowE = np.full(T1, NEG_INF)
        if self.t > 0:
            into = self.logE[S, 1:self.t + 1] + sc.joint_logp(self.prefix)[:self.t, symbol]
            b = sc.joint_logp(new)[:self.t, sc.blank]
            # A[k] = b[k] + logaddexp(A[k-1], into[k]) with A[0] = -inf
            cb = np.concatenate([[0.0], np.cumsum(b)])
            rowA[1:self.t + 1] = cb[1:] + np.logaddexp.accumulate(into - cb[:-1])
            rowE[1:self.t + 1] = rowA[1:self.t + 1] - b
        logA = np.vstack([self.logA, rowA])
        logE = np.vstack([self.logE, rowE])
        return RnntPrefixLattice(sc, new, logA, logE, self.t)


# ---------------------------------------------------------------- attention


@dataclass(frozen=True)
class AttDecState:
    """Decoder state after consuming ``sos`` and ``prefix``.

    ``logp_next`` is the distribution of the next output (attention columns),
    ``score`` the accumulated log P_att(prefix).
    """

    prefix: Prefix
    dec: tuple
    logp_next: np.ndarray
    score: float


class AttScorer:
    def __init__(self, params: ModelParams, H: np.ndarray):
        self.params = params
        self.H = H
        self.vocab = params.cfg.vocab
        self.calls = Counter()
        dec, lp = models.att_step(params, H, None, self.vocab.sos_id)
        self._states: dict[Prefix, AttDecState] = {(): AttDecState((), dec, lp, 0.0)}

    @staticmethod
    def col(token: int) -> int:
        return token - 1

    @property
    def eos_col(self) -> int:
        return self.vocab.eos_id - 1

    def state(self, prefix: Prefix) -> AttDecState:
        st = self._states.get(prefix)
        if st is None:
            st, _ = att_score(prefix, self.H, self.state(prefix[:-1]), self.params)
            self.calls["att_steps"] += 1
            self._states[prefix] = st
        return st

    def score(self, prefix: Prefix) -> float:
        """log P_att(prefix), without eos."""
        self.calls["att_calls"] += 1
        return self.state(tuple(prefix)).score

    def eos_score(self, prefix: Prefix) -> float:
        return float(self.state(tuple(prefix)).logp_next[self.eos_col])

    def next_logp(self, prefix: Prefix) -> np.ndarray:
        return self.state(tuple(prefix)).logp_next


def att_score(prefix: Sequence[int], H: np.ndarray, state: AttDecState,
              params: ModelParams) -> tuple[AttDecState, float]:
    """One teacher-forced step: log P(prefix[-1] | prefix[:-1], H) and the successor state."""
    prefix = tuple(prefix)
    if len(prefix) != len(state.prefix) + 1 or prefix[:-1] != state.prefix:
        raise ValueError("prefix must extend the state's prefix by exactly one token")
    tok = prefix[-1]
    inc = float(state.logp_next[tok - 1])
    dec, lp = models.att_step(params, H, state.dec, tok)
    return AttDecState(prefix, dec, lp, state.score + inc), inc
