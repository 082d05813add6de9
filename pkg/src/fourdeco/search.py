"""Decoding: single-decoder searches, joint CTC/RNN-T/attention searches,
Mask-CTC inference and an exhaustive oracle.

All searches are deterministic. Ties in every ranking are broken in favour
of the lexicographically smaller prefix.
"""
from __future__ import annotations

import itertools
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import losses, models
from .core import NEG_INF, BeamConfig, DecoderWeights, EncodedSeq, collapse, AlignmentSeq, log_sum_exp
from .models import ModelParams
from .scorers import (AttScorer, CtcPrefixScorer, CtcPrefixState, RnntPrefixLattice, RnntScorer,
                      ctc_frame_step)

Prefix = tuple[int, ...]

# exhaustive oracle refuses search spaces larger than this
BRUTE_FORCE_LIMIT = 200_000


@dataclass
class DecodeResult:
    best: Prefix
    n_best: list[tuple[Prefix, float]]
    stats: dict = field(default_factory=dict)

    @property
    def score(self) -> float:
        return self.n_best[0][1] if self.n_best else NEG_INF


def _as_array(H) -> np.ndarray:
    return H.states if isinstance(H, EncodedSeq) else np.asarray(H, dtype=np.float64)


def _top_symbols(logp: np.ndarray, k: int) -> list[int]:
    order = sorted(range(logp.size), key=lambda i: (-logp[i], i))
    return order[:k]


def _finish(scored: dict[Prefix, float], stats: dict, t0: float, length_norm: bool = False) -> DecodeResult:
    def key(p):
        s = scored[p]
        return s / max(1, len(p)) if length_norm else s
    order = sorted(scored, key=lambda p: (-key(p), p))
    n_best = [(p, key(p)) for p in order]
    stats["wall_time"] = time.perf_counter() - t0
    return DecodeResult(n_best[0][0] if n_best else (), n_best, stats)


def _merge_calls(*counters: Counter) -> dict:
    out = Counter()
    for c in counters:
        out.update(c)
    return dict(out)


# ---------------------------------------------------------------- CTC


def ctc_greedy(lattice: np.ndarray, blank: int = 0) -> DecodeResult:
    """Best-path decoding: per-frame argmax, then collapse."""
    t0 = time.perf_counter()
    lp = np.asarray(lattice)
    path = lp.argmax(axis=1)
    out = collapse(AlignmentSeq(tuple(int(z) for z in path), blank_id=blank)).ids
    score = float(lp[np.arange(lp.shape[0]), path].sum())
    return _finish({out: score}, {"expansions": lp.shape[0]}, t0)


def ctc_beam(lattice: np.ndarray, cfg: BeamConfig, blank: int = 0) -> DecodeResult:
    """Prefix beam search over the CTC lattice; scores are exact prefix masses at frame T."""
    t0 = time.perf_counter()
    lp = np.asarray(lattice)
    states = {(): CtcPrefixState.initial()}
    expansions = 0
    for t in range(1, lp.shape[0] + 1):
        symbols = _top_symbols(lp[t - 1], cfg.k_pre)
        ext = ctc_frame_step(states, lp[t - 1], symbols, t, blank, cfg.max_output_len)
        expansions += len(ext)
        keep = sorted(ext, key=lambda p: (-ext[p].score, p))[:cfg.k_beam]
        states = {p: ext[p] for p in keep}
    return _finish({p: s.score for p, s in states.items()}, {"expansions": expansions}, t0, cfg.length_norm)


# ---------------------------------------------------------------- transducer frame expansion


def _transducer_frame(prev: dict[Prefix, float], t: int, sc: RnntScorer, k_pre: int,
                      max_len: int, cap: int) -> tuple[dict[Prefix, float], int]:
    """One frame of the transducer expansion loop.

    ``prev`` maps prefixes to their log mass at the end of frame ``t-1``.
    Returns the log masses at the end of frame ``t`` (each closed by blank)
    and the number of pops.
    """
    blank = sc.blank
    # fold paths from shorter beam members into longer ones before expanding
    A: dict[Prefix, float] = {}
    for y, v in prev.items():
        terms = [v]
        for yh, vh in prev.items():
            if len(yh) < len(y) and y[:len(yh)] == yh:
                steps = sum(sc.frame_logp(y[:j], t)[y[j]] for j in range(len(yh), len(y)))
                terms.append(vh + steps)
        A[y] = log_sum_exp(terms)
    ext: dict[Prefix, float] = {}
    pops = 0
    while A and pops < cap:
        best = min(A, key=lambda p: (-A[p], p))
        if sum(1 for v in ext.values() if v > A[best]) >= k_pre:
            break
        e = A.pop(best)
        pops += 1
        lp = sc.frame_logp(best, t)
        if len(best) >= max_len:
            # a full-length hypothesis can only close the frame
            ext[best] = e + float(lp[blank])
            continue
        for z in _top_symbols(lp, k_pre):
            if z == blank:
                ext[best] = e + float(lp[z])
            else:
                child = best + (z,)
                if child in prev:
                    continue
                A[child] = e + float(lp[z])
    if pops >= cap:
        # iteration cap reached: close the unexpanded candidates with blank
        for p, v in A.items():
            ext[p] = v + float(sc.frame_logp(p, t)[blank])
    return ext, pops


def _loop_cap(cfg: BeamConfig) -> int:
    return cfg.k_pre * cfg.k_beam


def rnnt_beam(H, params: ModelParams, cfg: BeamConfig) -> DecodeResult:
    """Time-synchronous transducer beam search."""
    t0 = time.perf_counter()
    Ha = _as_array(H)
    sc = RnntScorer(params, Ha)
    hyps: dict[Prefix, float] = {(): 0.0}
    expansions = 0
    for t in range(Ha.shape[0]):
        ext, pops = _transducer_frame(hyps, t, sc, cfg.k_pre, cfg.max_output_len, _loop_cap(cfg))
        expansions += pops
        keep = sorted(ext, key=lambda p: (-ext[p], p))[:cfg.k_beam]
        hyps = {p: ext[p] for p in keep}
    return _finish(hyps, {"expansions": expansions, "calls": _merge_calls(sc.calls)}, t0, cfg.length_norm)


def rnnt_greedy(H, params: ModelParams, max_symbols_per_frame: int = 5, max_len: int = 1000) -> DecodeResult:
    """Emit the argmax symbol until blank, frame by frame.

    Blank is forced after ``max_symbols_per_frame`` labels in one frame and
    once the output reaches ``max_len``.
    """
    t0 = time.perf_counter()
    Ha = _as_array(H)
    sc = RnntScorer(params, Ha)
    prefix: Prefix = ()
    score = 0.0
    for t in range(Ha.shape[0]):
        emitted = 0
        while True:
            lp = sc.frame_logp(prefix, t)
            z = _top_symbols(lp, 1)[0]
            if emitted >= max_symbols_per_frame or len(prefix) >= max_len:
                z = sc.blank
            score += float(lp[z])
            if z == sc.blank:
                break
            prefix = prefix + (z,)
            emitted += 1
    return _finish({prefix: score}, {"calls": _merge_calls(sc.calls)}, t0)


# ---------------------------------------------------------------- label-synchronous searches


def _label_sync(att: AttScorer, ctc: CtcPrefixScorer | None, mu: DecoderWeights,
                cfg: BeamConfig) -> tuple[dict[Prefix, float], int]:
    eos = att.eos_col
    running: list[tuple[Prefix, float]] = [((), 0.0)]
    ended: dict[Prefix, float] = {}
    expansions = 0

    def joint(prefix, col):
        if col == eos:
            a = att.score(prefix) + att.eos_score(prefix)
            c = ctc.full_score(prefix) if ctc is not None else 0.0
        else:
            p = prefix + (col + 1,)
            a = att.score(p)
            c = ctc.prefix_score(p) if ctc is not None else 0.0
        return mu.combine(c, a, 0.0)

    for i in range(cfg.max_output_len + 1):
        cands = []
        for prefix, _ in running:
            lp = att.next_logp(prefix)
            if i == cfg.max_output_len:
                cols = [eos]
            elif mu.mu_att > 0 or ctc is None:
                cols = _top_symbols(lp, cfg.k_pre)
            else:
                ctc_lp = np.array([joint(prefix, c) for c in range(lp.size)])
                cols = _top_symbols(ctc_lp, cfg.k_pre)
            for col in cols:
                cands.append((prefix, col, joint(prefix, col)))
        expansions += len(cands)
        cands.sort(key=lambda c: (-c[2], c[0] + (c[1] + 1,)))
        running = []
        for prefix, col, s in cands[:cfg.k_beam]:
            if col == eos:
                ended[prefix] = s
            else:
                running.append((prefix + (col + 1,), s))
        if not running:
            break
    return ended, expansions


def att_beam(H, params: ModelParams, cfg: BeamConfig) -> DecodeResult:
    """Label-synchronous attention beam search with eos termination."""
    t0 = time.perf_counter()
    att = AttScorer(params, _as_array(H))
    ended, expansions = _label_sync(att, None, DecoderWeights(0.0, 1.0, 0.0), cfg)
    return _finish(ended, {"expansions": expansions, "calls": _merge_calls(att.calls)}, t0, cfg.length_norm)


def joint_ctc_att(H, lattice: np.ndarray, params: ModelParams, cfg: BeamConfig,
                  mu: DecoderWeights) -> DecodeResult:
    """Label-synchronous attention beam with CTC prefix-score fusion."""
    if mu.mu_rnnt != 0:
        raise ValueError("joint CTC/attention decoding takes no RNN-T weight")
    t0 = time.perf_counter()
    att = AttScorer(params, _as_array(H))
    ctc = CtcPrefixScorer(lattice, params.cfg.vocab.blank_id)
    ended, expansions = _label_sync(att, ctc, mu, cfg)
    stats = {"expansions": expansions, "calls": _merge_calls(att.calls, ctc.calls), "mu": mu.as_tuple()}
    return _finish(ended, stats, t0, cfg.length_norm)


# ---------------------------------------------------------------- joint, time-synchronous


def joint_ctc_driven(H, lattice: np.ndarray, params: ModelParams, cfg: BeamConfig,
                     mu: DecoderWeights) -> DecodeResult:
    """CTC-driven one-pass CTC/RNN-T/attention beam search.

    Per frame: expand every beam entry with the ``k_pre`` most likely CTC
    symbols (blank keeps the prefix), merge equal prefixes, prune to
    ``k_pre`` on CTC+attention, add the transducer score of each survivor
    over frames 1..t, and keep ``k_beam`` by the weighted sum. After the
    last frame the attention score is closed with eos.
    """
    t0 = time.perf_counter()
    Ha = _as_array(H)
    lp = np.asarray(lattice)
    blank = params.cfg.vocab.blank_id
    att = AttScorer(params, Ha)
    rn = RnntScorer(params, Ha)
    use_att, use_rnnt = mu.mu_att > 0, mu.mu_rnnt > 0

    hyps: dict[Prefix, dict] = {(): {"ctc": CtcPrefixState.initial(),
                                     "rnnt": RnntPrefixLattice.initial(rn) if use_rnnt else None}}
    scores: dict[Prefix, tuple[float, float, float]] = {}
    expansions = 0
    for t in range(1, lp.shape[0] + 1):
        symbols = _top_symbols(lp[t - 1], cfg.k_pre)
        ext = ctc_frame_step({p: h["ctc"] for p, h in hyps.items()}, lp[t - 1], symbols, t, blank,
                             cfg.max_output_len)
        expansions += len(ext)
        partial = {}
        for p, st in ext.items():
            a = att.score(p) if use_att else 0.0
            partial[p] = (st.score, a)
        pruned = sorted(partial, key=lambda p: (-mu.combine(partial[p][0], partial[p][1], 0.0), p))[:cfg.k_pre]
        new_hyps = {}
        new_scores = {}
        for p in pruned:
            lat = None
            r = 0.0
            if use_rnnt:
                if p in hyps:
                    lat = hyps[p]["rnnt"].advance()
                else:
                    lat = hyps[p[:-1]]["rnnt"].extend(p[-1]).advance()
                r = lat.score
            new_hyps[p] = {"ctc": ext[p], "rnnt": lat}
            new_scores[p] = (partial[p][0], partial[p][1], r)
        keep = sorted(new_scores, key=lambda p: (-mu.combine(*new_scores[p]), p))[:cfg.k_beam]
        hyps = {p: new_hyps[p] for p in keep}
        scores = {p: new_scores[p] for p in keep}

    final = {}
    for p, (c, a, r) in scores.items():
        if use_att:
            a = a + att.eos_score(p)
        final[p] = mu.combine(c, a, r)
    stats = {"expansions": expansions, "calls": _merge_calls(att.calls, rn.calls), "mu": mu.as_tuple()}
    return _finish(final, stats, t0, cfg.length_norm)


def joint_rnnt_driven(H, lattice: np.ndarray, params: ModelParams, cfg: BeamConfig,
                      mu: DecoderWeights) -> DecodeResult:
    """RNN-T-driven one-pass CTC/RNN-T/attention beam search.

    Per frame the transducer expansion loop proposes hypotheses; each is
    scored with the CTC prefix score and the attention score, combined with
    the transducer mass, and the best ``k_beam`` are kept. After the last
    frame the CTC term becomes the full-sequence probability and the
    attention term is closed with eos.
    """
    t0 = time.perf_counter()
    Ha = _as_array(H)
    att = AttScorer(params, Ha)
    rn = RnntScorer(params, Ha)
    ctc = CtcPrefixScorer(lattice, params.cfg.vocab.blank_id)
    use_att, use_ctc = mu.mu_att > 0, mu.mu_ctc > 0

    hyps: dict[Prefix, float] = {(): 0.0}
    scores: dict[Prefix, tuple[float, float, float]] = {(): (0.0, 0.0, 0.0)}
    expansions = 0
    for t in range(Ha.shape[0]):
        ext, pops = _transducer_frame(hyps, t, rn, cfg.k_pre, cfg.max_output_len, _loop_cap(cfg))
        expansions += pops
        new_scores = {}
        for p, r in ext.items():
            c = ctc.prefix_score(p) if use_ctc else 0.0
            a = att.score(p) if use_att else 0.0
            new_scores[p] = (c, a, r)
        keep = sorted(new_scores, key=lambda p: (-mu.combine(*new_scores[p]), p))[:cfg.k_beam]
        hyps = {p: ext[p] for p in keep}
        scores = {p: new_scores[p] for p in keep}

    final = {}
    for p, (c, a, r) in scores.items():
        if use_ctc:
            c = ctc.full_score(p)
        if use_att:
            a = a + att.eos_score(p)
        final[p] = mu.combine(c, a, r)
    stats = {"expansions": expansions, "calls": _merge_calls(att.calls, rn.calls, ctc.calls),
             "mu": mu.as_tuple()}
    return _finish(final, stats, t0, cfg.length_norm)


# ---------------------------------------------------------------- Mask-CTC


def maskctc_decode(H, lattice: np.ndarray, params: ModelParams, p_thr: float = 0.9,
                   n_iters: int = 2) -> DecodeResult:
    """Greedy CTC, mask low-confidence tokens, refill them with the MLM decoder.

    A token's confidence is the highest CTC posterior over the frames of its
    best-path run. Each round commits the ``ceil(masked / rounds_left)`` most
    confident MLM predictions; committed tokens are never re-masked, and the
    output length always equals the greedy CTC length.
    """
    if not 0.0 <= p_thr <= 1.0:
        raise ValueError("p_thr must lie in [0, 1]")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    t0 = time.perf_counter()
    Ha = _as_array(H)
    lp = np.asarray(lattice)
    vocab = params.cfg.vocab
    blank, mask = vocab.blank_id, vocab.mask_id

    path = lp.argmax(axis=1)
    tokens, conf = [], []
    prev = None
    for t, z in enumerate(path):
        z = int(z)
        if z != blank and z != prev:
            tokens.append(z)
            conf.append(lp[t, z])
        elif z != blank and z == prev:
            conf[-1] = max(conf[-1], lp[t, z])
        prev = z
    log_p_thr = math.log(p_thr) if p_thr > 0 else NEG_INF
    seq = [mask if c < log_p_thr else tok for tok, c in zip(tokens, conf)]
    logscore = [0.0 if s == mask else float(c) for s, c in zip(seq, conf)]
    history = [tuple(seq)]
    mlm_calls = 0
    for it in range(n_iters):
        masked = [i for i, s in enumerate(seq) if s == mask]
        if not masked:
            break
        out = models.mlm_log_posteriors(params, Ha, seq)
        mlm_calls += 1
        best = {i: (int(out[i].argmax()), float(out[i].max())) for i in masked}
        n_commit = math.ceil(len(masked) / (n_iters - it))
        chosen = sorted(masked, key=lambda i: (-best[i][1], i))[:n_commit]
        for i in chosen:
            seq[i] = best[i][0] + 1
            logscore[i] = best[i][1]
        history.append(tuple(seq))
    result = tuple(seq)
    stats = {"calls": {"mlm_calls": mlm_calls}, "history": history,
             "n_masked": sum(1 for s in history[0] if s == mask)}
    return _finish({result: float(sum(logscore))}, stats, t0)


# ---------------------------------------------------------------- oracle


def sequence_scores(H, lattice: np.ndarray, params: ModelParams, y: Sequence[int]) -> tuple[float, float, float]:
    """Full-sequence log-likelihoods (ctc, att with eos, rnnt), each from the loss functions."""
    Ha = _as_array(H)
    y = tuple(y)
    blank = params.cfg.vocab.blank_id
    c = -losses.ctc_loss(lattice, y, blank)
    a = -losses.att_loss(models.att_sequence_logits(params, Ha, y), [v - 1 for v in y])
    r = -losses.rnnt_loss(models.rnnt_lattice_logits(params, Ha, y), y, blank)
    return c, a, r


def brute_force(H, lattice: np.ndarray, params: ModelParams, mu: DecoderWeights, max_len: int,
                support: str = "all") -> DecodeResult:
    """Score every token sequence up to ``max_len`` with the exact weighted likelihood.

    ``support="ctc"`` keeps only sequences that fit in the CTC lattice, the
    hypothesis space of the CTC-driven search.
    """
    if support not in ("all", "ctc"):
        raise ValueError("support must be 'all' or 'ctc'")
    t0 = time.perf_counter()
    K = params.cfg.n_tokens
    n = sum(K ** i for i in range(max_len + 1))
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{n} candidate sequences exceed the oracle limit {BRUTE_FORCE_LIMIT}")
    T = np.asarray(lattice).shape[0]
    scored = {}
    for length in range(max_len + 1):
        for y in itertools.product(range(1, K + 1), repeat=length):
            if support == "ctc" and losses.ctc_min_frames(y) > T:
                continue
            scored[y] = mu.combine(*sequence_scores(H, lattice, params, y))
    return _finish(scored, {"candidates": len(scored)}, t0)


# ---------------------------------------------------------------- dispatch


DECODERS = ("ctc-greedy", "ctc-beam", "att", "rnnt", "maskctc", "joint-ctc-att",
            "joint-ctc-driven", "joint-rnnt-driven", "oracle")


def decode(name: str, params: ModelParams, H, cfg: BeamConfig, mu: DecoderWeights | None = None,
           p_thr: float = 0.9, n_iters: int = 2) -> DecodeResult:
    """Run decoder ``name`` on encoder output ``H``."""
    Ha = _as_array(H)
    lattice = models.ctc_log_posteriors(params, Ha)
    blank = params.cfg.vocab.blank_id
    if name == "ctc-greedy":
        return ctc_greedy(lattice, blank)
    if name == "ctc-beam":
        return ctc_beam(lattice, cfg, blank)
    if name == "att":
        return att_beam(Ha, params, cfg)
    if name == "rnnt":
        return rnnt_beam(Ha, params, cfg)
    if name == "maskctc":
        return maskctc_decode(Ha, lattice, params, p_thr, n_iters)
    if mu is None:
        raise ValueError(f"decoder {name!r} needs decoder weights")
    if name == "joint-ctc-att":
        return joint_ctc_att(Ha, lattice, params, cfg, mu)
    if name == "joint-ctc-driven":
        return joint_ctc_driven(Ha, lattice, params, cfg, mu)
    if name == "joint-rnnt-driven":
        return joint_rnnt_driven(Ha, lattice, params, cfg, mu)
    if name == "oracle":
        return brute_force(Ha, lattice, params, mu, cfg.max_output_len)
    raise ValueError(f"unknown decoder {name!r}")
