import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourdeco import losses as L
from fourdeco import models
from fourdeco.core import NEG_INF, log_softmax
from fourdeco.models import ModelConfig, ModelParams
from fourdeco.oracles import ctc_prob_enumerated, rnnt_prob_enumerated
from fourdeco.scorers import (AttScorer, CtcPrefixScorer, CtcPrefixState, RnntDecState, RnntPrefixLattice, RnntScorer,
                              att_score, ctc_frame_expand, ctc_frame_step, ctc_prefix_score, merge_ctc_states,
                              rnnt_step, rnnt_transition_sum)

A, B = 1, 2
SMALL = ModelConfig(n_tokens=3, feat_dim=3, enc_dim=6, enc_layers=1, emb_dim=4, att_dim=5, pred_dim=5,
                    joint_dim=5, mlm_dim=4)


def _lattice(seed, T, V):
    return log_softmax(np.random.default_rng(seed).normal(scale=1.5, size=(T, V + 1)))


def _collapse(path):
    out, prev = [], None
    for z in path:
        if z != 0 and z != prev:
            out.append(z)
        prev = z
    return tuple(out)


def _prefix_mass_oracle(lp, prefix):
    T, V1 = lp.shape
    total = 0.0
    for path in itertools.product(range(V1), repeat=T):
        if _collapse(path)[:len(prefix)] == tuple(prefix):
            total += math.exp(sum(lp[t, z] for t, z in enumerate(path)))
    return total


def _run_frames(lp, y):
    """Frame DP over all symbols, returning the state of exactly ``y`` after T frames."""
    states = {(): CtcPrefixState.initial()}
    for t in range(1, lp.shape[0] + 1):
        states = ctc_frame_step(states, lp[t - 1], range(lp.shape[1]), t)
    return states.get(tuple(y))


# ---------------------------------------------------------------- CTC frame DP


def test_frame_expand_trivial():
    lp = _lattice(0, 3, 2)
    s0 = CtcPrefixState.initial()
    (blank,) = ctc_frame_expand(s0, lp[0], 0, 1)
    assert blank.prefix == () and blank.score == pytest.approx(lp[0, 0])
    (a,) = ctc_frame_expand(s0, lp[0], A, 1)
    assert a.prefix == (A,) and a.score == pytest.approx(lp[0, A])
    with pytest.raises(ValueError):
        ctc_frame_expand(s0, lp[0], A, 2)


def test_frame_dp_prefix_a_at_t3_matches_enumeration():
    lp = _lattice(1, 3, 2)
    st3 = _run_frames(lp, (A,))
    assert math.exp(st3.score) == pytest.approx(ctc_prob_enumerated(lp, (A,)), abs=1e-12)


def test_repeat_symbol_gives_stay_and_extension():
    lp = _lattice(2, 3, 2)
    s = CtcPrefixState((A,), 1, -1.0, -0.5)
    parts = ctc_frame_expand(s, lp[1], A, 2)
    assert [p.prefix for p in parts] == [(A,), (A, A)]
    assert parts[1].log_pn == pytest.approx(s.log_pb + lp[1, A])
    merged = merge_ctc_states([CtcPrefixState((A,), 2, -1.0, NEG_INF), CtcPrefixState((A,), 2, NEG_INF, -2.0)])
    assert (merged.log_pb, merged.log_pn) == (-1.0, -2.0)
    with pytest.raises(ValueError):
        merge_ctc_states([CtcPrefixState((A,), 2, 0, 0), CtcPrefixState((B,), 2, 0, 0)])


@given(st.integers(0, 10_000), st.integers(1, 5), st.lists(st.integers(1, 2), max_size=3))
@settings(max_examples=40, deadline=None)
def test_frame_dp_completed_sequence_equals_ctc_loss(seed, T, y):
    lp = _lattice(seed, T, 2)
    st_ = _run_frames(lp, y)
    want = math.exp(-L.ctc_loss(lp, y))
    got = 0.0 if st_ is None else math.exp(st_.score)
    assert abs(got - want) <= 1e-10


# ---------------------------------------------------------------- CTC prefix score


def test_prefix_score_trivial():
    lp = _lattice(3, 3, 2)
    assert ctc_prefix_score((), lp) == 0.0
    assert ctc_prefix_score((A, B, A, B), lp) == -math.inf


@given(st.integers(0, 10_000), st.integers(1, 4), st.lists(st.integers(1, 2), max_size=3))
@settings(max_examples=40, deadline=None)
def test_prefix_score_matches_enumeration(seed, T, prefix):
    lp = _lattice(seed, T, 2)
    sc = CtcPrefixScorer(lp)
    got = sc.prefix_score(prefix)
    want = _prefix_mass_oracle(lp, prefix)
    assert (math.exp(got) if got > -math.inf else 0.0) == pytest.approx(want, abs=1e-12)
    full = sc.full_score(prefix)
    assert (math.exp(full) if full > -math.inf else 0.0) == pytest.approx(ctc_prob_enumerated(lp, prefix), abs=1e-12)


@given(st.integers(0, 10_000), st.lists(st.integers(1, 3), max_size=3), st.lists(st.integers(1, 3), max_size=2))
@settings(max_examples=40, deadline=None)
def test_prefix_mass_dominates_extensions(seed, prefix, tail):
    lp = _lattice(seed, 5, 3)
    sc = CtcPrefixScorer(lp)
    assert sc.full_score(tuple(prefix) + tuple(tail)) <= sc.prefix_score(prefix) + 1e-12
    assert sc.prefix_score(tuple(prefix) + tuple(tail)) <= sc.prefix_score(prefix) + 1e-12


# ---------------------------------------------------------------- RNN-T


@pytest.fixture(scope="module")
def model():
    p = ModelParams.init(SMALL, 7)
    H = models.encode(p, np.random.default_rng(7).normal(size=(6, 3))).states
    return p, H


def test_rnnt_step_normalized_and_replay(model):
    p, H = model
    s = RnntDecState.initial(p)
    lp = rnnt_step(p, s, H[0])
    assert abs(np.exp(lp).sum() - 1) <= 1e-12
    assert s.advance(p, 0) is s
    a = s.advance(p, A).advance(p, B)
    b = RnntDecState.initial(p).advance(p, A).advance(p, 0).advance(p, B)
    assert a.prefix == b.prefix == (A, B) and np.array_equal(a.g, b.g)


def test_rnnt_step_chain_reproduces_loss_single_path(model):
    p, H = model
    H1 = H[:1]
    s = RnntDecState.initial(p)
    lp0 = rnnt_step(p, s, H1[0])
    lp1 = rnnt_step(p, s.advance(p, A), H1[0])
    lattice = models.rnnt_lattice_logits(p, H1, (A,))
    assert -(lp0[A] + lp1[0]) == pytest.approx(L.rnnt_loss(lattice, (A,)), abs=1e-12)


def test_transition_sum_trivial(model):
    p, H = model
    sc = RnntScorer(p, H)
    prev = {(A,): -0.7}
    assert rnnt_transition_sum(prev, (A,), 2, sc) == pytest.approx(-0.7 + sc.frame_logp((A,), 2)[0])
    want = -0.7 + sc.frame_logp((A,), 2)[B] + sc.frame_logp((A, B), 2)[0]
    assert rnnt_transition_sum(prev, (A, B), 2, sc) == pytest.approx(want)
    with pytest.raises(ValueError):
        rnnt_transition_sum(prev, (B,), 2, sc)


def test_transition_sum_accumulates_to_loss(model):
    p, H = model
    y = (A, B, A)
    sc = RnntScorer(p, H)
    # forward over frames with all prefixes of y
    mass = {(): 0.0}
    for t in range(H.shape[0]):
        mass = {y[:k]: rnnt_transition_sum(mass, y[:k], t, sc) for k in range(len(y) + 1)}
    lattice = models.rnnt_lattice_logits(p, H, y)
    assert mass[y] == pytest.approx(-L.rnnt_loss(lattice, y), abs=1e-10)
    assert math.exp(mass[y]) == pytest.approx(rnnt_prob_enumerated(lattice, y), abs=1e-12)


def test_prefix_lattice_matches_transition_sum(model):
    p, H = model
    sc = RnntScorer(p, H)
    lat = RnntPrefixLattice.initial(sc)
    y = (B, A)
    mass = {(): 0.0}
    lat_y = {(): lat}
    for t in range(H.shape[0]):
        mass = {y[:k]: rnnt_transition_sum(mass, y[:k], t, sc) for k in range(len(y) + 1)}
        bases = {}
        for k in range(len(y) + 1):
            pre = y[:k]
            bases[pre] = lat_y[pre] if pre in lat_y else bases[pre[:-1]].extend(pre[-1])
        lat_y = {pre: b.advance() for pre, b in bases.items()}
        for k in range(len(y) + 1):
            assert lat_y[y[:k]].score == pytest.approx(mass[y[:k]], abs=1e-10)


# ---------------------------------------------------------------- attention


def test_att_scoring_telescopes_to_loss(model):
    p, H = model
    y = (A, B, B)
    sc = AttScorer(p, H)
    total = sc.score(y) + sc.eos_score(y)
    logits = models.att_sequence_logits(p, H, y)
    assert total == pytest.approx(-L.att_loss(logits, [v - 1 for v in y]), abs=1e-12)
    for k in range(len(y) + 1):
        assert abs(np.exp(sc.next_logp(y[:k])).sum() - 1) <= 1e-12


def test_att_cached_equals_scratch(model):
    p, H = model
    sc = AttScorer(p, H)
    sc.score((A, B))
    cached = sc.score((A, B, A))
    fresh = AttScorer(p, H).state(())
    for k, tok in enumerate((A, B, A)):
        fresh, _ = att_score((A, B, A)[:k + 1], H, fresh, p)
    assert fresh.score == cached
    with pytest.raises(ValueError):
        att_score((B, B), H, sc.state(()), p)
