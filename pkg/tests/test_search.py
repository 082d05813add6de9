import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourdeco import models, search
from fourdeco.core import BeamConfig, DecoderWeights, log_softmax
from fourdeco.models import ModelConfig, ModelParams
from fourdeco.oracles import DEGENERATE_PAIRS, ORACLE_MUS, TOY_SEARCH_MODEL

A, B = 1, 2
WIDE = BeamConfig(k_beam=64, k_pre=64, max_output_len=3)
SMALL = ModelConfig(n_tokens=4, feat_dim=3, enc_dim=6, enc_layers=1, emb_dim=4, att_dim=6, pred_dim=6,
                    joint_dim=6, mlm_dim=4)


def _instance(seed, cfg=TOY_SEARCH_MODEL, frames=(2, 9), scale=2.0):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(cfg, seed)
    for k in p.blocks:
        p.blocks[k] *= scale
    H = models.encode(p, rng.normal(size=(int(rng.integers(*frames)), cfg.feat_dim))).states
    return p, H, models.ctc_log_posteriors(p, H)


# ---------------------------------------------------------------- CTC


def test_ctc_greedy_example():
    lp = np.log(np.array([[0.1, 0.8, 0.1], [0.1, 0.8, 0.1], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1]]))
    assert search.ctc_greedy(lp).best == (A, A)


def test_ctc_beam_prefers_summed_mass_over_best_path():
    # best single path is blank-blank (0.36) but "a" collects 0.16+0.24+0.24 = 0.64
    p = np.array([[0.6, 0.4, 0.0], [0.6, 0.4, 0.0]]) + 1e-300
    lp = np.log(p / p.sum(axis=1, keepdims=True))
    assert search.ctc_greedy(lp).best == ()
    res = search.ctc_beam(lp, BeamConfig(k_beam=4, k_pre=3))
    assert res.best == (A,)
    assert math.exp(res.score) == pytest.approx(0.64)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_ctc_beam_wide_finds_ctc_argmax(seed):
    lp = log_softmax(np.random.default_rng(seed).normal(scale=2, size=(4, 3)))
    res = search.ctc_beam(lp, BeamConfig(k_beam=64, k_pre=3, max_output_len=4))
    p = ModelParams.init(ModelConfig(n_tokens=2, feat_dim=1, enc_dim=2, enc_layers=1, emb_dim=2, att_dim=2,
                                     pred_dim=2, joint_dim=2, mlm_dim=2), 0)
    ref = search.brute_force(np.zeros((4, 2)), lp, p, DecoderWeights(1, 0, 0), 4)
    assert res.best == ref.best
    assert res.score == pytest.approx(ref.score, abs=1e-10)


# ---------------------------------------------------------------- brute force


def test_brute_force_candidate_count():
    p, H, lat = _instance(0)
    res = search.brute_force(H, lat, p, DecoderWeights(1, 1, 1), 3)
    assert res.stats["candidates"] == 15 == len(res.n_best)
    with pytest.raises(ValueError):
        search.brute_force(H, lat, p, DecoderWeights(1, 1, 1), 30)


def test_sequence_scores_are_log_likelihoods():
    p, H, lat = _instance(1)
    seqs = [y for y, _ in search.brute_force(H, lat, p, DecoderWeights(0, 1, 0), 3).n_best]
    for col in range(3):
        total = sum(math.exp(search.sequence_scores(H, lat, p, y)[col]) for y in seqs)
        assert 0 < total <= 1 + 1e-12


# ---------------------------------------------------------------- joint searches vs the oracle


@pytest.mark.parametrize("mu", ORACLE_MUS)
def test_joint_searches_match_brute_force(mu):
    w = DecoderWeights(*mu)
    for seed in range(6):
        p, H, lat = _instance(100 + seed, frames=(1, 5))
        ref = search.brute_force(H, lat, p, w, 3)
        ref_ctc = search.brute_force(H, lat, p, w, 3, support="ctc")
        got = search.joint_rnnt_driven(H, lat, p, WIDE, w)
        assert got.best == ref.best and got.score == pytest.approx(ref.score, abs=1e-9)
        got = search.joint_ctc_driven(H, lat, p, WIDE, w)
        assert got.best == ref_ctc.best and got.score == pytest.approx(ref_ctc.score, abs=1e-9)


def test_joint_ctc_att_rejects_rnnt_weight():
    p, H, lat = _instance(2)
    with pytest.raises(ValueError):
        search.joint_ctc_att(H, lat, p, WIDE, DecoderWeights(0.3, 0.3, 0.4))


@pytest.mark.parametrize("joint,mu,single", DEGENERATE_PAIRS)
def test_basis_weights_reproduce_single_decoder(joint, mu, single):
    beam = BeamConfig(k_beam=3, k_pre=4, max_output_len=8)
    for seed in range(8):
        p, H, _ = _instance(200 + seed, cfg=SMALL, frames=(2, 14))
        a = search.decode(joint, p, H, beam, DecoderWeights(*mu))
        b = search.decode(single, p, H, beam)
        assert a.best == b.best


def test_rnnt_beam_width_one_is_greedy_one_symbol():
    for seed in range(10):
        p, H, _ = _instance(300 + seed, cfg=SMALL, frames=(2, 14))
        a = search.rnnt_beam(H, p, BeamConfig(k_beam=1, k_pre=1, max_output_len=50))
        b = search.rnnt_greedy(H, p, max_symbols_per_frame=1)
        assert a.best == b.best
        assert a.score == pytest.approx(b.score, abs=1e-12)


def test_wider_beam_never_scores_worse():
    # the exhaustive search dominates any narrow one on the joint objective
    w = DecoderWeights(0.2, 0.4, 0.4)
    for seed in range(6):
        p, H, lat = _instance(400 + seed, frames=(1, 5))
        narrow = search.joint_rnnt_driven(H, lat, p, BeamConfig(k_beam=1, k_pre=1, max_output_len=3), w)
        wide = search.joint_rnnt_driven(H, lat, p, WIDE, w)
        assert wide.score >= narrow.score - 1e-12


def test_decoders_are_deterministic():
    p, H, _ = _instance(5, cfg=SMALL, frames=(6, 7))
    cfg = BeamConfig(k_beam=3, k_pre=3, max_output_len=8)
    for name in search.DECODERS[:-1]:
        mu = None
        if name.startswith("joint"):
            mu = DecoderWeights(0.3, 0.7, 0.0) if name == "joint-ctc-att" else DecoderWeights(0.2, 0.4, 0.4)
        a = search.decode(name, p, H, cfg, mu)
        b = search.decode(name, p, H.copy(), cfg, mu)
        assert a.best == b.best and [s for _, s in a.n_best] == [s for _, s in b.n_best]
        assert all(1 <= v <= SMALL.n_tokens for v in a.best)


def test_unknown_decoder_and_missing_weights():
    p, H, _ = _instance(6, cfg=SMALL)
    with pytest.raises(ValueError):
        search.decode("viterbi", p, H, WIDE)
    with pytest.raises(ValueError):
        search.decode("joint-rnnt-driven", p, H, WIDE)


def test_attention_call_accounting():
    # CTC-driven scores every CTC extension with attention; RNN-T-driven only
    # the hypotheses its transducer loop closes in each frame
    p, H, lat = _instance(7, cfg=SMALL, frames=(10, 11))
    cfg = BeamConfig(k_beam=4, k_pre=4, max_output_len=10)
    ctc = search.joint_ctc_driven(H, lat, p, cfg, DecoderWeights(0.2, 0.6, 0.2))
    assert ctc.stats["calls"]["att_calls"] == ctc.stats["expansions"]
    rnnt = search.joint_rnnt_driven(H, lat, p, cfg, DecoderWeights(0.1, 0.5, 0.4))
    n_frames = H.shape[0]
    assert n_frames <= rnnt.stats["calls"]["att_calls"] <= n_frames * cfg.k_pre * cfg.k_beam * cfg.k_pre
    no_att = search.joint_rnnt_driven(H, lat, p, cfg, DecoderWeights(0.5, 0.0, 0.5))
    assert no_att.stats["calls"].get("att_calls", 0) == 0


# ---------------------------------------------------------------- Mask-CTC


def test_maskctc_threshold_extremes():
    p, H, lat = _instance(8, cfg=SMALL, frames=(8, 9))
    greedy = search.ctc_greedy(lat).best
    # p_thr = 0 masks nothing: output is the greedy CTC output
    assert search.maskctc_decode(H, lat, p, p_thr=0.0).best == greedy
    full = search.maskctc_decode(H, lat, p, p_thr=1.0, n_iters=3)
    assert len(full.best) == len(greedy)
    assert full.stats["n_masked"] == len(greedy)
    assert SMALL.vocab.mask_id not in full.best
    with pytest.raises(ValueError):
        search.maskctc_decode(H, lat, p, p_thr=1.5)


@given(st.integers(0, 1000), st.floats(0, 1), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_maskctc_keeps_length_and_confident_tokens(seed, thr, iters):
    p, H, lat = _instance(seed, cfg=SMALL, frames=(4, 12))
    greedy = search.ctc_greedy(lat).best
    res = search.maskctc_decode(H, lat, p, p_thr=thr, n_iters=iters)
    first = res.stats["history"][0]
    assert len(res.best) == len(greedy)
    for g, f, out in zip(greedy, first, res.best):
        if f != SMALL.vocab.mask_id:
            assert g == f == out
    assert res.stats["calls"]["mlm_calls"] <= iters
