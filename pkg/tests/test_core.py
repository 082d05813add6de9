import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourdeco.core import (AlignmentSeq, BeamConfig, DecoderWeights, EncodedSeq, FeatureSeq, TokenSeq, Vocabulary,
                           collapse, edit_distance, error_rate, log_sum_exp, top_k)

A, B = 1, 2


def test_vocabulary_layout():
    v = Vocabulary.of_size(3)
    assert len(v) == 7 and v.n_tokens == 3 and v.is_canonical
    assert (v.blank_id, v.eos_id, v.sos_id, v.mask_id) == (0, 4, 5, 6)
    assert v.decode(v.encode(["t0", "t2"])) == ["t0", "t2"]


def test_vocabulary_rejects_bad_specials():
    with pytest.raises(ValueError):
        Vocabulary(("a", "b", "c", "d"), 0, 0, 1, 2)
    with pytest.raises(ValueError):
        Vocabulary(("a", "b", "c", "d"), 0, 1, 2, 9)
    with pytest.raises(ValueError):
        Vocabulary(("a", "a", "c", "d"), 0, 1, 2, 3)


def test_tokenseq_rejects_blank():
    with pytest.raises(ValueError):
        TokenSeq([1, 0, 2])
    assert len(TokenSeq([])) == 0


def test_feature_and_encoded_validation():
    with pytest.raises(ValueError):
        FeatureSeq(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        FeatureSeq(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        EncodedSeq(np.zeros((0, 2)))
    assert EncodedSeq(np.zeros((3, 2))).T == 3


def test_alignment_kinds():
    assert AlignmentSeq((1, 0, 2, 0), "rnnt").n_frames == 2
    with pytest.raises(ValueError):
        AlignmentSeq((1, 0, 2), "rnnt")
    with pytest.raises(ValueError):
        AlignmentSeq((1,), "hmm")


@pytest.mark.parametrize("path,out", [
    ((A, 0, A, A, 0, B), (A, A, B)),
    ((0, 0, 0), ()),
    ((A, A, B, B), (A, B)),
])
def test_collapse_examples(path, out):
    assert collapse(AlignmentSeq(path)).ids == out


def test_collapse_rejects_rnnt():
    with pytest.raises(ValueError):
        collapse(AlignmentSeq((1, 0), "rnnt"))


@st.composite
def sequence_and_alignment(draw):
    y = draw(st.lists(st.integers(1, 3), max_size=5))
    z = []
    for i, v in enumerate(y):
        z += [0] * draw(st.integers(0, 2))
        if i > 0 and y[i - 1] == v and (not z or z[-1] != 0):
            z.append(0)
        z += [v] * draw(st.integers(1, 3))
    z += [0] * draw(st.integers(0, 2))
    return tuple(y), tuple(z)


@given(sequence_and_alignment())
def test_collapse_inverts_alignment_construction(case):
    y, z = case
    assert collapse(AlignmentSeq(z)).ids == y


def test_log_sum_exp_examples():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert log_sum_exp([-math.inf, 3.5]) == 3.5
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)
    assert log_sum_exp([-math.inf, -math.inf]) == -math.inf
    with pytest.raises(ValueError):
        log_sum_exp([])


finite = st.floats(-50, 50)


@given(st.lists(finite, min_size=1, max_size=8), st.lists(finite, min_size=1, max_size=8), st.randoms())
def test_log_sum_exp_properties(a, b, rnd):
    whole = log_sum_exp(a + b)
    assert whole == pytest.approx(log_sum_exp([log_sum_exp(a), log_sum_exp(b)]), abs=1e-12)
    perm = a + b
    rnd.shuffle(perm)
    assert log_sum_exp(perm) == pytest.approx(whole, abs=1e-12)


def _levenshtein_oracle(r, h):
    # exhaustive search over edit scripts (small inputs only)
    @__import__("functools").lru_cache(None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (r[i - 1] != h[j - 1]))
    return d(len(r), len(h))


def test_edit_distance_examples():
    assert edit_distance("abc", "abc")[0] == 0
    d, b = edit_distance("ab", "")
    assert d == 2 and b == {"sub": 0, "ins": 0, "del": 2}
    assert edit_distance(list("kitten"), list("sitting"))[0] == 3
    assert error_rate([], []) == 0.0
    assert error_rate([1, 2], [1]) == 0.5


seqs = st.lists(st.integers(0, 3), max_size=6).map(tuple)


@given(seqs, seqs, seqs)
@settings(max_examples=200)
def test_edit_distance_is_metric(x, y, z):
    dxy = edit_distance(x, y)[0]
    assert dxy == edit_distance(y, x)[0]
    assert (dxy == 0) == (x == y)
    assert edit_distance(x, z)[0] <= dxy + edit_distance(y, z)[0]
    assert dxy == _levenshtein_oracle(x, y)
    _, b = edit_distance(x, y)
    assert b["sub"] + b["ins"] + b["del"] == dxy
    assert len(x) - b["del"] + b["ins"] == len(y)


def test_top_k_examples():
    items = [("a", 3.0), ("b", 1.0), ("c", 2.0)]
    got = top_k(items, 2, score=lambda it: it[1], key=lambda it: [ord(it[0])])
    assert [s for _, s in got] == [3.0, 2.0]
    assert len(top_k(items, 10, lambda it: it[1], lambda it: [ord(it[0])])) == 3
    tied = [((2,), 0.0), ((1, 5), 0.0), ((1,), 0.0)]
    assert [p for p, _ in top_k(tied, 3, lambda it: it[1], lambda it: it[0])] == [(1,), (1, 5), (2,)]
    with pytest.raises(ValueError):
        top_k(items, 0, lambda it: it[1], lambda it: [0])


@given(st.lists(st.tuples(st.lists(st.integers(1, 3), max_size=3).map(tuple), st.integers(-3, 3)),
                max_size=10, unique_by=lambda it: it[0]), st.integers(1, 12))
def test_top_k_matches_stable_sort_oracle(items, k):
    got = top_k(items, k, lambda it: it[1], lambda it: it[0])
    oracle = sorted(sorted(items, key=lambda it: it[0]), key=lambda it: -it[1])[:k]
    assert got == oracle


def test_decoder_weights_normalize():
    w = DecoderWeights(0.5, 0.5, 0.0)
    assert w.as_tuple() == (0.5, 0.5, 0.0)
    assert DecoderWeights(1, 4, 5).as_tuple() == pytest.approx((0.1, 0.4, 0.5))
    # zero weights never turn -inf into nan
    assert DecoderWeights(0, 1, 0).combine(-math.inf, -2.0, -math.inf) == -2.0
    with pytest.raises(ValueError):
        DecoderWeights(0, 0, 0)
    with pytest.raises(ValueError):
        DecoderWeights(-1, 1, 1)


def test_beam_config_validation():
    with pytest.raises(ValueError):
        BeamConfig(k_beam=0)
    with pytest.raises(ValueError):
        BeamConfig(k_pre=0)
