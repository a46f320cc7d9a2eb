import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hgmnet.errors import DegenerateInputWarning, DimensionError, NumericError, ValidationError
from hgmnet.hcl import (AlignmentPair, LossWeights, NegativeQueue, PrototypeSet, augment_mask, default_lexicon,
                        loss_hcl, loss_prototype, loss_sentence, loss_word, loss_word_batch, read_lexicon,
                        sent_sim_matrix)
from hgmnet.numkit import Rng, Tape, grad_check, kl_div

TAU1 = np.array([[1.0]])

# unit vectors at a chosen angle to e1
def at(cos):
    return np.array([[cos, math.sqrt(max(0.0, 1 - cos * cos))]])


# ------------------------------------------------------------------ lexicon


def test_default_lexicon_has_fifty_terms():
    lex = default_lexicon()
    assert len(lex) == 50
    assert all(syns for syns in lex.values())


def test_read_lexicon_rejects_malformed(tmp_path):
    p = tmp_path / "lex.tsv"
    p.write_text("pump\tcompressor, impeller\n")
    assert read_lexicon(p) == {"pump": ["compressor", "impeller"]}
    p.write_text("pump compressor\n")
    with pytest.raises(ValidationError):
        read_lexicon(p)


# ------------------------------------------------------------- augmentation


def test_augment_examples():
    lex = {"device": ["apparatus"], "pump": ["impeller"]}
    toks = ["a", "device", "with", "a", "pump"]
    assert augment_mask(toks, lex, Rng(0), rate=0.0) == toks
    assert augment_mask(["device", "pump"], lex, Rng(0), rate=1.0) == ["apparatus", "impeller"]


def test_augment_fifteen_percent_of_twenty():
    lex = {f"t{k}": [f"s{k}"] for k in range(20)}
    toks = [f"t{k}" for k in range(20)] + ["plain"] * 7
    out = augment_mask(toks, lex, Rng(4))
    assert sum(a != b for a, b in zip(toks, out)) == 3
    assert out[20:] == ["plain"] * 7


def test_augment_empty_lexicon_and_bad_rate():
    with pytest.warns(DegenerateInputWarning):
        assert augment_mask(["x"], {}, Rng(0)) == ["x"]
    with pytest.raises(ValidationError):
        augment_mask(["x"], {"x": ["y"]}, Rng(0), rate=1.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["device", "pump", "the", "a", "valve", "of"]), max_size=30), st.integers(0, 99))
def test_augment_counts_and_determinism(toks, seed):
    lex = {"device": ["apparatus", "unit"], "pump": ["impeller"], "valve": ["gate"]}
    out = augment_mask(toks, lex, Rng(seed))
    assert out == augment_mask(toks, lex, Rng(seed))
    covered = sum(t in lex for t in toks)
    assert sum(a != b for a, b in zip(toks, out)) == math.ceil(0.15 * covered - 1e-9)
    assert all(a == b for a, b in zip(toks, out) if a not in lex)


# -------------------------------------------------------------------- queue


def test_queue_fifo_eviction():
    q = NegativeQueue(capacity=3)
    q.push(np.arange(8.0).reshape(4, 2), keys=["a", "b", "c", "d"])
    assert len(q) == 3
    np.testing.assert_array_equal(q.snapshot(), [[2, 3], [4, 5], [6, 7]])
    assert q.keys() == ["b", "c", "d"]
    with pytest.raises(DimensionError):
        q.push(np.ones(3))


# --------------------------------------------------------------- word loss


def test_word_loss_examples():
    h = np.array([[1.0, 0.0]])
    same = at(0.3)
    assert loss_word(h, same, same, TAU1, literal_form=True).item() == pytest.approx(0.0, abs=1e-15)
    assert loss_word(h, same, same, TAU1).item() == pytest.approx(math.log(2), abs=1e-12)
    val = loss_word(h, h, -h, TAU1).item()
    assert val == pytest.approx(-math.log(math.e / (math.e + math.exp(-1))), abs=1e-12)
    assert val == pytest.approx(0.1269, abs=1e-4)


def test_word_loss_errors():
    h = np.array([[1.0, 0.0]])
    with pytest.raises(ValidationError):
        loss_word(h, h, h, np.array([[0.0]]))
    with pytest.warns(DegenerateInputWarning):
        assert loss_word(h, h, NegativeQueue(4, dim=2), TAU1).item() == 0.0
    with pytest.raises(ValidationError):
        loss_word(h, h, np.zeros((0, 2)), TAU1, literal_form=True)


def test_word_loss_exclusion_mask_drops_negative():
    h = np.array([[1.0, 0.0]])
    negs = np.vstack([at(0.3), h])
    masked = loss_word(h, at(0.3), negs, TAU1, exclude=[[False, True]]).item()
    assert masked == pytest.approx(math.log(2), abs=1e-12)


def test_word_loss_batch_matches_queue_form():
    rng = np.random.default_rng(1)
    h, hp = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    by_rows = np.mean([loss_word(h[i:i + 1], hp[i:i + 1], np.delete(hp, i, axis=0), TAU1).item()
                       for i in range(4)])
    assert loss_word_batch(h, hp, TAU1).item() == pytest.approx(by_rows, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 2.0))
def test_word_loss_nonnegative_and_monotone_in_negative_similarity(cp, cn, cn2, tau):
    h, t = np.array([[1.0, 0.0]]), np.array([[tau]])
    lo, hi = sorted([cn, cn2])
    a = loss_word(h, at(cp), at(lo), t).item()
    b = loss_word(h, at(cp), at(hi), t).item()
    assert a >= 0.0
    assert a <= b + 1e-12


def test_word_loss_gradients_twenty_seeds():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        negs = rng.normal(size=(5, 4))
        for literal in (False, True):
            err = grad_check(lambda h, hp, tau: loss_word(h, hp, negs, tau, literal_form=literal),
                             [rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), np.array([[0.3 + rng.random()]])])
            assert err < 1e-4


def test_word_loss_batch_gradients_twenty_seeds():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        mask = rng.random((4, 4)) < 0.3
        err = grad_check(lambda h, hp, tau: loss_word_batch(h, hp, tau, exclude=mask),
                         [rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), np.array([[0.5]])])
        assert err < 1e-4


# ------------------------------------------------------------ sentence loss


def test_sent_sim_matrix_examples():
    np.testing.assert_allclose(sent_sim_matrix(np.zeros((3, 4)), np.zeros((3, 4))).value, np.full((3, 3), 1 / 3))
    np.testing.assert_allclose(sent_sim_matrix(np.ones((1, 2)), np.ones((1, 2))).value, [[1.0]])
    # Q K^T / sqrt(2) = [[0, ln 3], [0, 0]]
    q = np.array([[math.log(3) * math.sqrt(2), 0.0], [0.0, 0.0]])
    k = np.array([[0.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(sent_sim_matrix(q, k, 2).value, [[0.25, 0.75], [0.5, 0.5]], atol=1e-15)
    with pytest.raises(DimensionError):
        sent_sim_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


def test_sentence_loss_examples():
    attn = np.array([[0.7, 0.3], [0.4, 0.6]])
    pairs = [AlignmentPair(0, 0, 0, (0, 1)), AlignmentPair(1, 1, 0, (0, 1))]
    assert loss_sentence(pairs, attn).item() == 0.0
    exact = [AlignmentPair(0, 0, 1, (0, 1), (0.7, 0.3)), AlignmentPair(1, 1, 1, (0, 1), (0.4, 0.6))]
    assert loss_sentence(exact, attn).item() == pytest.approx(0.0, abs=1e-15)
    one = [AlignmentPair(0, 0, 1, (0, 1), (0.5, 0.5))]
    got = loss_sentence(one, np.array([[1.0, 0.0], [0.5, 0.5]])).item()
    assert got == pytest.approx(kl_div([1.0, 0.0], [0.5, 0.5]), abs=1e-12)
    assert got == pytest.approx(0.6931, abs=1e-4)
    with pytest.raises(ValidationError):
        loss_sentence([], attn)


def test_sentence_loss_restricts_and_renormalizes():
    attn = np.array([[0.2, 0.3, 0.5]])
    pair = AlignmentPair(0, 2, 1, (0, 2))
    p = np.array([0.2, 0.5]) / 0.7
    assert loss_sentence([pair], attn).item() == pytest.approx(kl_div(p, pair.q()), abs=1e-12)
    # label-0 pairs still count in the mean
    both = loss_sentence([pair, AlignmentPair(0, 0, 0, (0, 1))], attn).item()
    assert both == pytest.approx(kl_div(p, pair.q()) / 2, abs=1e-12)


def test_alignment_target_is_smoothed_one_hot():
    q = AlignmentPair(0, 3, 1, (1, 3, 5)).q()
    assert q.sum() == pytest.approx(1.0, abs=1e-15)
    assert q[1] == pytest.approx(1 - 1e-6 + 1e-6 / 3)


def test_sentence_loss_gradients_twenty_seeds():
    pairs = [AlignmentPair(0, 1, 1, (0, 1, 2)), AlignmentPair(1, 1, 0, (0, 1, 2)),
             AlignmentPair(2, 0, 1, (0, 2)), AlignmentPair(3, 3, 1, (1, 2, 3))]
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        err = grad_check(lambda q, k: loss_sentence(pairs, sent_sim_matrix(q, k)),
                         [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))])
        assert err < 1e-4


# ----------------------------------------------------------- prototype loss


def test_prototype_examples():
    emb = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 5.0]])
    mu = np.array([[2.0, 3.0], [5.0, 5.0]])
    assert loss_prototype(mu, emb, [0, 0, 1]).item() == 0.0
    assert loss_prototype(np.zeros((1, 2)), np.array([[3.0, 4.0]]), [0]).item() == 25.0
    # categories {0: rows 0,1 -> mean (2,3)} and {1: row 2 -> (5,5)} against mu (0,0) and (4,7)
    hand = (2 ** 2 + 3 ** 2) + (1 ** 2 + 2 ** 2)
    assert loss_prototype([[0.0, 0.0], [4.0, 7.0]], emb, [0, 0, 1]).item() == pytest.approx(hand)


def test_prototype_empty_category_skipped():
    with pytest.warns(DegenerateInputWarning):
        assert loss_prototype(np.zeros((2, 2)), np.array([[1.0, 1.0]]), [0]).item() == 2.0


def test_prototype_stop_gradient():
    tape = Tape()
    mu = tape.param(np.array([[0.5, -1.0], [2.0, 0.0]]))
    emb = tape.param(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 5.0]]))
    tape.backward(loss_prototype(mu, emb, [0, 0, 1]))
    assert mu.grad is None
    # d/df of ||mu - mean||^2 is -2 (mu - mean) / |P|
    expected = np.array([[-2 * (0.5 - 2.0) / 2, -2 * (-1.0 - 3.0) / 2]] * 2 + [[-2 * (2.0 - 5.0), -2 * (0.0 - 5.0)]])
    np.testing.assert_allclose(emb.grad, expected)


def test_prototype_ema_update():
    ps = PrototypeSet(2, momentum=0.9)
    ps.ensure(np.array([[1.0, 1.0], [3.0, 3.0]]), ["x", "x"])
    np.testing.assert_array_equal(ps.mu["x"], [2.0, 2.0])
    ps.update(np.array([[12.0, 2.0]]), ["x"])
    np.testing.assert_allclose(ps.mu["x"], [0.9 * 2 + 0.1 * 12, 2.0])
    assert ps.loss(np.array([[0.0, 0.0]]), ["x"]).item() == pytest.approx(3.0 ** 2 + 2.0 ** 2)


def test_prototype_gradients_twenty_seeds():
    assign = [0, 1, 0, 2, 1, -1]
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        mu = rng.normal(size=(3, 4))
        assert grad_check(lambda f: loss_prototype(mu, f, assign), [rng.normal(size=(6, 4))]) < 1e-4


# -------------------------------------------------------------- combination


def test_hcl_examples():
    three = np.array([[3.0]])
    assert loss_hcl(LossWeights(np.array([[0.3, -2.0, 5.0]])), three, three, three).item() == pytest.approx(3.0)
    assert loss_hcl(LossWeights(), [[1.0]], [[0.0]], [[0.0]]).item() == pytest.approx(1 / 3)
    sat = loss_hcl(LossWeights(np.array([[50.0, 0.0, 0.0]])), [[1.5]], [[7.0]], [[9.0]]).item()
    assert sat == pytest.approx(1.5, abs=1e-12)


def test_hcl_rejects_non_finite_component():
    with pytest.raises(NumericError, match="sentence"):
        loss_hcl(LossWeights(), [[1.0]], [[np.nan]], [[0.0]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-20, 20)), arrays(np.float64, 3, elements=st.floats(0, 100)))
def test_hcl_weights_sum_to_one_and_total_is_bounded(raw, parts):
    w = LossWeights(raw.reshape(1, 3))
    assert w.realized().sum() == pytest.approx(1.0, abs=1e-12)
    total = loss_hcl(w, *[[[p]] for p in parts]).item()
    assert parts.min() - 1e-9 <= total <= parts.max() + 1e-9


def test_hcl_gradients_twenty_seeds():
    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        err = grad_check(lambda r, a, b, c: loss_hcl(r, a, b, c),
                         [rng.normal(size=(1, 3))] + [rng.random((1, 1)) * 5 for _ in range(3)])
        assert err < 1e-4
