"""Report quality metrics: n-gram precision, longest common subsequence, recall."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multigrain.corpus import Sample, tag_phrase
from multigrain.errors import DataError
from multigrain.metrics import (
    EVAL_HEADER,
    EvalReport,
    abnormality_recall,
    bleu,
    evaluate_generations,
    lcs_length,
    rouge_l,
)

from oracles import brute_force_lcs


def sample_with(tags, report="all clear ."):
    return Sample("s0", np.zeros((2, 2, 1), np.float32), tuple(tags), report)


# --- n-gram precision ---------------------------------------------------------

def toks(*texts):
    from multigrain.corpus import tokenize as tk
    return [tk(t) for t in texts]


def test_bleu1_short_hypothesis_brevity():
    # perfect unigram precision, half-length hypothesis: score is exp(1 - 2)
    scores = bleu(toks("the cat sat"), toks("the cat sat on the mat"), max_n=1)
    np.testing.assert_allclose(scores[0], math.exp(-1.0), atol=1e-6)


def test_bleu_identity_is_one():
    hyp = toks("a b c d e f g")
    scores = bleu(hyp, list(hyp))
    np.testing.assert_allclose(scores, [1.0, 1.0, 1.0, 1.0], atol=1e-12)


def test_bleu_returns_one_score_per_order():
    scores = bleu(toks("a b c d"), toks("a b c d"), max_n=3)
    assert len(scores) == 3


def test_bleu_clipping_counts():
    # "the the the" against "the cat": clipped unigram count is 1 of 3,
    # and the hypothesis is the longer side so no brevity penalty applies
    scores = bleu(toks("the the the"), toks("the cat"), max_n=1)
    np.testing.assert_allclose(scores[0], 1.0 / 3.0, atol=1e-9)


def test_bleu_smoothing_vs_hard_zero():
    hyps, refs = toks("a b x y"), toks("a b c d")
    smoothed = bleu(hyps, refs, smooth=True)
    hard = bleu(hyps, refs, smooth=False)
    # trigram "a b ?" never matches; smoothing substitutes a count of one
    assert smoothed[2] > 0.0
    assert hard[2] == 0.0
    assert hard[3] == 0.0
    # unigram precision has real matches, so the two agree there
    np.testing.assert_allclose(smoothed[0], hard[0], atol=1e-12)


def test_bleu_is_corpus_level_not_mean_of_sentences():
    # pooled counts: 1 match of 2 plus 2 of 2 gives 3/4, not mean(1/2, 1)
    scores = bleu(toks("a x", "c d"), toks("a b", "c d"), max_n=1)
    np.testing.assert_allclose(scores[0], 0.75, atol=1e-12)


def test_bleu_input_validation():
    with pytest.raises(DataError):
        bleu(toks("a"), toks("a", "b"))
    with pytest.raises(DataError):
        bleu([], [])


@settings(derandomize=True, max_examples=30)
@given(st.lists(st.sampled_from("abcde"), min_size=4, max_size=12))
def test_bleu_identity_property(tokens):
    # needs at least four tokens so every n-gram order has a denominator
    scores = bleu([tokens], [list(tokens)])
    np.testing.assert_allclose(scores, np.ones(4), atol=1e-12)


# --- longest common subsequence ------------------------------------------------

def test_lcs_known_cases():
    assert lcs_length(list("abcde"), list("ace")) == 3
    assert lcs_length(list("abc"), list("abc")) == 3
    assert lcs_length(list("abc"), list("xyz")) == 0
    assert lcs_length([], list("abc")) == 0


def test_lcs_matches_brute_force_on_200_pairs():
    rng = np.random.default_rng(60)
    for _ in range(200):
        a = [int(v) for v in rng.integers(0, 4, size=rng.integers(0, 9))]
        b = [int(v) for v in rng.integers(0, 4, size=rng.integers(0, 9))]
        assert lcs_length(a, b) == brute_force_lcs(tuple(a), tuple(b))


@settings(derandomize=True, max_examples=40)
@given(st.lists(st.integers(0, 3), max_size=10), st.lists(st.integers(0, 3), max_size=10))
def test_lcs_bounds_property(a, b):
    n = lcs_length(a, b)
    assert 0 <= n <= min(len(a), len(b))
    assert lcs_length(a, a) == len(a)


# --- recall-weighted subsequence score -----------------------------------------

def test_rouge_substitution_case():
    np.testing.assert_allclose(rouge_l(toks("a b c"), toks("a x c")), 0.6667, atol=1e-4)


def test_rouge_identity_is_one():
    assert rouge_l(toks("report text here"), toks("report text here")) == pytest.approx(1.0)


def test_rouge_disjoint_is_zero():
    assert rouge_l(toks("a b"), toks("x y")) == 0.0


def test_rouge_weights_recall_over_precision():
    # same LCS, hypothesis longer vs reference longer: beta favors recall
    recall_heavy = rouge_l(toks("a b c d"), toks("a b"))    # R=1, P=1/2
    precision_heavy = rouge_l(toks("a b"), toks("a b c d"))  # R=1/2, P=1
    assert recall_heavy > precision_heavy


def test_rouge_is_mean_over_samples():
    joint = rouge_l(toks("a b c", "x"), toks("a b c", "y"))
    np.testing.assert_allclose(joint, 0.5, atol=1e-12)


def test_rouge_empty_hypothesis_contributes_zero():
    assert rouge_l([[]], toks("a b")) == 0.0


def test_rouge_input_validation():
    with pytest.raises(DataError):
        rouge_l(toks("a"), [])


# --- finding recall -------------------------------------------------------------

def test_recall_counts_contiguous_phrase():
    samples = [sample_with((3,))]
    hit = f"looks fine . {tag_phrase(3)} done ."
    assert abnormality_recall([hit], samples) == 1.0


def test_recall_requires_full_phrase():
    samples = [sample_with((3,))]
    partial = tag_phrase(3).rsplit(" ", 2)[0]  # drop the tail of the phrase
    assert abnormality_recall([partial], samples) == 0.0


def test_recall_scattered_words_do_not_count():
    samples = [sample_with((3,))]
    words = tag_phrase(3).split()
    scattered = " pause ".join(words)
    assert abnormality_recall([scattered], samples) == 0.0


def test_recall_averages_over_mentions():
    samples = [sample_with((1, 4))]
    one_of_two = f"{tag_phrase(1)} and nothing else ."
    assert abnormality_recall([one_of_two], samples) == 0.5


def test_recall_skips_untagged_samples():
    samples = [sample_with(()), sample_with((2,))]
    gens = ["whatever .", tag_phrase(2)]
    assert abnormality_recall(gens, samples) == 1.0


def test_recall_no_tagged_samples_is_zero():
    assert abnormality_recall(["text"], [sample_with(())]) == 0.0


def test_recall_mismatched_lengths():
    with pytest.raises(DataError):
        abnormality_recall(["a", "b"], [sample_with(())])


# --- aggregate report ------------------------------------------------------------

def test_eval_header_matches_row_shape():
    report = EvalReport(bleu=[0.5, 0.4, 0.3, 0.2], rouge_l=0.6,
                        abnormality_recall=0.7, samples=3)
    row = report.format_row("test@ckpt")
    assert len(row.split("\t")) == len(EVAL_HEADER.split("\t"))
    assert row.startswith("test@ckpt\t")
    assert "0.500000" in row and "0.700000" in row


def test_eval_report_as_dict_keys():
    report = EvalReport(bleu=[1, 1, 1, 1], rouge_l=1.0,
                        abnormality_recall=0.0, samples=2)
    d = report.as_dict()
    for key in ("bleu_1", "bleu_4", "rouge_l", "abnormality_recall", "samples"):
        assert key in d


def test_evaluate_generations_end_to_end():
    samples = [sample_with((0,), report=f"{tag_phrase(0)} all clear ."),
               sample_with((), report="all clear .")]
    gens = [samples[0].report, samples[1].report]
    report = evaluate_generations(gens, samples)
    np.testing.assert_allclose(report.bleu, np.ones(4), atol=1e-12)
    assert report.rouge_l == pytest.approx(1.0)
    assert report.abnormality_recall == 1.0
    assert report.samples == 2
