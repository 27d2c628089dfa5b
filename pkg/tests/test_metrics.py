import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camf.errors import DataError, InvalidInputError, UndefinedScoreError
from camf.metrics import LemmaMap, corpus_average, lemma_bleu, sentence_bleu

WORDS = ["the", "a", "cat", "dog", "sat", "on", "mat", "red"]


def oracle_bleu(hyp, ref, max_n=4):
    """Brute-force BLEU: explicit n-gram lists, exact rational precisions."""
    log_sum = 0.0
    for n in range(1, max_n + 1):
        hyp_grams = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
        ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        remaining = list(ref_grams)
        matches = 0
        for g in hyp_grams:
            if g in remaining:
                remaining.remove(g)
                matches += 1
        if matches:
            p = Fraction(matches, len(hyp_grams))
        else:
            p = Fraction(1, 10) / (len(hyp_grams) + Fraction(1, 10))
        log_sum += math.log(p)
    h, r = len(hyp), len(ref)
    bp = 1.0 if h >= r else (0.0 if h == 0 else math.exp(1 - r / h))
    return bp * math.exp(log_sum / max_n)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        hyp = list(rng.choice(WORDS, size=rng.integers(0, 9)))
        ref = list(rng.choice(WORDS, size=rng.integers(1, 9)))
        worst = max(worst, abs(sentence_bleu(hyp, ref) - oracle_bleu(hyp, ref)))
    assert worst <= 1e-12


def test_identical_is_one():
    s = "a small red cat on the mat".split()
    assert sentence_bleu(s, s) == 1.0
    assert sentence_bleu(["cat"], ["cat"]) == 1.0


def test_repeated_word_example():
    # clipped precisions 2/4, 1/3, then empty orders smoothed to 0.1/2.1 and 0.1/1.1; mpmath
    score = sentence_bleu("the the the cat".split(), "the cat sat down".split())
    assert score == pytest.approx(0.16389254244019975, abs=1e-15)


def test_short_hypothesis_penalised():
    # exp(1 - 4/2) with every empty order smoothed to 0.1/0.1
    assert sentence_bleu(["the", "cat"], "the cat sat down".split()) == pytest.approx(math.exp(-1.0), abs=1e-15)


def test_no_overlap_near_zero():
    assert sentence_bleu(["x", "y", "z", "w"], ["a", "b", "c", "d"]) < 0.05


def test_empty_hypothesis_scores_zero():
    assert sentence_bleu([], ["a"]) == 0.0


def test_empty_reference():
    with pytest.raises(UndefinedScoreError):
        sentence_bleu(["a"], [])


def test_order_matters():
    ref = "the cat sat on the mat".split()
    assert sentence_bleu(ref[::-1], ref) < sentence_bleu(ref, ref)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(WORDS), max_size=10), st.lists(st.sampled_from(WORDS), min_size=1, max_size=10))
def test_bounded(hyp, ref):
    assert 0.0 <= sentence_bleu(hyp, ref) <= 1.0
    assert lemma_bleu(hyp, ref) == sentence_bleu(hyp, ref)


def test_lemma_example():
    lemmas = LemmaMap({"cats": "cat", "sleeping": "sleep", "sleeps": "sleep"})
    assert lemma_bleu(["cats", "sleeping"], ["cat", "sleeps"], lemmas, max_n=2) == 1.0
    assert sentence_bleu(["cats", "sleeping"], ["cat", "sleeps"], max_n=2) < 1.0


def test_lemma_fallback_lowercases():
    lemmas = LemmaMap({})
    assert lemma_bleu(["The", "Cat"], ["the", "cat"], lemmas) == 1.0
    assert lemma_bleu(["The", "Cat"], ["the", "cat"]) < 1.0


def test_lemma_map_file(tmp_path):
    path = tmp_path / "lemmas.tsv"
    path.write_text("cats\tcat\n\nran\trun\n", encoding="utf-8")
    lemmas = LemmaMap.load(path)
    assert (lemmas("cats"), lemmas("ran"), lemmas("Dogs")) == ("cat", "run", "dogs")
    path.write_text("cats cat\n", encoding="utf-8")
    with pytest.raises(DataError):
        LemmaMap.load(path)


def test_corpus_average():
    assert corpus_average([1.0]) == 1.0
    assert corpus_average([0.0, 1.0]) == 0.5
    scores = np.random.default_rng(1).random(100)
    assert corpus_average(scores) == pytest.approx(sum(sorted(scores)) / 100, abs=1e-12)
    with pytest.raises(InvalidInputError):
        corpus_average([])
