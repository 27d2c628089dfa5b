"""Sentence-level BLEU and lemma-level BLEU for generated glosses."""

from __future__ import annotations

import math
from collections import Counter
from pathlib import Path

from .errors import DataError, InvalidInputError, UndefinedScoreError

SMOOTHING_EPS = 0.1


def ngram_counts(words, n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def modified_precisions(hyp, ref, max_n: int = 4, eps: float = SMOOTHING_EPS) -> list[float]:
    """Clipped n-gram precisions; an order with no matches scores eps / (total + eps)."""
    out = []
    for n in range(1, max_n + 1):
        h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
        matches = sum(min(c, r[g]) for g, c in h.items())
        total = max(len(hyp) - n + 1, 0)
        out.append(matches / total if matches else eps / (total + eps))
    return out


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len >= ref_len:
        return 1.0
    if hyp_len == 0:
        return 0.0
    return math.exp(1.0 - ref_len / hyp_len)


def sentence_bleu(hypothesis, reference, max_n: int = 4) -> float:
    """Smoothed BLEU of one hypothesis against one reference (word lists)."""
    hyp, ref = list(hypothesis), list(reference)
    if not ref:
        raise UndefinedScoreError("BLEU is undefined for an empty reference")
    precisions = modified_precisions(hyp, ref, max_n)
    log_mean = math.fsum(math.log(p) for p in precisions) / max_n
    return brevity_penalty(len(hyp), len(ref)) * math.exp(log_mean)


def corpus_average(scores) -> float:
    scores = list(scores)
    if not scores:
        raise InvalidInputError("cannot average an empty score list")
    return math.fsum(scores) / len(scores)


class LemmaMap:
    """Surface form -> lemma lookup.

    Unmapped forms fall back to their lowercased surface form, unless the map
    was built with ``lowercase_fallback=False`` (as the identity map is).
    """

    def __init__(self, mapping: dict[str, str] | None = None, lowercase_fallback: bool = True):
        self.mapping = dict(mapping or {})
        self.lowercase_fallback = lowercase_fallback

    @classmethod
    def identity(cls) -> "LemmaMap":
        return cls({}, lowercase_fallback=False)

    @classmethod
    def load(cls, path) -> "LemmaMap":
        mapping = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DataError(f"{path}:{lineno}: expected 'surface<TAB>lemma'")
            mapping[cols[0]] = cols[1]
        return cls(mapping)

    def __call__(self, word: str) -> str:
        lemma = self.mapping.get(word)
        if lemma is not None:
            return lemma
        return word.lower() if self.lowercase_fallback else word


def lemma_bleu(hypothesis, reference, lemmas: LemmaMap | None = None, max_n: int = 4) -> float:
    lemmas = lemmas or LemmaMap.identity()
    return sentence_bleu([lemmas(w) for w in hypothesis], [lemmas(w) for w in reference], max_n)
