"""Byte-pair-encoding subword vocabulary learned from gloss text.

Words are split on single spaces; the last character of every word carries
an end-of-word marker, so decoding restores spacing exactly.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter, defaultdict
from pathlib import Path

from .errors import InvalidConfigError

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = {"<pad>": PAD, "<s>": BOS, "</s>": EOS, "<unk>": UNK, "<mask>": MASK}
NUM_SPECIALS = len(SPECIAL_TOKENS)
EOW = "</w>"
UNK_PLACEHOLDER = "⟨unk⟩"  # ⟨unk⟩

DEFAULT_VOCAB_SIZE = 10_000


def _word_symbols(word: str) -> tuple[str, ...]:
    if not word:
        return (EOW,)
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _split_words(text: str) -> list[str]:
    return text.split(" ") if text else []


class Vocabulary:
    """Immutable subword inventory plus the ordered merge list that built it."""

    def __init__(self, tokens: list[str], merges: list[tuple[str, str]], target_size: int | None = None):
        if tokens[:NUM_SPECIALS] != list(SPECIAL_TOKENS):
            raise InvalidConfigError("special tokens must occupy ids 0-4 in canonical order")
        if len(set(tokens)) != len(tokens):
            raise InvalidConfigError("vocabulary tokens are not unique")
        self.tokens = list(tokens)
        self.merges = [tuple(m) for m in merges]
        self.target_size = target_size if target_size is not None else len(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.merges == other.merges

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def _encode_word(self, word: str) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        symbols = list(_word_symbols(word))
        while len(symbols) > 1:
            best_rank, best_pair = None, None
            for pair in zip(symbols, symbols[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pair = rank, pair
            if best_pair is None:
                break
            merged, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best_pair:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        ids = tuple(self.id_of(s) for s in symbols)
        self._cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        """Token ids for ``text``, wrapped in BOS ... EOS."""
        ids = [BOS]
        for word in _split_words(text):
            ids.extend(self._encode_word(word))
        ids.append(EOS)
        return ids

    def decode(self, ids) -> str:
        parts = []
        for idx in ids:
            idx = int(idx)
            tok = self.token_of(idx)
            if idx == UNK:
                parts.append(UNK_PLACEHOLDER)
            elif idx >= NUM_SPECIALS:
                parts.append(tok[: -len(EOW)] + " " if tok.endswith(EOW) else tok)
        text = "".join(parts)
        return text[:-1] if text.endswith(" ") else text

    def to_json(self) -> dict:
        return {
            "specials": dict(SPECIAL_TOKENS),
            "tokens": self.tokens,
            "merges": [list(m) for m in self.merges],
            "target_size": self.target_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        specials = obj.get("specials", SPECIAL_TOKENS)
        if specials != SPECIAL_TOKENS:
            raise InvalidConfigError(f"unexpected special-token layout {specials}")
        return cls(obj["tokens"], [tuple(m) for m in obj["merges"]], obj.get("target_size"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def learn_vocab(corpus, target_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Train BPE merges on ``corpus`` until ``target_size`` tokens exist.

    Merging stops early once no adjacent pair occurs at least twice. Ties in
    pair frequency go to the lexicographically smallest merged string.
    """
    corpus = list(corpus)
    if not corpus:
        raise InvalidConfigError("cannot learn a vocabulary from an empty corpus")

    word_freq: Counter[str] = Counter()
    for text in corpus:
        word_freq.update(_split_words(text))
    words = sorted(word_freq)
    seqs = [list(_word_symbols(w)) for w in words]
    freqs = [word_freq[w] for w in words]

    # both positional forms of every character, so any string over the
    # training alphabet encodes without UNK
    chars = {c for text in corpus for c in text if c != " "}
    base = sorted({EOW} | chars | {c + EOW for c in chars})
    if target_size < len(base) + NUM_SPECIALS:
        raise InvalidConfigError(
            f"target_size {target_size} is below the {len(base)} base symbols plus {NUM_SPECIALS} specials"
        )
    tokens = list(SPECIAL_TOKENS) + base
    known = set(tokens)

    pair_counts: defaultdict[tuple[str, str], int] = defaultdict(int)
    where: defaultdict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    heap = [(-c, a + b, (a, b)) for (a, b), c in pair_counts.items()]
    heapq.heapify(heap)
    merges: list[tuple[str, str]] = []

    while len(tokens) < target_size and heap:
        neg_count, merged, pair = heapq.heappop(heap)
        current = pair_counts.get(pair, 0)
        if current != -neg_count:
            if current > 0:
                heapq.heappush(heap, (-current, merged, pair))
            continue
        if current < 2:
            break
        merges.append(pair)
        if merged not in known:
            tokens.append(merged)
            known.add(merged)

        touched: set[tuple[str, str]] = set()
        for wi in sorted(where.pop(pair, ())):
            seq, f = seqs[wi], freqs[wi]
            for old in zip(seq, seq[1:]):
                pair_counts[old] -= f
                touched.add(old)
            out, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[wi] = out
            for new in zip(out, out[1:]):
                pair_counts[new] += f
                where[new].add(wi)
                touched.add(new)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c <= 0:
                pair_counts.pop(p, None)
                where.pop(p, None)
            elif p != pair:
                heapq.heappush(heap, (-c, p[0] + p[1], p))

    return Vocabulary(tokens, merges, target_size)
