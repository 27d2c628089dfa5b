import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camf.errors import InvalidConfigError
from camf.fixtures import synthetic_glosses
from camf.tokenizer import BOS, EOS, EOW, MASK, PAD, UNK, UNK_PLACEHOLDER, Vocabulary, learn_vocab

CORPUS = synthetic_glosses(40, seed=1)
ALPHABET = sorted(set("".join(CORPUS)))


@pytest.fixture(scope="module")
def vocab():
    return learn_vocab(CORPUS, 120)


def _inventory(chars: int) -> int:
    # inner and word-final form of each character, the bare marker, five specials
    return 2 * chars + 1 + 5


def test_no_merges_at_minimum_size():
    v = learn_vocab(["ab"], _inventory(2))
    assert v.merges == []
    assert sorted(v.tokens[5:]) == sorted([EOW, "a", "a" + EOW, "b", "b" + EOW])


def test_below_inventory_rejected():
    with pytest.raises(InvalidConfigError):
        learn_vocab(["abc"], _inventory(3) - 1)


def test_empty_corpus_rejected():
    with pytest.raises(InvalidConfigError):
        learn_vocab([], 100)


def test_empty_glosses_do_not_crash():
    v = learn_vocab(["", "ab ab", ""], 50)
    assert v.encode("") == [BOS, EOS]


def test_aaab_merge_order():
    v = learn_vocab(["aaab", "aaab"], 100)
    assert v.merges[:2] == [("a", "a"), ("aa", "a")]


def test_aaab_encoding_after_two_merges():
    v = learn_vocab(["aaab", "aaab"], _inventory(2) + 2)
    assert v.merges == [("a", "a"), ("aa", "a")]
    assert v.encode("aaab") == [BOS, v.id_of("aaa"), v.id_of("b" + EOW), EOS]


def test_tie_breaks_on_smallest_merged_string():
    # "xy" and "ab" both occur twice; "ab" sorts first
    v = learn_vocab(["xy ab", "ab xy"], 100)
    assert v.merges[0] == ("a", "b" + EOW)


def test_learning_stops_when_no_pair_repeats():
    v = learn_vocab(["abcd"], 1000)
    assert v.merges == []


def test_specials_fixed(vocab):
    assert vocab.tokens[:5] == ["<pad>", "<s>", "</s>", "<unk>", "<mask>"]
    assert (PAD, BOS, EOS, UNK, MASK) == (0, 1, 2, 3, 4)


def test_ids_round_trip(vocab):
    assert all(vocab.id_of(vocab.token_of(i)) == i for i in range(len(vocab)))
    assert len(set(vocab.tokens)) == len(vocab)


def test_encode_empty(vocab):
    assert vocab.encode("") == [BOS, EOS]
    assert vocab.decode([BOS, EOS]) == ""


def test_every_alphabet_symbol_known(vocab):
    for c in ALPHABET:
        assert UNK not in vocab.encode(f"{c}{c} {c}  ")


def test_unknown_character_becomes_unk(vocab):
    ids = vocab.encode("a Z")
    assert UNK in ids
    assert vocab.decode(ids) == f"a {UNK_PLACEHOLDER}"


def test_decode_bad_id(vocab):
    with pytest.raises(IndexError):
        vocab.decode([BOS, len(vocab), EOS])


def test_corpus_round_trip(vocab):
    for gloss in CORPUS:
        assert vocab.decode(vocab.encode(gloss)) == gloss


def test_merges_shorten_sequences(vocab):
    chars = learn_vocab(CORPUS, _inventory(len(ALPHABET) - 1))
    assert sum(map(len, map(vocab.encode, CORPUS))) < sum(map(len, map(chars.encode, CORPUS)))


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=ALPHABET, max_size=60))
def test_round_trip_property(vocab, text):
    assert vocab.decode(vocab.encode(text)) == text


def test_round_trip_random_strings(vocab):
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        s = "".join(rng.choice(ALPHABET, size=rng.integers(0, 40)))
        assert vocab.decode(vocab.encode(s)) == s


def test_deterministic():
    assert learn_vocab(CORPUS, 120) == learn_vocab(list(CORPUS), 120)


def test_json_round_trip(vocab, tmp_path):
    path = tmp_path / "vocab.json"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    assert loaded == vocab
    assert loaded.encode(CORPUS[0]) == vocab.encode(CORPUS[0])
    assert json.loads(path.read_text())["target_size"] == 120
