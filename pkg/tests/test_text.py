import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smemvqa.synth import POSITIONS, SynthSpec, absolute_question, generate
from smemvqa.tensor import EmptyQuestionError
from smemvqa.text import PAD, Vocabulary, build_vocab, encode_question, tokenize


@pytest.mark.parametrize("text, expected", [
    ("Is there a cat in the basket?", ["is", "there", "a", "cat", "in", "the", "basket"]),
    ("", []),
    ("RED   square!", ["red", "square"]),
    ("'quoted' (words), ok...", ["quoted", "words", "ok"]),
    ("?! ...", []),
])
def test_tokenize(text, expected):
    assert tokenize(text) == expected


def test_synthetic_answers_are_yes_no():
    train, _ = generate(SynthSpec("absolute", n_train=10, n_test=5))
    vocab, keep = build_vocab(train.corpus())
    assert set(vocab.answers) == {"yes", "no"} and vocab.num_answers == 2
    assert all(keep)
    assert vocab.answers == ["no", "yes"]  # ranked by frequency


def test_single_question_corpus():
    vocab, _ = build_vocab([("a red red square", "yes")])
    assert vocab.tokens == ["a", "red", "square"]


def test_min_freq_threshold():
    corpus = [("red square", "yes"), ("red blob", "no"), ("red square", "no")]
    vocab, _ = build_vocab(corpus, min_freq=3)
    assert vocab.tokens == ["red"]


def test_ids_follow_first_appearance():
    vocab, _ = build_vocab([("b a", "x"), ("c a", "y")])
    assert vocab.token_to_id == {"b": 0, "a": 1, "c": 2}


def test_top_k_answers_flags_exclusions():
    corpus = [("q", "yes")] * 3 + [("q", "no")] * 2 + [("q", "maybe")] + [("q", "blue")]
    vocab, keep = build_vocab(corpus, top_k_answers=3)
    assert vocab.answers == ["yes", "no", "blue"]  # ties broken lexicographically
    assert keep == [True] * 5 + [False, True]


def test_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab([])


def test_padding_is_not_a_token():
    vocab, _ = build_vocab([(absolute_question(p), "no") for p in POSITIONS])
    assert PAD not in vocab.token_to_id.values()
    assert all(0 <= i < len(vocab) for i in vocab.token_to_id.values())


def test_encode_pads_to_length():
    vocab, _ = build_vocab([("is there a cat in the basket", "no")])
    enc = encode_question("Is there a cat in the basket?", vocab, 10)
    assert enc.ids.tolist() == [0, 1, 2, 3, 4, 5, 6, PAD, PAD, PAD]
    assert enc.mask.tolist() == [True] * 7 + [False] * 3


def test_encode_exact_length_has_full_mask():
    vocab, _ = build_vocab([("is there a cat in the basket", "no")])
    enc = encode_question("is there a cat in the basket", vocab, 7)
    assert enc.mask.all() and not enc.truncated


def test_encode_drops_unknown_words():
    vocab, _ = build_vocab([("red square", "no")])
    assert encode_question("a big red square", vocab, 4).ids.tolist() == [0, 1, PAD, PAD]


def test_encode_all_unknown():
    vocab, _ = build_vocab([("red square", "no")])
    with pytest.raises(EmptyQuestionError):
        encode_question("blue circle", vocab, 4)


def test_encode_truncates_and_flags():
    vocab, _ = build_vocab([("a b c d", "no")])
    enc = encode_question("a b c d", vocab, 2)
    assert enc.ids.tolist() == [0, 1] and enc.truncated


words = st.sampled_from(["red", "square", "top", "blob", "is", "there"])


@given(st.lists(words, min_size=1, max_size=6), st.integers(0, 4))
def test_encode_decode_roundtrip(tokens, extra):
    vocab, _ = build_vocab([("red square top blob is there", "no")])
    text = " ".join(t.upper() + "?" for t in tokens)
    enc = encode_question(text, vocab, len(tokens) + extra)
    assert vocab.decode(enc.ids) == tokens
    assert np.array_equal(enc.mask, enc.ids >= 0)
    real = enc.mask.nonzero()[0]
    assert real.tolist() == list(range(len(tokens)))  # real tokens come first


def test_vocab_json_roundtrip():
    vocab, _ = build_vocab([("is there a red square", "yes"), ("on top", "no")], top_k_answers=5)
    doc = vocab.to_json()
    assert json.loads(doc)["tokens"] == vocab.tokens
    again = Vocabulary.from_json(doc)
    assert again.tokens == vocab.tokens and again.answers == vocab.answers
    assert again.hash() == vocab.hash()
