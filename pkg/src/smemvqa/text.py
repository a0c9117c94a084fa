"""Question tokenisation, vocabularies and fixed-length encoding."""
from __future__ import annotations

import hashlib
import json
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tensor import EmptyQuestionError

PAD = -1


def tokenize(text: str) -> list[str]:
    out = []
    for raw in text.lower().split():
        tok = raw.strip(string.punctuation)
        if tok:
            out.append(tok)
    return out


@dataclass
class Vocabulary:
    tokens: list[str]
    answers: list[str]
    min_freq: int = 1
    top_k_answers: int | None = None
    token_to_id: dict[str, int] = field(init=False, repr=False)
    answer_to_class: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.answer_to_class = {a: i for i, a in enumerate(self.answers)}
        if len(self.token_to_id) != len(self.tokens) or len(self.answer_to_class) != len(self.answers):
            raise ValueError("duplicate entries in vocabulary")

    def __len__(self):
        return len(self.tokens)

    @property
    def num_answers(self) -> int:
        return len(self.answers)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids if i >= 0]

    def to_json(self) -> str:
        doc = {
            "tokens": self.tokens,
            "answers": self.answers,
            "min_freq": self.min_freq,
            "top_k_answers": self.top_k_answers,
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        return cls(doc["tokens"], doc["answers"], doc.get("min_freq", 1), doc.get("top_k_answers"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def build_vocab(corpus, min_freq: int = 1, top_k_answers: int | None = None) -> tuple[Vocabulary, list[bool]]:
    """Build question and answer vocabularies from (question, answer) pairs.

    Returns the vocabulary and a per-pair flag that is True when the answer
    survived the top-k cut, i.e. the pair is usable for training.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    order: dict[str, int] = {}
    answer_counts: Counter[str] = Counter()
    for question, answer in corpus:
        for tok in tokenize(question):
            counts[tok] += 1
            order.setdefault(tok, len(order))
        answer_counts[answer] += 1
    tokens = [t for t in sorted(order, key=order.__getitem__) if counts[t] >= min_freq]
    ranked = sorted(answer_counts, key=lambda a: (-answer_counts[a], a))
    if top_k_answers is not None:
        ranked = ranked[:top_k_answers]
    vocab = Vocabulary(tokens, ranked, min_freq, top_k_answers)
    keep = [a in vocab.answer_to_class for _, a in corpus]
    return vocab, keep


@dataclass
class EncodedQuestion:
    ids: np.ndarray
    mask: np.ndarray
    text: str
    truncated: bool = False

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def encode_question(question: str, vocab: Vocabulary, T: int) -> EncodedQuestion:
    """Map known tokens to ids, drop unknown ones, right-pad with -1 to T.

    Questions longer than T keep their first T known tokens and are flagged
    ``truncated`` so callers can record it.
    """
    ids = [vocab.token_to_id[t] for t in tokenize(question) if t in vocab.token_to_id]
    if not ids:
        raise EmptyQuestionError(f"empty question after vocabulary lookup: {question!r}")
    truncated = len(ids) > T
    ids = ids[:T]
    arr = np.full(T, PAD, dtype=np.int64)
    arr[: len(ids)] = ids
    return EncodedQuestion(arr, arr >= 0, question, truncated)


def longest_question(questions, vocab: Vocabulary) -> int:
    return max(sum(t in vocab.token_to_id for t in tokenize(q)) for q in questions)
