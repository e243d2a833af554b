"""Sentence splitting, tokenization, vocabulary and fixed-shape encoding."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .corpus import Dataset, Email

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
SENTENCE_END = frozenset(".!?")
MIN_SENTENCE_TOKENS = 3


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, peel punctuation off both ends of each chunk.

    >>> tokenize("Click HERE!")
    ['click', 'here', '!']
    """
    tokens: List[str] = []
    for chunk in text.lower().split():
        start, end = 0, len(chunk)
        while start < end and _is_punct(chunk[start]):
            start += 1
        while end > start and _is_punct(chunk[end - 1]):
            end -= 1
        tokens.extend(chunk[:start])
        if start < end:
            tokens.append(chunk[start:end])
        tokens.extend(chunk[end:])
    return tokens


def _capitalized(word: str) -> bool:
    # lines starting with digits, quotes or symbols do not open a sentence
    return word[:1].isupper()


def _raw_sentences(body: str) -> List[List[str]]:
    sentences: List[List[str]] = []
    current: List[str] = []
    prev: Optional[str] = None
    for line in body.splitlines():
        words = line.split()
        for n, word in enumerate(words):
            starts_line = n == 0
            after_end = prev is not None and prev[-1] in SENTENCE_END
            if current and _capitalized(word) and (starts_line or after_end):
                sentences.append(current)
                current = []
            current.append(word)
            prev = word
    if current:
        sentences.append(current)
    return sentences


def split_sentences(body: str) -> List[str]:
    """Split an email body into sentences.

    A sentence opens at a capitalized word that either begins a line or
    directly follows a word ending in ``.``, ``!`` or ``?``. Sentences with
    fewer than three tokens are then folded into the next sentence, or into
    the previous one when nothing follows.
    """
    merged: List[List[str]] = []
    carry: List[str] = []
    for words in _raw_sentences(body):
        words = carry + words
        if len(tokenize(" ".join(words))) < MIN_SENTENCE_TOKENS:
            carry = words
            continue
        merged.append(words)
        carry = []
    if carry:
        if merged:
            merged[-1] = merged[-1] + carry
        else:
            merged.append(carry)
    return [" ".join(words) for words in merged]


class Vocabulary:
    """Token <-> index map with PAD=0 and UNK=1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(token)
            self.stoi[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def words(self) -> List[str]:
        """Non-special entries in index order."""
        return self.itos[2:]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.words()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.split("\n") if line)


def email_tokens(email: Email) -> List[str]:
    toks = tokenize(email.body)
    if email.header:
        toks = tokenize(email.header) + toks
    return toks


def build_vocab(dataset: Dataset, min_count: int = 2) -> Vocabulary:
    counts: Counter = Counter()
    for email in dataset.emails:
        counts.update(email_tokens(email))
    kept = [(tok, n) for tok, n in counts.items() if n >= min_count]
    kept.sort(key=lambda item: (-item[1], item[0]))
    return Vocabulary(tok for tok, _ in kept)


def extend_vocab(vocab: Vocabulary, tokens: Iterable[str]) -> Vocabulary:
    """Copy of ``vocab`` with ``tokens`` appended (e.g. words of a pretrained embedding file)."""
    out = Vocabulary(vocab.words())
    for tok in tokens:
        out.add(tok)
    return out


@dataclass
class EncodedEmail:
    body_ids: np.ndarray          # (L, K) int
    body_mask: np.ndarray         # (L, K) float 0/1
    sentence_mask: np.ndarray     # (L,) float 0/1
    header_ids: Optional[np.ndarray] = None   # (H,)
    header_mask: Optional[np.ndarray] = None  # (H,)
    label: Optional[int] = None

    @property
    def has_header(self) -> bool:
        return self.header_ids is not None


def encode_email(email: Email, vocab: Vocabulary, L: int = 30, K: int = 50, H: int = 30) -> EncodedEmail:
    if min(L, K, H) < 1:
        raise ValueError("L, K and H must all be >= 1")
    body_ids = np.zeros((L, K), dtype=np.int64)
    for i, sentence in enumerate(split_sentences(email.body)[:L]):
        ids = [vocab.index(t) for t in tokenize(sentence)[:K]]
        body_ids[i, : len(ids)] = ids
    # every real token has index >= UNK, so the mask is recoverable from the ids
    body_mask = (body_ids != PAD).astype(np.float64)
    sentence_mask = body_mask.any(axis=1).astype(np.float64)

    header_ids = header_mask = None
    if email.header is not None:
        header_ids = np.zeros(H, dtype=np.int64)
        ids = [vocab.index(t) for t in tokenize(email.header)[:H]]
        header_ids[: len(ids)] = ids
        header_mask = (header_ids != PAD).astype(np.float64)
    return EncodedEmail(body_ids, body_mask, sentence_mask, header_ids, header_mask, email.label)


@dataclass
class Batch:
    """Stacked encodings of several emails."""

    body_ids: np.ndarray       # (B, L, K)
    body_mask: np.ndarray
    sentence_mask: np.ndarray  # (B, L)
    header_ids: Optional[np.ndarray]
    header_mask: Optional[np.ndarray]
    labels: Optional[np.ndarray]

    def __len__(self) -> int:
        return self.body_ids.shape[0]


def stack(encoded: Sequence[EncodedEmail]) -> Batch:
    if not encoded:
        raise ValueError("cannot stack an empty list of emails")
    with_header = all(e.has_header for e in encoded)
    labels = None
    if all(e.label is not None for e in encoded):
        labels = np.array([e.label for e in encoded], dtype=np.float64)
    return Batch(
        body_ids=np.stack([e.body_ids for e in encoded]),
        body_mask=np.stack([e.body_mask for e in encoded]),
        sentence_mask=np.stack([e.sentence_mask for e in encoded]),
        header_ids=np.stack([e.header_ids for e in encoded]) if with_header else None,
        header_mask=np.stack([e.header_mask for e in encoded]) if with_header else None,
        labels=labels,
    )
