"""Rank-based word importance scores and the supervised-attention penalty."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from statistics import median
from typing import Dict, List

import numpy as np

from .corpus import Dataset
from .textprep import PAD, UNK, Vocabulary, email_tokens


@dataclass
class WordImportance:
    token: str
    phishing_freq: int
    legit_freq: int
    phishing_rank: int
    legit_rank: int

    @property
    def score_fraction(self) -> Fraction:
        return Fraction(self.legit_rank, self.phishing_rank)

    @property
    def score(self) -> float:
        return self.legit_rank / self.phishing_rank


class ImportanceTable:
    """Per-word ranks and scores, plus a dense score lookup by vocabulary index."""

    def __init__(self, entries: Dict[str, WordImportance], vocab: Vocabulary):
        self.entries = entries
        self.vocab = vocab
        scores = np.zeros(len(vocab))
        for token, entry in entries.items():
            scores[vocab.index(token)] = entry.score
        self.unk_score = float(median(e.score for e in entries.values())) if entries else 1.0
        scores[PAD] = 0.0
        scores[UNK] = self.unk_score
        self.by_index = scores

    def __getitem__(self, token: str) -> WordImportance:
        return self.entries[token]

    def __len__(self) -> int:
        return len(self.entries)

    def ranked(self) -> List[WordImportance]:
        """Entries sorted by score descending, token ascending on ties."""
        return sorted(self.entries.values(), key=lambda e: (-e.score_fraction, e.token))

    def to_tsv(self, top=None) -> str:
        rows = self.ranked()
        if top is not None:
            rows = rows[:top]
        lines = ["token\tphishing_freq\tlegit_freq\tphishingRank\tlegitimateRank\tscore"]
        for e in rows:
            lines.append(f"{e.token}\t{e.phishing_freq}\t{e.legit_freq}\t{e.phishing_rank}\t{e.legit_rank}\t{e.score:.6f}")
        return "\n".join(lines) + "\n"


def _ranks(freq: Dict[str, int]) -> Dict[str, int]:
    order = sorted(freq, key=lambda tok: (-freq[tok], tok))
    return {tok: n for n, tok in enumerate(order, start=1)}


def compute_ranks(dataset: Dataset, vocab: Vocabulary) -> ImportanceTable:
    """Document frequency per class, ranked descending (1-based, ties by token)."""
    labels = {e.label for e in dataset.emails}
    if labels != {0, 1}:
        raise ValueError(f"importance ranks need both classes labeled, found labels {sorted(labels, key=str)}")
    words = vocab.words()
    phish = dict.fromkeys(words, 0)
    legit = dict.fromkeys(words, 0)
    for email in dataset.emails:
        target = phish if email.label == 1 else legit
        for tok in set(email_tokens(email)):
            if tok in target:
                target[tok] += 1
    p_rank, l_rank = _ranks(phish), _ranks(legit)
    entries = {
        tok: WordImportance(tok, phish[tok], legit[tok], p_rank[tok], l_rank[tok]) for tok in words
    }
    return ImportanceTable(entries, vocab)


def sentence_scores(ids, mask, table: ImportanceTable) -> np.ndarray:
    """Per-sentence normalized importance over real tokens.

    Works on a single row (K,) or any stack of rows (..., K); all-padding
    rows come back as zeros.
    """
    raw = table.by_index[np.asarray(ids)] * np.asarray(mask)
    total = raw.sum(axis=-1, keepdims=True)
    return np.divide(raw, total, out=np.zeros_like(raw), where=total > 0)


def attention_penalty(alpha, g, mask) -> np.ndarray:
    """Sum of squared differences over real tokens, one value per leading index.

    For (B, L, K) inputs the result has shape (B,).
    """
    alpha, g, mask = np.asarray(alpha), np.asarray(g), np.asarray(mask)
    if not (alpha.shape == g.shape == mask.shape):
        raise RuntimeError(f"shape mismatch: alpha {alpha.shape}, g {g.shape}, mask {mask.shape}")
    diff = (alpha - g) * mask
    return np.sum(diff * diff, axis=tuple(range(1, diff.ndim))) if diff.ndim > 1 else np.sum(diff * diff)


def attention_penalty_grad(alpha, g, mask) -> np.ndarray:
    return 2.0 * (np.asarray(alpha) - np.asarray(g)) * np.asarray(mask)
