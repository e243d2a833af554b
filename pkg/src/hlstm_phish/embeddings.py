"""Word-vector files in the plain-text ``<count> <dim>`` interchange format."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict

import numpy as np

from .model import INIT_SCALE
from .textprep import PAD, Vocabulary

logger = logging.getLogger(__name__)


class EmbeddingFormatError(ValueError):
    pass


def load_embeddings(path) -> Dict[str, np.ndarray]:
    """Read ``token v1 ... vd`` lines after a ``count dim`` header line."""
    path = Path(path)
    vectors: Dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        first = fh.readline().split()
        if len(first) != 2:
            raise EmbeddingFormatError(f"{path}: first line must be '<count> <dim>'")
        try:
            count, dim = int(first[0]), int(first[1])
        except ValueError:
            raise EmbeddingFormatError(f"{path}: first line must be '<count> <dim>'") from None
        for line_no, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(f"{path}:{line_no}: expected {dim} values, got {len(parts) - 1}")
            token = parts[0]
            if token in vectors:
                logger.warning("%s:%d: duplicate token %r ignored", path, line_no, token)
                continue
            vectors[token] = np.array(parts[1:], dtype=np.float64)
    if len(vectors) != count:
        logger.warning("%s: header announces %d vectors, read %d", path, count, len(vectors))
    return vectors


def save_embeddings(vectors: Dict[str, np.ndarray], path) -> None:
    dim = len(next(iter(vectors.values()))) if vectors else 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(vectors)} {dim}\n")
        for token, vec in vectors.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def embedding_matrix(vocab: Vocabulary, vectors: Dict[str, np.ndarray], dim: int, seed=0) -> np.ndarray:
    """Rows from ``vectors`` where available, uniform(-0.08, 0.08) otherwise, zero PAD row."""
    rng = np.random.default_rng(seed)
    table = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(len(vocab), dim))
    hits = 0
    for idx, token in enumerate(vocab.itos):
        vec = vectors.get(token)
        if vec is not None:
            if vec.shape != (dim,):
                raise EmbeddingFormatError(f"vector for {token!r} has dim {vec.shape[0]}, expected {dim}")
            table[idx] = vec
            hits += 1
    table[PAD] = 0.0
    logger.info("embedding coverage: %d / %d vocabulary entries", hits, len(vocab))
    return table
