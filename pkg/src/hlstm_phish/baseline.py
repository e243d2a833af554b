"""tf-idf / embedding-mean features and a linear SVM trained by stochastic subgradient descent."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .corpus import Dataset
from .textprep import Vocabulary, email_tokens

SVM_ITERATIONS = 100_000


@dataclass
class FeatureMatrix:
    values: np.ndarray   # (n_emails, n_features)
    kind: str            # "tfidf", "embed_mean" or "concat"

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"f{j}" for j in range(self.values.shape[1])])
            for row in self.values:
                writer.writerow([repr(float(v)) for v in row])


class TfidfModel:
    """idf statistics fitted on a training set: idf = ln((1+N)/(1+df)) + 1."""

    def __init__(self, vocab: Vocabulary, train: Dataset):
        self.vocab = vocab
        self.words = vocab.words()
        self.column = {w: j for j, w in enumerate(self.words)}
        df = Counter()
        for email in train.emails:
            df.update(t for t in set(email_tokens(email)) if t in self.column)
        n = len(train)
        self.idf = np.array([np.log((1.0 + n) / (1.0 + df[w])) + 1.0 for w in self.words])

    def transform(self, dataset: Dataset) -> FeatureMatrix:
        X = np.zeros((len(dataset), len(self.words)))
        for i, email in enumerate(dataset.emails):
            for tok, count in Counter(email_tokens(email)).items():
                j = self.column.get(tok)
                if j is not None:
                    X[i, j] = count
        X *= self.idf
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        np.divide(X, norms, out=X, where=norms > 0)
        return FeatureMatrix(X, "tfidf")


def tfidf_features(dataset: Dataset, vocab: Vocabulary, train: Optional[Dataset] = None) -> FeatureMatrix:
    """tf-idf rows for ``dataset``; idf comes from ``train`` (defaults to ``dataset`` itself)."""
    return TfidfModel(vocab, train if train is not None else dataset).transform(dataset)


def embed_mean_features(dataset: Dataset, embeddings: Dict[str, np.ndarray]) -> FeatureMatrix:
    dim = len(next(iter(embeddings.values())))
    X = np.zeros((len(dataset), dim))
    for i, email in enumerate(dataset.emails):
        vecs = [embeddings[t] for t in email_tokens(email) if t in embeddings]
        if vecs:
            X[i] = np.mean(vecs, axis=0)
    return FeatureMatrix(X, "embed_mean")


def concat_features(*blocks: FeatureMatrix) -> FeatureMatrix:
    return FeatureMatrix(np.hstack([b.values for b in blocks]), "concat")


@dataclass
class LinearSvmModel:
    w: np.ndarray
    b: float
    C: float

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X) @ self.w + self.b


def svm_objective(w, b, X, y01, C) -> float:
    """0.5 * |w|^2 + C * sum(hinge), labels in {0, 1}."""
    y = 2.0 * np.asarray(y01, dtype=float) - 1.0
    margins = y * (np.asarray(X) @ w + b)
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - margins).sum())


def svm_train(features, labels, C: float = 10.0, seed: int = 0,
              iterations: int = SVM_ITERATIONS, trace_every: Optional[int] = None):
    """Pegasos-style subgradient descent on 0.5|w|^2 + C * sum(hinge).

    The objective is rescaled to (lam/2)|w|^2 + mean(hinge) with lam = 1/(nC),
    which has the same minimizer; step size is 1/(lam t). The bias is an
    extra constant feature. The returned model is the average of the
    iterates over the second half of the run.

    With ``trace_every`` set, also returns the list of averaged iterates
    ``(t, w, b)`` sampled every ``trace_every`` steps.
    """
    X = np.asarray(features.values if isinstance(features, FeatureMatrix) else features, dtype=float)
    y01 = np.asarray(labels, dtype=int)
    if set(np.unique(y01).tolist()) != {0, 1}:
        raise ValueError("svm_train needs examples of both classes")
    n, dim = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    y = 2.0 * y01 - 1.0
    lam = 1.0 / (n * C)
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, n, size=iterations)

    w = np.zeros(dim + 1)
    avg = np.zeros(dim + 1)
    n_avg = 0
    start_avg = iterations // 2
    trace = []
    for t in range(1, iterations + 1):
        i = picks[t - 1]
        eta = 1.0 / (lam * t)
        violated = y[i] * (Xa[i] @ w) < 1.0
        w *= 1.0 - eta * lam
        if violated:
            w += eta * y[i] * Xa[i]
        norm = np.sqrt(w @ w)
        if norm > radius:
            w *= radius / norm
        if t > start_avg:
            n_avg += 1
            avg += (w - avg) / n_avg
        if trace_every and t % trace_every == 0 and n_avg:
            trace.append((t, avg[:-1].copy(), float(avg[-1])))
    model = LinearSvmModel(avg[:-1].copy(), float(avg[-1]), C)
    if trace_every:
        return model, trace
    return model


def svm_predict(model: LinearSvmModel, features) -> np.ndarray:
    X = features.values if isinstance(features, FeatureMatrix) else features
    return (model.decision_function(X) > 0).astype(int)
