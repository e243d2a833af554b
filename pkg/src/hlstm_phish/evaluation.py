"""Precision/recall/F1 and the cross-validation and train/test protocols."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baseline import TfidfModel, concat_features, embed_mean_features, svm_predict, svm_train
from .corpus import Dataset, stratified_kfold
from .textprep import build_vocab
from .train import TrainConfig, train

logger = logging.getLogger(__name__)

MODELS = ("hlstm", "hlstm-supervised", "svm-tfidf", "svm-embedding", "svm-concat")


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class MeanMetrics:
    precision: float
    recall: float
    f1: float


def score(predictions: Sequence[int], labels: Sequence[int]) -> Metrics:
    """Confusion counts with phishing (1) as the positive class."""
    pred = np.asarray(predictions, dtype=int)
    gold = np.asarray(labels, dtype=int)
    if pred.shape != gold.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {gold.size} labels")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction list")
    return Metrics(
        tp=int(np.sum((pred == 1) & (gold == 1))),
        fp=int(np.sum((pred == 1) & (gold == 0))),
        tn=int(np.sum((pred == 0) & (gold == 0))),
        fn=int(np.sum((pred == 0) & (gold == 1))),
    )


def mean_metrics(folds: Sequence[Metrics]) -> MeanMetrics:
    return MeanMetrics(
        precision=float(np.mean([m.precision for m in folds])),
        recall=float(np.mean([m.recall for m in folds])),
        f1=float(np.mean([m.f1 for m in folds])),
    )


def pooled_metrics(folds: Sequence[Metrics]) -> Metrics:
    return Metrics(*(sum(getattr(m, k) for m in folds) for k in ("tp", "fp", "tn", "fn")))


def fit_predict(model: str, train_set: Dataset, test_set: Dataset, config: TrainConfig,
                embeddings: Optional[Dict[str, np.ndarray]] = None, svm_C: float = 10.0) -> np.ndarray:
    """Train ``model`` on ``train_set`` and return 0/1 predictions for ``test_set``.

    ``model`` is one of :data:`MODELS` or a callable ``(train_set, test_set) -> predictions``.
    """
    if callable(model):
        return np.asarray(model(train_set, test_set), dtype=int)
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; choose from {', '.join(MODELS)}")
    if model.startswith("hlstm"):
        cfg = TrainConfig.from_dict({**config.to_dict(), "use_supervision": model == "hlstm-supervised"})
        ckpt = train(train_set, cfg, embeddings=embeddings)
        return ckpt.predict(test_set)

    if model in ("svm-embedding", "svm-concat") and not embeddings:
        raise ValueError(f"{model} needs word embeddings")
    if not config.use_header:
        train_set, test_set = train_set.without_headers(), test_set.without_headers()
    y = [e.label for e in train_set.emails]
    blocks_train, blocks_test = [], []
    if model in ("svm-tfidf", "svm-concat"):
        tfidf = TfidfModel(build_vocab(train_set, config.min_count), train_set)
        blocks_train.append(tfidf.transform(train_set))
        blocks_test.append(tfidf.transform(test_set))
    if model in ("svm-embedding", "svm-concat"):
        blocks_train.append(embed_mean_features(train_set, embeddings))
        blocks_test.append(embed_mean_features(test_set, embeddings))
    X_train, X_test = (blocks[0] if len(blocks) == 1 else concat_features(*blocks)
                       for blocks in (blocks_train, blocks_test))
    svm = svm_train(X_train, y, C=svm_C, seed=config.seed)
    return svm_predict(svm, X_test)


@dataclass
class CVResult:
    model: str
    folds: List[Metrics]

    @property
    def mean(self) -> MeanMetrics:
        return mean_metrics(self.folds)

    @property
    def pooled(self) -> Metrics:
        return pooled_metrics(self.folds)


def cross_validate(dataset: Dataset, config: TrainConfig, k: int = 5, seed: int = 0,
                   model: str = "hlstm-supervised", embeddings=None, svm_C: float = 10.0) -> CVResult:
    """Stratified k-fold: train on k-1 folds, score the held-out one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    folds = stratified_kfold(dataset, k, seed)
    results = []
    for f in range(k):
        train_set = dataset.subset(folds.train_indices(dataset, f))
        test_set = dataset.subset(folds.test_indices(dataset, f))
        try:
            preds = fit_predict(model, train_set, test_set, config, embeddings, svm_C)
        except Exception as exc:
            raise RuntimeError(f"fold {f}: {exc}") from exc
        m = score(preds, test_set.labels)
        logger.info("%s fold %d: P %.4f R %.4f F1 %.4f", getattr(model, "__name__", model), f, m.precision, m.recall, m.f1)
        results.append(m)
    return CVResult(getattr(model, "__name__", str(model)), results)


def metrics_csv(rows) -> str:
    """CSV of ``(model, fold, metrics)`` rows; metrics may be Metrics or MeanMetrics."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "fold", "precision", "recall", "f1"])
    for model, fold, m in rows:
        writer.writerow([model, fold, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}"])
    return buf.getvalue()
