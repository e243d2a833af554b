"""Loss assembly, the mini-batch training loop, and checkpoint files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import model as M
from .corpus import Dataset, stratified_holdout
from .embeddings import embedding_matrix, load_embeddings
from .numcore import AdamState, ParamStore, adam_step, clip_frobenius
from .supervision import ImportanceTable, attention_penalty, attention_penalty_grad, compute_ranks, sentence_scores
from .textprep import Batch, EncodedEmail, Vocabulary, build_vocab, encode_email, extend_vocab, stack

logger = logging.getLogger(__name__)

BCE_EPS = 1e-12
MAGIC = b"HLSTM-CKPT-1\n"
MAGIC_PREFIX = b"HLSTM-CKPT-"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.0025
    batch_size: int = 32
    max_epochs: int = 100
    patience: Optional[int] = 10     # None trains all epochs on all data, no validation split
    lam: float = 0.1
    dropout: float = 0.5
    clip: float = 0.3
    clip_target: str = "grad"        # "grad" or "weight"
    seed: int = 0
    L: int = 30
    K: int = 50
    H: int = 30
    embed_dim: int = 300
    cell: int = 60
    att: int = 60
    use_header: bool = False
    use_supervision: bool = True
    min_count: int = 2
    val_fraction: float = 0.1

    def __post_init__(self):
        for name in ("lr", "clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "max_epochs", "L", "K", "H", "embed_dim", "cell", "att", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 or None")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.clip_target not in ("grad", "weight"):
            raise ValueError("clip_target must be 'grad' or 'weight'")

    @property
    def supervised(self) -> bool:
        return self.use_supervision and self.lam > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class LossBreakdown:
    classification: float
    penalty: float
    lam: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    val_precision: Optional[float] = None
    val_recall: Optional[float] = None
    val_f1: Optional[float] = None


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss", "penalty", "val_precision", "val_recall", "val_f1"])
        for rec in self.epochs:
            val = [("" if v is None else repr(float(v))) for v in (rec.val_precision, rec.val_recall, rec.val_f1)]
            writer.writerow([rec.epoch, repr(float(rec.loss.total)), repr(float(rec.loss.penalty)), *val])
        return buf.getvalue()


def bce_loss(p, y):
    """Binary cross-entropy and dL/dp, with p clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (p - y) / (p * (1.0 - p))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def batch_loss(batch: Batch, params: ParamStore, lam: float = 0.0, table: Optional[ImportanceTable] = None,
               dropout: float = 0.0, rng=None, grads: Optional[Dict[str, np.ndarray]] = None,
               backward: bool = True):
    """Mean loss over the batch; gradients are accumulated into ``grads`` (default ``params.grads``).

    The attention penalty is active only when ``lam > 0`` and a table is given.
    Returns ``(LossBreakdown, trace)``.
    """
    if batch.labels is None:
        raise ValueError("batch_loss needs labeled emails")
    trace = M.forward(batch, params, dropout=dropout, rng=rng)
    n = len(batch)
    y = batch.labels
    ce, _ = bce_loss(trace.p, y)
    supervised = lam > 0 and table is not None
    if supervised:
        g = sentence_scores(batch.body_ids, batch.body_mask, table)
        pen = attention_penalty(trace.alpha, g, batch.body_mask)
    else:
        pen = np.zeros(n)
    classification = float(np.mean(ce))
    penalty = float(np.mean(pen))
    total = classification + lam * penalty if supervised else classification
    breakdown = LossBreakdown(classification, penalty, lam if supervised else 0.0, total)
    if backward:
        # derivative through the logistic output taken directly: (p - y) per email
        dlogit = (trace.p - y) / n
        dalpha = lam * attention_penalty_grad(trace.alpha, g, batch.body_mask) / n if supervised else None
        M.backward(trace, params, dlogit, dalpha, grads=grads)
    return breakdown, trace


@dataclass
class Checkpoint:
    params: ParamStore
    config: TrainConfig
    vocab: Vocabulary
    adam: Optional[AdamState] = None
    history: Optional[TrainHistory] = None
    table: Optional[ImportanceTable] = None

    @property
    def use_header(self) -> bool:
        return "sub.W" in self.params

    def encode(self, dataset: Dataset) -> List[EncodedEmail]:
        c = self.config
        return [encode_email(e, self.vocab, c.L, c.K, c.H) for e in dataset.emails]

    def predict_proba(self, dataset: Dataset) -> np.ndarray:
        if self.use_header and not dataset.has_headers:
            raise ValueError("model was trained with headers but the corpus has none")
        if not self.use_header and dataset.has_headers:
            dataset = dataset.without_headers()
        if len(dataset) == 0:
            return np.zeros(0)
        return M.predict_batch(self.encode(dataset), self.params)

    def predict(self, dataset: Dataset, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(dataset) >= threshold).astype(int)


def prepare_vocab(dataset: Dataset, config: TrainConfig, vectors=None) -> Vocabulary:
    vocab = build_vocab(dataset, config.min_count)
    if vectors:
        vocab = extend_vocab(vocab, vectors.keys())
    return vocab


def _minibatches(n: int, size: int, rng) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i: i + size] for i in range(0, n, size)]


def train(dataset: Dataset, config: TrainConfig, embeddings=None,
          on_epoch: Optional[Callable[[int, Checkpoint], bool]] = None) -> Checkpoint:
    """Train an H-LSTM; returns the best-validation checkpoint (or the last one without validation).

    ``embeddings`` may be a path to a word-vector file or an already loaded
    ``{token: vector}`` mapping. ``on_epoch(epoch, checkpoint)`` may return
    True to stop early.
    """
    from .evaluation import score  # local: evaluation imports train for cross-validation

    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if any(e.label is None for e in dataset.emails):
        raise TrainingError("training needs labeled emails")
    if config.use_header and not dataset.has_headers:
        raise TrainingError("use_header is set but the dataset has no headers")
    if not config.use_header and dataset.has_headers:
        dataset = dataset.without_headers()

    vectors = load_embeddings(embeddings) if isinstance(embeddings, (str, Path)) else embeddings
    embed_dim = config.embed_dim
    if vectors:
        embed_dim = len(next(iter(vectors.values())))
        if embed_dim != config.embed_dim:
            logger.info("embedding file dim %d overrides configured %d", embed_dim, config.embed_dim)
            config = TrainConfig.from_dict({**config.to_dict(), "embed_dim": embed_dim})

    labels = [e.label for e in dataset.emails]
    if config.patience is not None:
        train_idx, val_idx = stratified_holdout(labels, config.val_fraction, seed=config.seed)
    else:
        train_idx, val_idx = list(range(len(dataset))), []
    train_set = dataset.subset(train_idx)

    vocab = prepare_vocab(train_set, config, vectors)
    table = compute_ranks(train_set, vocab) if config.supervised else None
    dims = M.ModelDims(len(vocab), embed_dim, config.cell, config.att, config.use_header)
    table0 = embedding_matrix(vocab, vectors, embed_dim, seed=config.seed) if vectors else None
    params = M.init_params(dims, seed=config.seed, embedding=table0)
    adam = AdamState.for_params(params, lr=config.lr)

    encoded = [encode_email(e, vocab, config.L, config.K, config.H) for e in train_set.emails]
    val_encoded = [encode_email(dataset.emails[i], vocab, config.L, config.K, config.H) for i in val_idx]
    val_labels = [dataset.emails[i].label for i in val_idx]

    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_f1, best_params, stale = -1.0, None, 0
    ckpt = Checkpoint(params, config, vocab, adam, history, table)

    for epoch in range(1, config.max_epochs + 1):
        sums = np.zeros(3)
        for n_batch, idx in enumerate(_minibatches(len(encoded), config.batch_size, rng)):
            batch = stack([encoded[i] for i in idx])
            params.zero_grad()
            loss, _ = batch_loss(batch, params, config.lam, table, config.dropout, rng)
            if not math.isfinite(loss.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {n_batch}: {loss}")
            if config.clip_target == "grad":
                clip_frobenius(params, config.clip, "grad")
            adam_step(params, adam)
            if config.clip_target == "weight":
                clip_frobenius(params, config.clip, "weight")
            sums += len(idx) * np.array([loss.classification, loss.penalty, loss.total])
        mean = sums / len(encoded)
        record = EpochRecord(epoch, LossBreakdown(float(mean[0]), float(mean[1]), loss.lam, float(mean[2])))
        history.epochs.append(record)

        if val_encoded:
            preds = (M.predict_batch(val_encoded, params) >= 0.5).astype(int)
            m = score(preds, val_labels)
            record.val_precision, record.val_recall, record.val_f1 = m.precision, m.recall, m.f1
            logger.info("epoch %d loss %.5f val F1 %.4f", epoch, record.loss.total, m.f1)
            if m.f1 > best_f1:
                best_f1, best_params, stale = m.f1, params.copy(), 0
            else:
                stale += 1
        else:
            logger.info("epoch %d loss %.5f", epoch, record.loss.total)

        if on_epoch is not None and on_epoch(epoch, ckpt):
            break
        if config.patience is not None and stale >= config.patience:
            logger.info("early stop after epoch %d (best val F1 %.4f)", epoch, best_f1)
            break

    if best_params is not None:
        ckpt.params = best_params
    return ckpt


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic line, header length, JSON header, then little-endian float64 blobs."""
    names = ckpt.params.names()
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.words(),
        "params": [
            {"name": n, "shape": list(ckpt.params[n].shape), "embedding": ckpt.params.is_embedding[n]}
            for n in names
        ],
        "adam": None,
    }
    blobs = [ckpt.params[n] for n in names]
    if ckpt.adam is not None:
        a = ckpt.adam
        header["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t}
        blobs += [a.m[n] for n in names] + [a.v[n] for n in names]
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, use_header: Optional[bool] = None) -> Checkpoint:
    """Read a checkpoint; ``use_header`` guards against mixing header and body-only models."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC_PREFIX):
        raise CheckpointError(f"{path}: not a checkpoint")
    if not data.startswith(MAGIC):
        version = data[len(MAGIC_PREFIX):].split(b"\n", 1)[0].decode("ascii", "replace")
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (head_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + head_len:
        raise CheckpointError(f"{path}: truncated checkpoint")
    try:
        header = json.loads(data[pos: pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    pos += head_len

    def read(shape):
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos = end
        return arr

    params = ParamStore()
    specs = header["params"]
    for spec in specs:
        params.add(spec["name"], read(tuple(spec["shape"])), spec["embedding"])
    adam = None
    if header.get("adam") is not None:
        a = header["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
        for spec in specs:
            adam.m[spec["name"]] = read(tuple(spec["shape"]))
        for spec in specs:
            adam.v[spec["name"]] = read(tuple(spec["shape"]))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after checkpoint data")

    config = TrainConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocab"])
    if params["embed"].shape[0] != len(vocab):
        raise CheckpointError(f"{path}: vocabulary size {len(vocab)} does not match embedding rows {params['embed'].shape[0]}")
    ckpt = Checkpoint(params, config, vocab, adam)
    if use_header is not None and use_header != ckpt.use_header:
        trained = "with" if ckpt.use_header else "without"
        wanted = "with" if use_header else "without"
        raise CheckpointError(f"{path}: header mismatch, model was trained {trained} headers but prediction requested {wanted} headers")
    return ckpt
