"""Email corpora: loading from disk and stratified fold assignment."""

from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

LEGIT_DIR = "legit"
PHISH_DIR = "phish"
CSV_COLUMNS = ("id", "header", "body", "label")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Email:
    id: str
    body: str
    header: Optional[str] = None
    label: Optional[int] = None

    def __post_init__(self):
        if not self.body.strip():
            raise CorpusError(f"email {self.id!r} has an empty body")
        if self.label is not None and self.label not in (0, 1):
            raise CorpusError(f"email {self.id!r} has label {self.label!r}, expected 0 or 1")


@dataclass
class Dataset:
    emails: List[Email]
    has_headers: bool = False

    def __post_init__(self):
        ids = [e.id for e in self.emails]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate email ids in dataset")
        if self.has_headers and any(e.header is None for e in self.emails):
            raise CorpusError("has_headers is set but some emails lack a header")

    def __len__(self) -> int:
        return len(self.emails)

    def __iter__(self):
        return iter(self.emails)

    @property
    def labels(self) -> List[Optional[int]]:
        return [e.label for e in self.emails]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.emails[i] for i in indices], has_headers=self.has_headers)

    def without_headers(self) -> "Dataset":
        """Bodies only, as when a header-less model is applied to a full-header corpus."""
        stripped = [Email(e.id, e.body, None, e.label) for e in self.emails]
        return Dataset(stripped, has_headers=False)


@dataclass
class FoldAssignment:
    fold_of: Dict[str, int]
    k: int

    def test_indices(self, dataset: Dataset, fold: int) -> List[int]:
        return [i for i, e in enumerate(dataset.emails) if self.fold_of[e.id] == fold]

    def train_indices(self, dataset: Dataset, fold: int) -> List[int]:
        return [i for i, e in enumerate(dataset.emails) if self.fold_of[e.id] != fold]


def _read_text(path: Path) -> str:
    return path.read_bytes().decode("utf-8", errors="replace")


def _load_two_dirs(root: Path) -> List[Email]:
    emails = []
    for sub, label in ((LEGIT_DIR, 0), (PHISH_DIR, 1)):
        d = root / sub
        if not d.is_dir():
            raise CorpusError(f"two-dirs layout requires {d}")
        for path in sorted(d.glob("*.txt")):
            body = _read_text(path)
            email_id = f"{sub}/{path.name}"
            if not body.strip():
                logger.warning("dropping %s: empty body", email_id)
                continue
            emails.append(Email(email_id, body, None, label))
    return emails


def _load_flat_dir(root: Path) -> List[Email]:
    emails = []
    for path in sorted(root.glob("*.txt")):
        body = _read_text(path)
        if not body.strip():
            logger.warning("dropping %s: empty body", path.name)
            continue
        emails.append(Email(path.name, body))
    return emails


def _parse_label(raw: str, row_no: int) -> Optional[int]:
    raw = raw.strip()
    if raw == "":
        return None
    if raw not in ("0", "1"):
        raise CorpusError(f"row {row_no}: label must be 0, 1 or empty, got {raw!r}")
    return int(raw)


def _load_csv(path: Path) -> List[Email]:
    emails = []
    with open(path, newline="", encoding="utf-8", errors="replace") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise CorpusError(f"{path}: empty corpus") from None
        if tuple(c.strip() for c in head) != CSV_COLUMNS:
            raise CorpusError(f"{path}: header row must be {','.join(CSV_COLUMNS)}, got {head}")
        # row numbers are 1-based file records, the header being row 1
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise CorpusError(f"row {row_no}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            email_id, header, body, label = row
            if not email_id:
                raise CorpusError(f"row {row_no}: missing id")
            label_value = _parse_label(label, row_no)
            if not body.strip():
                logger.warning("dropping row %d (%s): empty body", row_no, email_id)
                continue
            emails.append(Email(email_id, body, header if header != "" else None, label_value))
    return emails


def load_corpus(root_path, layout: str = "auto", allow_empty: bool = False) -> Dataset:
    """Load a corpus.

    ``layout`` is ``"two-dirs"`` (``legit/*.txt`` and ``phish/*.txt``),
    ``"csv"`` (columns ``id,header,body,label``), ``"flat"`` (unlabeled
    ``*.txt`` files) or ``"auto"`` to pick from the path.
    """
    root = Path(root_path)
    if not root.exists():
        raise FileNotFoundError(f"corpus path does not exist: {root}")
    if layout == "auto":
        if root.is_file():
            layout = "csv"
        elif (root / LEGIT_DIR).is_dir() or (root / PHISH_DIR).is_dir():
            layout = "two-dirs"
        else:
            layout = "flat"

    if layout == "csv":
        emails = _load_csv(root)
    elif layout == "two-dirs":
        emails = _load_two_dirs(root)
    elif layout == "flat":
        emails = _load_flat_dir(root)
    else:
        raise CorpusError(f"unknown layout {layout!r}")

    if not emails and not allow_empty:
        raise CorpusError(f"{root}: empty corpus")
    has_headers = bool(emails) and all(e.header is not None for e in emails)
    logger.info("loaded %d emails from %s (%s)", len(emails), root, layout)
    return Dataset(emails, has_headers=has_headers)


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for e in dataset.emails:
            label = "" if e.label is None else str(e.label)
            writer.writerow([e.id, e.header or "", e.body, label])


def stratified_kfold(dataset: Dataset, k: int, seed: int = 0) -> FoldAssignment:
    """Shuffle each class with a seeded RNG, then deal its emails round-robin.

    Each class continues dealing where the previous one stopped, so fold
    sizes differ by at most one overall as well as per class.
    """
    if k < 2:
        raise CorpusError(f"k must be at least 2, got {k}")
    if k > len(dataset):
        raise CorpusError(f"k={k} exceeds the number of emails ({len(dataset)})")
    rng = random.Random(seed)
    by_class: Dict[Optional[int], List[str]] = {}
    for e in dataset.emails:
        by_class.setdefault(e.label, []).append(e.id)
    for label, ids in by_class.items():
        if len(ids) < k:
            logger.warning("class %r has %d emails, fewer than k=%d folds", label, len(ids), k)

    fold_of: Dict[str, int] = {}
    offset = 0
    for label in sorted(by_class, key=lambda v: (v is None, v)):
        ids = list(by_class[label])
        rng.shuffle(ids)
        for n, email_id in enumerate(ids):
            fold_of[email_id] = (offset + n) % k
        offset = (offset + len(ids)) % k
    return FoldAssignment(fold_of=fold_of, k=k)


def stratified_holdout(labels, fraction: float, seed: int = 0):
    """Split indices into (train, held_out) keeping class proportions."""
    rng = random.Random(seed)
    by_class: Dict[int, List[int]] = {}
    for i, y in enumerate(labels):
        by_class.setdefault(y, []).append(i)
    train, held = [], []
    for label in sorted(by_class):
        idx = list(by_class[label])
        rng.shuffle(idx)
        n_held = int(round(fraction * len(idx)))
        if len(idx) > 1:
            n_held = min(max(n_held, 1), len(idx) - 1)
        else:
            n_held = 0
        held.extend(idx[:n_held])
        train.extend(idx[n_held:])
    return sorted(train), sorted(held)
