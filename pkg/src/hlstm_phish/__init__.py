"""Hierarchical attentive BiLSTMs with supervised attention for phishing email detection."""

from .corpus import Dataset, Email, load_corpus, stratified_kfold
from .textprep import Vocabulary, build_vocab, encode_email, split_sentences, tokenize
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Checkpoint", "Dataset", "Email", "TrainConfig", "Vocabulary", "build_vocab", "encode_email",
    "load_checkpoint", "load_corpus", "save_checkpoint", "split_sentences", "stratified_kfold",
    "tokenize", "train",
]
__version__ = "0.1.0"
