#!/usr/bin/env python3
"""
The protected model: a document classifier trained on clean data only.

Mean-pooled encoder output over non-padded positions feeds a linear layer
with one output per class. Documents longer than max_seq_len are split into
chunks whose class probabilities are averaged.
"""

import logging
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .neural import (
    EncoderConfig,
    EncoderModel,
    TrainingResult,
    Vocabulary,
    chunk_ranges,
    fit,
    init_parameters,
    pad_batch,
    register_checkpoint_kind,
)
from .text import Dataset, Document, Split
from .utils import make_rng

logger = logging.getLogger(__name__)


@register_checkpoint_kind('classifier')
class ClassifierModel(nn.Module):
    def __init__(self, config: EncoderConfig, vocab: Vocabulary, num_classes: int):
        super().__init__()
        if config.vocab_size != len(vocab):
            raise ValueError(f"Encoder vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        if num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {num_classes}")
        self.config = config
        self.vocab = vocab
        self.num_classes = num_classes
        self.encoder = EncoderModel(config)
        self.head = nn.Linear(config.d, num_classes)
        init_parameters(self.head, config.seed + 3)

    def forward(self, token_ids, pad_mask=None):
        """(B, L) ids -> (B, C) logits."""
        hidden = self.encoder(token_ids, pad_mask)
        if pad_mask is None:
            pooled = hidden.mean(dim=1)
        else:
            keep = (~pad_mask).unsqueeze(-1).to(hidden.dtype)
            pooled = (hidden * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return self.head(pooled)

    def checkpoint_header(self) -> dict:
        return {'config': self.config.to_dict(), 'vocab': self.vocab.to_list(), 'num_classes': self.num_classes}

    @classmethod
    def from_checkpoint_header(cls, header: dict) -> 'ClassifierModel':
        return cls(EncoderConfig.from_dict(header['config']), Vocabulary(header['vocab']), header['num_classes'])

    def predict_proba(self, doc: Document) -> np.ndarray:
        return predict_proba(self, doc)


def predict_proba(model: ClassifierModel, doc: Document) -> np.ndarray:
    """Class probabilities for `doc`; out-of-vocabulary tokens read as [UNK]."""
    ids = model.vocab.encode(doc.tokens)
    chunks = [ids[a:b] for a, b in chunk_ranges(len(ids), model.config.max_seq_len)]
    batch, mask = pad_batch(chunks, model.vocab.special.pad)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            proba = model(batch, mask).double().softmax(dim=-1).mean(dim=0)
    finally:
        model.train(was_training)
    return proba.numpy()


def predict(model: ClassifierModel, doc: Document) -> tuple[int, float]:
    """(argmax class, its probability)."""
    proba = predict_proba(model, doc)
    label = int(np.argmax(proba))
    return label, float(proba[label])


def accuracy(model: ClassifierModel, documents: Sequence[Document]) -> float:
    if not documents:
        return 0.0
    return float(np.mean([predict(model, doc)[0] == doc.label for doc in documents]))


def train_classifier(
    dataset: Dataset,
    config: EncoderConfig,
    vocab: Vocabulary,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    clip_norm: Optional[float] = 1.0,
    progress: bool = False,
) -> TrainingResult:
    """
    Train a new classifier on clean documents with softmax cross-entropy.

    Over-length documents are truncated to max_seq_len during training.

    Raises:
        ValueError: If the dataset is not a training split
        NonFiniteLoss: Naming the epoch and batch that produced it
    """
    if dataset.split != Split.TRAIN:
        raise ValueError(f"Classifiers train on the train split, got {dataset.split.value}")
    model = ClassifierModel(config, vocab, dataset.num_classes)
    max_len = config.max_seq_len
    sequences = [vocab.encode(doc.tokens)[:max_len] for doc in dataset]
    labels = torch.as_tensor([doc.label for doc in dataset], dtype=torch.long)

    def make_batches(epoch):
        order = make_rng(seed, 'classifier-shuffle', epoch).permutation(len(sequences))
        batches = []
        for i in range(0, len(order), batch_size):
            rows = order[i:i + batch_size]
            ids, mask = pad_batch([sequences[r] for r in rows], vocab.special.pad)
            batches.append((ids, mask, labels[torch.from_numpy(rows)]))
        return batches

    def compute_loss(m, batch):
        ids, mask, y = batch
        return F.cross_entropy(m(ids, mask), y)

    logger.info(f"Training classifier on {len(dataset)} documents for {epochs} epoch(s)")
    return fit(model, make_batches, compute_loss, epochs, lr=lr, clip_norm=clip_norm,
               seed=seed, desc='classifier', progress=progress)
