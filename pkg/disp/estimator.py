#!/usr/bin/env python3
"""
Embedding estimator: predicts the corpus embedding of the token at the
center of a masked context window.

The center of every (2w+1)-token window is replaced by [MASK], so the
estimate never depends on the surface found at the center.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NoTrainableWindows
from .neural import (
    EncoderConfig,
    EncoderModel,
    TrainingResult,
    Vocabulary,
    check_ids,
    fit,
    register_checkpoint_kind,
)
from .text import Document, EmbeddingCorpus
from .utils import make_rng

logger = logging.getLogger(__name__)


@register_checkpoint_kind('estimator')
class EstimatorModel(nn.Module):
    """
    Encoder plus a d x k projection W^G applied at the window center.

    Args:
        config: Encoder shape; max_seq_len must be at least 2w+1
        vocab: Encoder vocabulary
        k: Embedding corpus dimension
        w: Context half-width
    """

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, k: int, w: int = 2):
        super().__init__()
        if config.vocab_size != len(vocab):
            raise ValueError(f"Encoder vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        if w < 0 or 2 * w + 1 > config.max_seq_len:
            raise ValueError(f"Window 2w+1={2 * w + 1} does not fit max_seq_len={config.max_seq_len}")
        self.config = config
        self.vocab = vocab
        self.k = k
        self.w = w
        self.encoder = EncoderModel(config)
        self.projection = nn.Parameter(torch.empty(config.d, k))
        generator = torch.Generator().manual_seed(config.seed + 2)
        with torch.no_grad():
            self.projection.normal_(0.0, 0.02, generator=generator)

    def forward(self, token_ids, pad_mask=None):
        """(B, 2w+1) windows -> (B, k) estimated embeddings."""
        hidden = self.encoder(token_ids, pad_mask)
        return hidden[:, self.w] @ self.projection

    def checkpoint_header(self) -> dict:
        return {'config': self.config.to_dict(), 'vocab': self.vocab.to_list(), 'k': self.k, 'w': self.w}

    @classmethod
    def from_checkpoint_header(cls, header: dict) -> 'EstimatorModel':
        return cls(EncoderConfig.from_dict(header['config']), Vocabulary(header['vocab']), header['k'], header['w'])


@dataclass(frozen=True)
class ContextWindow:
    """2w+1 ids around `position`, [MASK] at the center, [PAD] past the edges."""

    token_ids: tuple[int, ...]
    pad_mask: tuple[bool, ...]
    position: int
    w: int

    def __post_init__(self):
        if len(self.token_ids) != 2 * self.w + 1 or len(self.pad_mask) != 2 * self.w + 1:
            raise ValueError(f"A window with w={self.w} must have {2 * self.w + 1} entries")

    @property
    def center(self) -> int:
        return self.token_ids[self.w]


@dataclass
class EstimatedEmbedding:
    vector: np.ndarray
    position: int


def extract_window(tokens: Sequence[str], position: int, w: int, vocab: Vocabulary) -> ContextWindow:
    """
    Context window around `position` with the center masked.

    Examples:
        extract_window(['a', 'b', 'c', 'd', 'e'], 0, 2, vocab)
        # ids of [PAD, PAD, MASK, b, c]
    """
    if not 0 <= position < len(tokens):
        raise IndexError(f"Position {position} outside a document of {len(tokens)} tokens")
    special = vocab.special
    ids, mask = [], []
    for j in range(position - w, position + w + 1):
        if j == position:
            ids.append(special.mask)
            mask.append(False)
        elif 0 <= j < len(tokens):
            ids.append(vocab.id(tokens[j]))
            mask.append(False)
        else:
            ids.append(special.pad)
            mask.append(True)
    return ContextWindow(tuple(ids), tuple(mask), position, w)


def _stack(windows: Sequence[ContextWindow]):
    ids = torch.as_tensor([win.token_ids for win in windows], dtype=torch.long)
    mask = torch.as_tensor([win.pad_mask for win in windows], dtype=torch.bool)
    return ids, mask


def estimate_many(model: EstimatorModel, windows: Sequence[ContextWindow]) -> list[EstimatedEmbedding]:
    """Estimated embeddings for a batch of windows, in inference mode."""
    if not windows:
        return []
    ids, mask = _stack(windows)
    check_ids(ids, model.config)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            vectors = model(ids, mask).numpy()
    finally:
        model.train(was_training)
    return [EstimatedEmbedding(vec, win.position) for vec, win in zip(vectors, windows)]


def estimate(model: EstimatorModel, window: ContextWindow) -> EstimatedEmbedding:
    """e = T^G_center W^G for one window."""
    return estimate_many(model, [window])[0]


def embedding_mse(predicted, target):
    """Mean over windows of ||e - t||^2 / k."""
    return F.mse_loss(predicted, target)


def training_windows(documents: Sequence[Document], corpus: EmbeddingCorpus, vocab: Vocabulary,
                     w: int) -> tuple[list[ContextWindow], np.ndarray]:
    """
    Every position of every document whose token has a corpus embedding.

    Returns:
        (windows, (n_windows, k) targets)
    """
    windows, rows = [], []
    skipped = 0
    for doc in documents:
        for i, token in enumerate(doc.tokens):
            row = corpus.lookup(token)
            if row is None:
                skipped += 1
                continue
            windows.append(extract_window(doc.tokens, i, w, vocab))
            rows.append(row)
    if skipped:
        logger.warning(f"Warning: skipped {skipped} window(s) whose center is not in the embedding corpus")
    targets = corpus.vectors[rows] if rows else np.empty((0, corpus.k), dtype=np.float32)
    return windows, targets


def train_estimator(
    model: EstimatorModel,
    documents: Sequence[Document],
    corpus: EmbeddingCorpus,
    epochs: int = 3,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    clip_norm: Optional[float] = 1.0,
    progress: bool = False,
) -> TrainingResult:
    """
    Regress the corpus embedding of each center token from its masked window.

    Raises:
        NoTrainableWindows: If no document token is in the corpus
        ValueError: If the corpus dimension differs from the model's k
    """
    if corpus.k != model.k:
        raise ValueError(f"Corpus has k={corpus.k} but the estimator projects to k={model.k}")
    windows, targets = training_windows(documents, corpus, model.vocab, model.w)
    if not windows:
        raise NoTrainableWindows("No window center is present in the embedding corpus")
    ids, mask = _stack(windows)
    targets = torch.from_numpy(np.array(targets, dtype=np.float32))

    def make_batches(epoch):
        order = torch.from_numpy(make_rng(seed, 'estimator-shuffle', epoch).permutation(len(windows)))
        return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]

    def compute_loss(m, rows):
        return embedding_mse(m(ids[rows], mask[rows]), targets[rows])

    logger.info(f"Training estimator on {len(windows)} windows (w={model.w}) for {epochs} epoch(s)")
    return fit(model, make_batches, compute_loss, epochs, lr=lr, clip_norm=clip_norm,
               seed=seed, desc='estimator', progress=progress)


def estimator_rmse(model: EstimatorModel, documents: Sequence[Document], corpus: EmbeddingCorpus,
                   batch_size: int = 256) -> float:
    """Root of the per-dimension mean squared error on every in-corpus window."""
    windows, targets = training_windows(documents, corpus, model.vocab, model.w)
    if not windows:
        raise NoTrainableWindows("No window center is present in the embedding corpus")
    total = 0.0
    for i in range(0, len(windows), batch_size):
        batch = estimate_many(model, windows[i:i + batch_size])
        predicted = np.stack([e.vector for e in batch]).astype(np.float64)
        total += float(((predicted - targets[i:i + batch_size]) ** 2).sum())
    return math.sqrt(total / (len(windows) * corpus.k))
