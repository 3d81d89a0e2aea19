#!/usr/bin/env python3
"""
Perturbation discriminator: a token-level binary classifier that flags
which tokens of a document were perturbed, together with the construction
of its training corpus and its detection metrics.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from .attacks import AttackConfig, attackable_positions, get_attack, perturb_document
from .errors import AttackError
from .neural import (
    EncoderConfig,
    EncoderModel,
    TrainingResult,
    Vocabulary,
    check_ids,
    chunk_ranges,
    fit,
    init_parameters,
    pad_batch,
    register_checkpoint_kind,
)
from .text import AttackKind, Document, EmbeddingCorpus, PerturbationRecord
from .utils import ensure_parent_dir, make_rng

logger = logging.getLogger(__name__)

NOT_PERTURBED = 0
PERTURBED = 1


@register_checkpoint_kind('discriminator')
class DiscriminatorModel(nn.Module):
    """
    Encoder followed by a 2-way linear head per token.

    The head (weight 2 x d, bias 2) gives logits y_i^c = w_c . T_i + b_c.
    """

    def __init__(self, config: EncoderConfig, vocab: Vocabulary):
        super().__init__()
        if config.vocab_size != len(vocab):
            raise ValueError(f"Encoder vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.config = config
        self.vocab = vocab
        self.encoder = EncoderModel(config)
        self.head = nn.Linear(config.d, 2)
        init_parameters(self.head, config.seed + 1)

    def forward(self, token_ids, pad_mask=None):
        return self.head(self.encoder(token_ids, pad_mask))

    def checkpoint_header(self) -> dict:
        return {'config': self.config.to_dict(), 'vocab': self.vocab.to_list()}

    @classmethod
    def from_checkpoint_header(cls, header: dict) -> 'DiscriminatorModel':
        return cls(EncoderConfig.from_dict(header['config']), Vocabulary(header['vocab']))


@dataclass(frozen=True)
class PerturbationSet:
    """Token positions flagged as perturbed in a document of `length` tokens."""

    positions: frozenset[int]
    length: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'positions', frozenset(int(p) for p in self.positions))
        for p in self.positions:
            if p < 0 or (self.length is not None and p >= self.length):
                raise ValueError(f"Position {p} outside a document of {self.length} tokens")

    @classmethod
    def from_records(cls, records: Iterable[PerturbationRecord], length: Optional[int] = None) -> 'PerturbationSet':
        return cls(frozenset(r.position for r in records), length)

    def __iter__(self):
        return iter(sorted(self.positions))

    def __len__(self) -> int:
        return len(self.positions)

    def __contains__(self, position: int) -> bool:
        return position in self.positions


@dataclass(frozen=True)
class DiscriminatorTrainingExample:
    """One encoder-sized slice of a perturbed document with per-token labels."""

    token_ids: tuple[int, ...]
    labels: tuple[int, ...]
    pad_mask: tuple[bool, ...] = ()
    doc_id: str = ''

    def __post_init__(self):
        if not self.pad_mask:
            object.__setattr__(self, 'pad_mask', (False,) * len(self.token_ids))
        if not (len(self.token_ids) == len(self.labels) == len(self.pad_mask)):
            raise ValueError("token_ids, labels and pad_mask must have equal length")
        for label, padded in zip(self.labels, self.pad_mask):
            if label not in (NOT_PERTURBED, PERTURBED):
                raise ValueError(f"Labels must be 0 or 1, got {label}")
            if padded and label != NOT_PERTURBED:
                raise ValueError("Padded positions must carry label 0")


def token_labels(length: int, records: Iterable[PerturbationRecord]) -> list[int]:
    """1 at every perturbed position, 0 elsewhere."""
    labels = [NOT_PERTURBED] * length
    for record in records:
        labels[record.position] = PERTURBED
    return labels


def examples_for_document(doc: Document, records: Sequence[PerturbationRecord],
                          vocab: Vocabulary, max_len: int) -> list[DiscriminatorTrainingExample]:
    """Split a labeled document into non-overlapping max_len examples."""
    ids = vocab.encode(doc.tokens)
    labels = token_labels(len(doc), records)
    return [
        DiscriminatorTrainingExample(tuple(ids[a:b]), tuple(labels[a:b]), doc_id=doc.id)
        for a, b in chunk_ranges(len(ids), max_len)
    ]


def build_training_batch(
    docs: Sequence[Document],
    corpus: Optional[EmbeddingCorpus],
    vocab: Vocabulary,
    seed: int,
    epoch: int,
    kinds: Optional[Sequence[AttackKind]] = None,
    max_attacks: int = 3,
    embed_top_k: int = 10,
    max_len: int = 64,
) -> list[DiscriminatorTrainingExample]:
    """
    Perturb every document afresh for one training epoch.

    Each document gets a uniformly drawn attack kind and a uniformly drawn
    number of attacks in 1..max_attacks (capped by its attackable tokens).
    The stream is derived from (seed, epoch), so each epoch sees new
    perturbations. Documents no attack can touch are skipped.
    """
    if not docs:
        raise ValueError("build_training_batch needs at least one document")
    kinds = list(kinds) if kinds else list(AttackKind)
    rng = make_rng(seed, 'discriminator-corpus', epoch)
    attacks = {kind: get_attack(kind, embed_top_k) for kind in kinds}

    examples = []
    skipped = 0
    for doc in docs:
        kind = kinds[int(rng.integers(len(kinds)))]
        wanted = int(rng.integers(1, max_attacks + 1))
        available = len(attackable_positions(doc, attacks[kind], corpus))
        if available == 0:
            skipped += 1
            continue
        cfg = AttackConfig(kind, min(wanted, available), embed_top_k=embed_top_k)
        try:
            perturbed, records = perturb_document(doc, cfg, corpus, rng)
        except AttackError:
            skipped += 1
            continue
        examples.extend(examples_for_document(perturbed, records, vocab, max_len))
    if skipped:
        logger.warning(f"Warning: skipped {skipped} document(s) with no attackable tokens in epoch {epoch}")
    return examples


def collate(examples: Sequence[DiscriminatorTrainingExample], pad_id: int = 0):
    """Stack examples into (ids, pad_mask, labels) tensors."""
    ids, mask = pad_batch([e.token_ids for e in examples], pad_id)
    labels = torch.zeros(ids.shape, dtype=torch.long)
    for row, e in enumerate(examples):
        labels[row, :len(e.labels)] = torch.as_tensor(e.labels, dtype=torch.long)
        mask[row, :len(e.pad_mask)] |= torch.as_tensor(e.pad_mask, dtype=torch.bool)
    return ids, mask, labels


def token_cross_entropy(logits, labels, pad_mask=None):
    """Mean softmax cross-entropy over non-padded positions."""
    if pad_mask is None:
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1))
    keep = ~pad_mask
    return F.cross_entropy(logits[keep], labels[keep])


def train_discriminator(
    model: DiscriminatorModel,
    documents: Sequence[Document],
    corpus: Optional[EmbeddingCorpus],
    epochs: int = 3,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    kinds: Optional[Sequence[AttackKind]] = None,
    clip_norm: Optional[float] = 1.0,
    progress: bool = False,
) -> TrainingResult:
    """
    Train encoder and head jointly on freshly perturbed documents.

    Returns:
        TrainingResult with per-epoch mean token cross-entropy

    Raises:
        NonFiniteLoss: Naming the epoch and batch that produced it
    """
    pad_id = model.vocab.special.pad

    def make_batches(epoch):
        examples = build_training_batch(
            documents, corpus, model.vocab, seed, epoch, kinds=kinds, max_len=model.config.max_seq_len,
        )
        order = make_rng(seed, 'discriminator-shuffle', epoch).permutation(len(examples))
        shuffled = [examples[i] for i in order]
        return [collate(shuffled[i:i + batch_size], pad_id) for i in range(0, len(shuffled), batch_size)]

    def compute_loss(m, batch):
        ids, mask, labels = batch
        return token_cross_entropy(m(ids, mask), labels, mask)

    logger.info(f"Training discriminator on {len(documents)} documents for {epochs} epoch(s)")
    return fit(model, make_batches, compute_loss, epochs, lr=lr, clip_norm=clip_norm,
               seed=seed, desc='discriminator', progress=progress)


def discriminate(model: DiscriminatorModel, doc: Document) -> tuple[PerturbationSet, np.ndarray]:
    """
    Flag perturbed tokens of `doc`.

    Documents longer than max_seq_len are processed in non-overlapping chunks.
    A token is flagged when its 'perturbed' logit is strictly greater, so
    equal logits leave it unflagged.

    Returns:
        (flagged positions, (N, 2) logits)
    """
    ids = model.vocab.encode(doc.tokens)
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with torch.no_grad():
            for a, b in chunk_ranges(len(ids), model.config.max_seq_len):
                piece = torch.as_tensor(ids[a:b], dtype=torch.long)[None]
                check_ids(piece, model.config)
                chunks.append(model(piece)[0])
    finally:
        model.train(was_training)
    logits = torch.cat(chunks).numpy()
    flagged = np.nonzero(logits[:, PERTURBED] > logits[:, NOT_PERTURBED])[0]
    return PerturbationSet(frozenset(flagged.tolist()), len(doc)), logits


@dataclass
class DetectionMetrics:
    """Micro-averaged detection counts."""

    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        # No predictions scores 0, so a silent discriminator is penalized.
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def add(self, predicted: PerturbationSet, truth: Iterable[PerturbationRecord]):
        true_positions = {r.position for r in truth}
        self.tp += len(predicted.positions & true_positions)
        self.fp += len(predicted.positions - true_positions)
        self.fn += len(true_positions - predicted.positions)

    def to_dict(self) -> dict:
        return {'precision': self.precision, 'recall': self.recall, 'f1': self.f1,
                'tp': self.tp, 'fp': self.fp, 'fn': self.fn}


def eval_discriminator(
    preds: Sequence[PerturbationSet],
    truth: Sequence[Sequence[PerturbationRecord]],
    kinds: Optional[Sequence[Optional[AttackKind]]] = None,
) -> dict[str, DetectionMetrics]:
    """
    Precision, recall and F1 per attack kind and overall.

    Args:
        preds: Flagged positions per attacked document
        truth: Ground-truth records per document, aligned with preds
        kinds: Attack kind per document; defaults to the kind of the first record

    Returns:
        Kind name -> metrics, with an 'overall' entry covering every document
    """
    if len(preds) != len(truth):
        raise ValueError(f"{len(preds)} predictions but {len(truth)} ground-truth entries")
    metrics = {'overall': DetectionMetrics()}
    for i, (predicted, records) in enumerate(zip(preds, truth)):
        kind = kinds[i] if kinds is not None else (records[0].kind if records else None)
        metrics['overall'].add(predicted, records)
        if kind is not None:
            metrics.setdefault(AttackKind(kind).value, DetectionMetrics()).add(predicted, records)
    return metrics


def detection_table(metrics: dict[str, DetectionMetrics]) -> pd.DataFrame:
    """Precision/Recall/F1 rows by attack-kind columns, Overall last."""
    columns = [k.value for k in AttackKind if k.value in metrics] + ['overall']
    data = {
        col.capitalize(): [metrics[col].precision, metrics[col].recall, metrics[col].f1]
        for col in columns
    }
    return pd.DataFrame(data, index=['Precision', 'Recall', 'F1'])


def write_detection_table(metrics: dict[str, DetectionMetrics], filename: str):
    ensure_parent_dir(filename)
    detection_table(metrics).to_csv(filename, float_format='%.4f')
    logger.info(f"Wrote detection table to {filename}")
