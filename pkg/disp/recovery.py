#!/usr/bin/env python3
"""
Token-level recovery: every flagged token is replaced by the corpus token
nearest to the embedding estimated from its context.

Windows are always read from the attacked document, never from the
partially recovered one, so positions can be recovered in any order.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .discriminator import DiscriminatorModel, PerturbationSet, discriminate
from .errors import VocabularyMismatch
from .estimator import EstimatorModel, estimate_many, extract_window
from .knn import HnswIndex
from .text import Document, EmbeddingCorpus
from .utils import write_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecoveryEntry:
    position: int
    original: str
    recovered: str
    distance: float
    flagged: bool = True


@dataclass
class RecoveryReport:
    """The recovered document and one entry per flagged position, ascending."""

    document: Document
    entries: list[RecoveryEntry] = field(default_factory=list)

    @property
    def changed_positions(self) -> list[int]:
        return [e.position for e in self.entries if e.original != e.recovered]

    def to_dict(self) -> dict:
        return {
            'doc_id': self.document.id,
            'recovered': self.document.text,
            'entries': [asdict(e) for e in self.entries],
        }


def _check_positions(doc: Document, flagged: Sequence[int]):
    for p in flagged:
        if not 0 <= p < len(doc):
            raise ValueError(f"Flagged position {p} outside document {doc.id!r} of {len(doc)} tokens")


def recover_with_embeddings(
    doc_a: Document,
    flagged: PerturbationSet | Sequence[int],
    embeddings: Mapping[int, np.ndarray],
    index: HnswIndex,
    corpus: EmbeddingCorpus,
    ef_search: int = 64,
) -> RecoveryReport:
    """
    Replace each flagged position with the nearest corpus token to its
    embedding, taken from `embeddings` (position -> vector).
    """
    positions = sorted(set(flagged))
    _check_positions(doc_a, positions)
    if positions and index.corpus_hash is not None and index.corpus_hash != corpus.content_hash():
        raise VocabularyMismatch("Index was built over a different embedding corpus")
    replacements = {}
    entries = []
    for p in positions:
        result = index.search(embeddings[p], 1, ef_search)
        node, distance = result.neighbors[0]
        replacements[p] = corpus.tokens[node]
        entries.append(RecoveryEntry(p, doc_a.tokens[p], corpus.tokens[node], float(distance)))
    return RecoveryReport(doc_a.replace_tokens(replacements), entries)


def recover(
    doc_a: Document,
    flagged: PerturbationSet | Sequence[int],
    estimator: EstimatorModel,
    index: HnswIndex,
    corpus: EmbeddingCorpus,
    ef_search: int = 64,
) -> RecoveryReport:
    """
    Recover flagged tokens with embeddings estimated from masked windows of
    `doc_a`. Unflagged positions are returned unchanged.
    """
    positions = sorted(set(flagged))
    _check_positions(doc_a, positions)
    windows = [extract_window(doc_a.tokens, p, estimator.w, estimator.vocab) for p in positions]
    estimated = {e.position: e.vector for e in estimate_many(estimator, windows)}
    return recover_with_embeddings(doc_a, positions, estimated, index, corpus, ef_search)


def recover_with_truth_tokens(
    doc_a: Document,
    flagged: PerturbationSet | Sequence[int],
    clean_doc: Document,
) -> RecoveryReport:
    """Put the clean token back at every flagged position."""
    if len(clean_doc) != len(doc_a):
        raise ValueError(f"Clean document has {len(clean_doc)} tokens, attacked one {len(doc_a)}")
    positions = sorted(set(flagged))
    _check_positions(doc_a, positions)
    replacements = {p: clean_doc.tokens[p] for p in positions}
    entries = [RecoveryEntry(p, doc_a.tokens[p], clean_doc.tokens[p], 0.0) for p in positions]
    return RecoveryReport(doc_a.replace_tokens(replacements), entries)


def defend(
    doc_a: Document,
    discriminator: DiscriminatorModel,
    estimator: EstimatorModel,
    index: HnswIndex,
    corpus: EmbeddingCorpus,
    ef_search: int = 64,
    flagged: Optional[PerturbationSet] = None,
) -> RecoveryReport:
    """
    Discriminate, then recover. The downstream classifier is not involved.

    Args:
        flagged: Use these positions instead of running the discriminator
    """
    if flagged is None:
        flagged, _ = discriminate(discriminator, doc_a)
    return recover(doc_a, flagged, estimator, index, corpus, ef_search)


def write_recovery_reports(reports: Sequence[RecoveryReport], filename: str):
    write_json({'reports': [r.to_dict() for r in reports]}, filename)
    logger.info(f"Wrote {len(reports)} recovery report(s) to {filename}")
