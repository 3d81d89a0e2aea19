#!/usr/bin/env python3
"""
The five adversarial attacks and the document-level attack drivers.

Character-level attacks (insertion, deletion, swap) edit one token's
surface, keeping the first character (and for deletion and swap the last
one) in place. Word-level attacks (random, embed) swap the whole token for
another token of the embedding corpus, so every attack is recoverable in
principle.
"""

import logging
import string
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .attack_base import AttackBase
from .errors import (
    EmptyVocabulary,
    NoDistinctPair,
    NotEnoughAttackableTokens,
    TokenNotInCorpus,
    TokenTooShort,
)
from .knn import brute_force_knn
from .text import AttackKind, Document, EmbeddingCorpus, PerturbationRecord
from .utils import make_rng

logger = logging.getLogger(__name__)

LETTERS = string.ascii_lowercase


class InsertCharacter(AttackBase):
    """Inject one random letter a..z at an interior position."""

    def __init__(self):
        super().__init__(name="Insert character", kind=AttackKind.INSERTION, min_length=1)

    def apply(self, token, rng, corpus=None):
        if len(token) < 1:
            raise TokenTooShort("Cannot insert into an empty token")
        position = int(rng.integers(1, len(token))) if len(token) >= 2 else 1
        ch = LETTERS[int(rng.integers(len(LETTERS)))]
        return token[:position] + ch + token[position:]


class DeleteCharacter(AttackBase):
    """Remove one interior character; the first and last stay."""

    def __init__(self):
        super().__init__(name="Delete character", kind=AttackKind.DELETION, min_length=3)

    def apply(self, token, rng, corpus=None):
        if len(token) < 3:
            raise TokenTooShort(f"Deletion needs at least 3 characters, got {token!r}")
        position = int(rng.integers(1, len(token) - 1))
        return token[:position] + token[position + 1:]


def swap_at(token: str, position: int) -> str:
    """Exchange the characters at `position` and `position + 1`."""
    return token[:position] + token[position + 1] + token[position] + token[position + 2:]


def distinct_interior_pairs(token: str) -> list[int]:
    """Positions p in 1..len-3 whose pair (p, p+1) holds two different characters."""
    return [p for p in range(1, len(token) - 2) if token[p] != token[p + 1]]


class SwapCharacters(AttackBase):
    """Flip two adjacent interior characters."""

    def __init__(self):
        super().__init__(name="Swap characters", kind=AttackKind.SWAP, min_length=4)

    def is_attackable(self, token, corpus=None):
        return super().is_attackable(token, corpus) and bool(distinct_interior_pairs(token))

    def apply(self, token, rng, corpus=None):
        if len(token) < 4:
            raise TokenTooShort(f"Swap needs at least 4 characters, got {token!r}")
        pairs = distinct_interior_pairs(token)
        if not pairs:
            raise NoDistinctPair(f"No adjacent interior pair of distinct characters in {token!r}")
        return swap_at(token, pairs[int(rng.integers(len(pairs)))])


class RandomWord(AttackBase):
    """Replace the token with a uniformly sampled, different corpus token."""

    def __init__(self):
        super().__init__(name="Random word", kind=AttackKind.RANDOM, min_length=1)

    def is_attackable(self, token, corpus=None):
        return super().is_attackable(token, corpus) and corpus is not None and corpus.n >= 2

    def apply(self, token, rng, corpus=None):
        if corpus is None or corpus.n < 2:
            raise EmptyVocabulary("Random replacement needs a corpus with at least 2 tokens")
        row = corpus.lookup(token)
        if row is None:
            return corpus.tokens[int(rng.integers(corpus.n))]
        pick = int(rng.integers(corpus.n - 1))
        return corpus.tokens[pick + 1 if pick >= row else pick]


class EmbedWord(AttackBase):
    """
    Replace the token with one of its top_k nearest corpus neighbors.

    Args:
        top_k: Number of exact Euclidean neighbors to sample from (the token
            itself excluded); clipped to n - 1
    """

    def __init__(self, top_k: int = 10):
        if top_k < 1:
            raise ValueError(f"top_k must be at least 1, got {top_k}")
        self.top_k = top_k
        super().__init__(name=f"Embed word (top {top_k})", kind=AttackKind.EMBED, min_length=1)

    def is_attackable(self, token, corpus=None):
        return (super().is_attackable(token, corpus) and corpus is not None
                and corpus.n >= 2 and token in corpus)

    def neighbors(self, token: str, corpus: EmbeddingCorpus) -> list[int]:
        """Corpus rows of the top_k nearest neighbors of `token`, nearest first."""
        row = corpus.lookup(token)
        if row is None:
            raise TokenNotInCorpus(f"{token!r} is not in the embedding corpus")
        result = brute_force_knn(corpus, corpus.vectors[row], self.top_k + 1)
        return [i for i in result.ids if i != row][:self.top_k]

    def apply(self, token, rng, corpus=None):
        if corpus is None:
            raise EmptyVocabulary("Embed replacement needs an embedding corpus")
        candidates = self.neighbors(token, corpus)
        if not candidates:
            raise EmptyVocabulary("Embed replacement needs a corpus with at least 2 tokens")
        return corpus.tokens[candidates[int(rng.integers(len(candidates)))]]


def get_attack(kind: AttackKind | str, embed_top_k: int = 10) -> AttackBase:
    """Attack object for an AttackKind."""
    kind = AttackKind(kind)
    if kind == AttackKind.INSERTION:
        return InsertCharacter()
    if kind == AttackKind.DELETION:
        return DeleteCharacter()
    if kind == AttackKind.SWAP:
        return SwapCharacters()
    if kind == AttackKind.RANDOM:
        return RandomWord()
    return EmbedWord(top_k=embed_top_k)


def attack_insertion(token: str, rng: np.random.Generator) -> str:
    return InsertCharacter().apply(token, rng)


def attack_deletion(token: str, rng: np.random.Generator) -> str:
    return DeleteCharacter().apply(token, rng)


def attack_swap(token: str, rng: np.random.Generator) -> str:
    return SwapCharacters().apply(token, rng)


def attack_random(token: str, vocab: EmbeddingCorpus, rng: np.random.Generator) -> str:
    return RandomWord().apply(token, rng, vocab)


def attack_embed(token: str, corpus: EmbeddingCorpus, rng: np.random.Generator, top_k: int = 10) -> str:
    return EmbedWord(top_k=top_k).apply(token, rng, corpus)


@dataclass(frozen=True)
class AttackConfig:
    """
    Settings for attacking one document.

    Args:
        kind: Which attack to apply
        num_attacks: Number of distinct positions to perturb (0 leaves the
            document untouched)
        rng_seed: Seed from which per-document streams are derived
        embed_top_k: Neighborhood size for embed attacks
    """

    kind: AttackKind
    num_attacks: int = 1
    rng_seed: int = 0
    embed_top_k: int = 10

    def __post_init__(self):
        object.__setattr__(self, 'kind', AttackKind(self.kind))
        if self.num_attacks < 0:
            raise ValueError(f"num_attacks must be non-negative, got {self.num_attacks}")
        if self.embed_top_k < 1:
            raise ValueError(f"embed_top_k must be at least 1, got {self.embed_top_k}")


def attackable_positions(doc: Document, attack: AttackBase, corpus: Optional[EmbeddingCorpus] = None) -> list[int]:
    """Positions of `doc` that `attack` may target."""
    return [i for i, token in enumerate(doc.tokens) if attack.is_attackable(token, corpus)]


def perturb_document(
    doc: Document,
    cfg: AttackConfig,
    corpus: Optional[EmbeddingCorpus] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Document, list[PerturbationRecord]]:
    """
    Apply `cfg.num_attacks` attacks of one kind at distinct positions.

    Positions are drawn uniformly without replacement among the attackable
    ones. Without an explicit `rng` the stream is derived from
    (cfg.rng_seed, doc.id), so the output depends only on the inputs.

    Returns:
        The perturbed document (same length) and one record per position,
        ascending by position

    Raises:
        NotEnoughAttackableTokens: If fewer than num_attacks positions qualify
    """
    if cfg.num_attacks == 0:
        return doc, []
    if rng is None:
        rng = make_rng(cfg.rng_seed, 'perturb', doc.id, cfg.kind.value, cfg.num_attacks)
    attack = get_attack(cfg.kind, cfg.embed_top_k)
    eligible = attackable_positions(doc, attack, corpus)
    if len(eligible) < cfg.num_attacks:
        raise NotEnoughAttackableTokens(
            f"Document {doc.id!r} has {len(eligible)} tokens attackable by {attack.name}, "
            f"needs {cfg.num_attacks}"
        )
    chosen = sorted(int(p) for p in rng.choice(eligible, size=cfg.num_attacks, replace=False))
    replacements = {}
    records = []
    for position in chosen:
        original = doc.tokens[position]
        replacement = attack.apply(original, rng, corpus)
        replacements[position] = replacement
        records.append(PerturbationRecord(position, attack.kind, original, replacement))
    return doc.replace_tokens(replacements), records


class Predictor(Protocol):
    """Anything that maps a document to class probabilities."""

    def predict_proba(self, doc: Document) -> np.ndarray: ...


@dataclass
class OracleCandidate:
    document: Document
    records: list[PerturbationRecord]
    label: int
    confidence: float


def oracle_attack(
    doc: Document,
    model: Predictor,
    cfg: AttackConfig,
    corpus: Optional[EmbeddingCorpus] = None,
    candidates: int = 50,
    return_candidates: bool = False,
):
    """
    Oracle-guided attack: pick the most damaging of `candidates` variants.

    The model is queried on `doc` first and then on each candidate in order.
    The first candidate whose predicted label differs from the prediction on
    `doc` is returned. If none flips, the candidate with the lowest probability
    for the original prediction wins, ties going to the lowest index.

    Candidate c is drawn from a stream seeded by (cfg.rng_seed, doc.id, c).

    Returns:
        (document, records), or (document, records, candidate list) when
        return_candidates is True. The candidate list stops at the returned
        candidate when it flips the prediction.
    """
    if candidates < 1:
        raise ValueError(f"candidates must be at least 1, got {candidates}")
    original_label = int(np.argmax(model.predict_proba(doc)))

    tried = []
    best = None
    for c in range(candidates):
        rng = make_rng(cfg.rng_seed, 'oracle', doc.id, cfg.kind.value, cfg.num_attacks, c)
        variant, records = perturb_document(doc, cfg, corpus, rng)
        proba = np.asarray(model.predict_proba(variant))
        candidate = OracleCandidate(variant, records, int(np.argmax(proba)), float(proba[original_label]))
        tried.append(candidate)
        if candidate.label != original_label:
            best = candidate
            break
        if best is None or candidate.confidence < best.confidence:
            best = candidate

    if return_candidates:
        return best.document, best.records, tried
    return best.document, best.records


def kinds_from_names(names: Sequence[str]) -> list[AttackKind]:
    """Parse attack kind names, accepting 'all' for the five kinds."""
    if len(names) == 1 and names[0] == 'all':
        return list(AttackKind)
    return [AttackKind(name) for name in names]
