#!/usr/bin/env python3
"""
Desk-scale synthetic classification task with a matching embedding corpus.

Every document carries a run of tokens from its own class and a shorter
run from another class, placed among neutral filler. The label is the
class with the longer run, so a single perturbation inside the label run
is enough to make the document ambiguous. Class tokens sit in tight
Gaussian clusters around per-class centroids, while neutral tokens are
scattered. A nearest-neighbor replacement of a class token therefore
usually stays within its class, and a random replacement usually does not.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .text import Dataset, Document, EmbeddingCorpus, Split
from .utils import make_rng

logger = logging.getLogger(__name__)


class Task(NamedTuple):
    train: Dataset
    test: Dataset
    corpus: EmbeddingCorpus

    @property
    def name(self) -> str:
        return self.train.name.removesuffix('-train')


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """
    Shape of a synthetic task.

    Args:
        vocab_size: Total number of corpus tokens
        num_classes: Number of labels
        class_tokens: Tokens per class-indicative set; the remaining
            vocab_size - num_classes * class_tokens tokens are neutral
        train_docs: Documents in the train split
        test_docs: Documents in the test split
        min_length: Shortest document
        max_length: Longest document
        k: Embedding dimension
        distractor_range: Bounds for the other-class run length m; the label
            run has m + 1 tokens
        cluster_scale: Standard deviation of class tokens around their centroid
        seed: Seed for every random draw
        name: Task name used for dataset names and reports
        corpus_seed: Seed for the embedding corpus alone; tasks sharing it
            share their corpus (defaults to seed)
    """

    vocab_size: int = 2000
    num_classes: int = 2
    class_tokens: int = 100
    train_docs: int = 2000
    test_docs: int = 500
    min_length: int = 8
    max_length: int = 24
    k: int = 50
    distractor_range: tuple[int, int] = (1, 2)
    cluster_scale: float = 0.1
    seed: int = 0
    name: str = 'synthetic'
    corpus_seed: Optional[int] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.class_tokens < 1:
            raise ValueError(f"class_tokens must be positive, got {self.class_tokens}")
        if self.num_neutral < 0:
            raise ValueError(
                f"vocab_size {self.vocab_size} cannot hold {self.num_classes} x {self.class_tokens} class tokens"
            )
        low, high = self.distractor_range
        if low < 0 or high < low:
            raise ValueError(f"Invalid distractor_range {self.distractor_range}")
        if self.min_length < 2 * high + 2 or self.max_length < self.min_length:
            raise ValueError(
                f"Document lengths {self.min_length}..{self.max_length} need room for runs of {2 * high + 1} tokens plus filler"
            )
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")

    @property
    def num_neutral(self) -> int:
        return self.vocab_size - self.num_classes * self.class_tokens

    def class_rows(self, label: int) -> range:
        """Corpus rows of the class-indicative tokens of `label`."""
        return range(label * self.class_tokens, (label + 1) * self.class_tokens)

    def neutral_rows(self) -> range:
        return range(self.num_classes * self.class_tokens, self.vocab_size)


def make_words(count: int, rng: np.random.Generator, min_len: int = 4, max_len: int = 8) -> list[str]:
    """`count` distinct lowercase pseudo-words."""
    letters = np.array(list('abcdefghijklmnopqrstuvwxyz'))
    words, seen = [], set()
    while len(words) < count:
        length = int(rng.integers(min_len, max_len + 1))
        word = ''.join(letters[rng.integers(0, 26, size=length)])
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def make_corpus(spec: SyntheticTaskSpec, rng: np.random.Generator) -> EmbeddingCorpus:
    words = make_words(spec.vocab_size, rng)
    centroids = rng.normal(0.0, 1.0, size=(spec.num_classes, spec.k))
    vectors = np.empty((spec.vocab_size, spec.k))
    for label in range(spec.num_classes):
        rows = spec.class_rows(label)
        vectors[rows.start:rows.stop] = centroids[label] + rng.normal(0.0, spec.cluster_scale, size=(len(rows), spec.k))
    neutral = spec.neutral_rows()
    vectors[neutral.start:neutral.stop] = rng.normal(0.0, 1.0, size=(len(neutral), spec.k))
    return EmbeddingCorpus(words, vectors.astype(np.float32))


def make_document(doc_id: str, spec: SyntheticTaskSpec, words: tuple[str, ...], rng: np.random.Generator) -> Document:
    label = int(rng.integers(spec.num_classes))
    other = int(rng.choice([c for c in range(spec.num_classes) if c != label]))
    length = int(rng.integers(spec.min_length, spec.max_length + 1))
    m = int(rng.integers(spec.distractor_range[0], spec.distractor_range[1] + 1))

    def draw(rows: range, size: int) -> list[str]:
        return [words[rows.start + int(i)] for i in rng.integers(0, len(rows), size=size)]

    label_run = draw(spec.class_rows(label), m + 1)
    other_run = draw(spec.class_rows(other), m)
    filler_rows = spec.neutral_rows() if spec.num_neutral else spec.class_rows(label)
    filler = draw(filler_rows, length - len(label_run) - len(other_run))

    runs = [label_run, other_run] if rng.random() < 0.5 else [other_run, label_run]
    gaps = sorted(int(g) for g in rng.choice(len(filler) + 1, size=2, replace=False))
    tokens = filler[:gaps[0]] + runs[0] + filler[gaps[0]:gaps[1]] + runs[1] + filler[gaps[1]:]
    return Document(doc_id, label, tuple(tokens))


def generate_synthetic_task(spec: SyntheticTaskSpec) -> Task:
    """
    Build train and test splits plus the embedding corpus for `spec`.

    The result depends only on the spec, seed included.
    """
    corpus_seed = spec.seed if spec.corpus_seed is None else spec.corpus_seed
    corpus = make_corpus(spec, make_rng(corpus_seed, 'corpus'))
    splits = []
    for split, count in ((Split.TRAIN, spec.train_docs), (Split.TEST, spec.test_docs)):
        rng = make_rng(spec.seed, 'documents', split.value)
        documents = tuple(make_document(str(i), spec, corpus.tokens, rng) for i in range(count))
        splits.append(Dataset(documents, spec.num_classes, split, f'{spec.name}-{split.value}'))
    logger.info(
        f"Generated task {spec.name!r}: {spec.train_docs} train / {spec.test_docs} test documents, "
        f"{spec.vocab_size} tokens (k={spec.k})"
    )
    return Task(splits[0], splits[1], corpus)
