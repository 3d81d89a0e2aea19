#!/usr/bin/env python3
"""
Text data model: tokenization, documents, perturbation records, datasets and
the token embedding corpus, plus their file formats.

Embedding corpus files use the fastText ``.vec`` layout: a header line
``n k`` followed by ``n`` lines of ``token v_1 ... v_k``. Dataset files are
UTF-8 TSV with one ``label<TAB>text`` record per line.
"""

import csv
import logging
import math
import string
import unicodedata
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import DataError
from .utils import ensure_parent_dir, sha256_bytes

logger = logging.getLogger(__name__)


class AttackKind(str, Enum):
    """The five perturbation families: three character-level, two word-level."""

    INSERTION = 'insertion'
    DELETION = 'deletion'
    SWAP = 'swap'
    RANDOM = 'random'
    EMBED = 'embed'

    @property
    def is_char_level(self) -> bool:
        return self in (AttackKind.INSERTION, AttackKind.DELETION, AttackKind.SWAP)

    def __str__(self):
        return self.value


class Split(str, Enum):
    TRAIN = 'train'
    TEST = 'test'


def is_punctuation(ch: str) -> bool:
    """True for ASCII punctuation and any Unicode punctuation category."""
    return ch in string.punctuation or unicodedata.category(ch).startswith('P')


def validate_token(surface: str) -> str:
    """Check the token invariants (non-empty, no whitespace) and return it."""
    if not isinstance(surface, str) or not surface:
        raise DataError(f"Token must be a non-empty string, got {surface!r}")
    if any(ch.isspace() for ch in surface):
        raise DataError(f"Token must not contain whitespace, got {surface!r}")
    return surface


def tokenize(text: str) -> list[str]:
    """
    Split text into lowercase tokens.

    Whitespace separates words; punctuation at either end of a word is
    detached into one token per character. Punctuation inside a word
    ("old-form") stays put.

    Examples:
        tokenize("Old-form moviemaking at its best.")
        # ['old-form', 'moviemaking', 'at', 'its', 'best', '.']
    """
    tokens = []
    for word in text.lower().split():
        start, end = 0, len(word)
        while start < end and is_punctuation(word[start]):
            start += 1
        while end > start and is_punctuation(word[end - 1]):
            end -= 1
        tokens.extend(word[:start])
        if start < end:
            tokens.append(word[start:end])
        tokens.extend(word[end:])
    return tokens


def detokenize(tokens: Iterable[str]) -> str:
    """Join token surfaces with single spaces."""
    return ' '.join(tokens)


@dataclass(frozen=True)
class Document:
    """A labeled token sequence; the unit of attack, defense and classification."""

    id: str
    label: int
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not isinstance(self.tokens, tuple):
            object.__setattr__(self, 'tokens', tuple(self.tokens))
        if len(self.tokens) == 0:
            raise DataError(f"Document {self.id!r} has no tokens")
        for token in self.tokens:
            validate_token(token)
        if self.label < 0:
            raise DataError(f"Document {self.id!r} has negative label {self.label}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return detokenize(self.tokens)

    def replace_tokens(self, replacements: dict[int, str]) -> 'Document':
        """Return a copy with the tokens at the given positions replaced."""
        tokens = list(self.tokens)
        for position, surface in replacements.items():
            tokens[position] = surface
        return Document(self.id, self.label, tuple(tokens))


@dataclass(frozen=True)
class PerturbationRecord:
    """Ground truth for one perturbed position."""

    position: int
    kind: AttackKind
    original: str
    replacement: str

    def __post_init__(self):
        validate_token(self.original)
        validate_token(self.replacement)
        if self.original == self.replacement:
            raise DataError(f"Perturbation at {self.position} leaves {self.original!r} unchanged")
        if self.position < 0:
            raise DataError(f"Perturbation position must be non-negative, got {self.position}")

    def to_dict(self, doc_id: str) -> dict:
        return {
            'doc_id': doc_id,
            'position': self.position,
            'kind': self.kind.value,
            'original': self.original,
            'replacement': self.replacement,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'PerturbationRecord':
        return cls(int(data['position']), AttackKind(data['kind']), data['original'], data['replacement'])


@dataclass(frozen=True)
class Dataset:
    """Documents of one split together with the number of classes."""

    documents: tuple[Document, ...]
    num_classes: int
    split: Split = Split.TRAIN
    name: str = ''

    def __post_init__(self):
        if not isinstance(self.documents, tuple):
            object.__setattr__(self, 'documents', tuple(self.documents))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        for doc in self.documents:
            if doc.label >= self.num_classes:
                raise DataError(
                    f"Document {doc.id!r} has label {doc.label} but the dataset declares "
                    f"{self.num_classes} classes"
                )

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)


class EmbeddingCorpus:
    """
    n distinct tokens with k-dimensional float32 vectors.

    The token to row mapping is a bijection; `lookup` returns None for
    tokens that are not in the corpus.

    Args:
        tokens: Sequence of distinct token surfaces
        vectors: Array of shape (n, k) with finite entries
    """

    def __init__(self, tokens: Sequence[str], vectors):
        vectors = np.array(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise DataError(f"Corpus vectors must be a 2-D matrix, got shape {vectors.shape}")
        if len(tokens) != vectors.shape[0]:
            raise DataError(f"{len(tokens)} tokens but {vectors.shape[0]} vectors")
        if not np.all(np.isfinite(vectors)):
            raise DataError("Corpus vectors contain non-finite values")
        self._row = {}
        for i, token in enumerate(tokens):
            validate_token(token)
            if token in self._row:
                raise DataError(f"Duplicate token {token!r}")
            self._row[token] = i
        self.tokens = tuple(tokens)
        vectors.flags.writeable = False
        self.vectors = vectors
        self._hash = None

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n

    def __contains__(self, token: str) -> bool:
        return token in self._row

    def lookup(self, token: str) -> Optional[int]:
        """Row of `token`, or None when it is not in the corpus."""
        return self._row.get(token)

    def vector(self, token: str) -> np.ndarray:
        """Embedding of `token`; raises KeyError when absent."""
        return self.vectors[self._row[token]]

    def content_hash(self) -> str:
        """sha256 over the tokens and the raw vector bytes."""
        if self._hash is None:
            payload = '\n'.join(self.tokens).encode('utf-8') + b'\x00' + self.vectors.astype('<f4').tobytes()
            self._hash = sha256_bytes(payload)
        return self._hash

    def __repr__(self):
        return f"EmbeddingCorpus(n={self.n}, k={self.k})"


def load_embedding_corpus(filename: str) -> EmbeddingCorpus:
    """
    Load a token embedding corpus in fastText ``.vec`` text format.

    Raises:
        DataError: On a malformed header, a row with the wrong number of values,
            a duplicate token or a non-finite value. The message carries the
            1-based line number.
    """
    with open(filename, 'r', encoding='utf-8', newline='\n') as f:
        header = f.readline().split()
        if len(header) != 2:
            raise DataError(f"Expected header 'n k', got {' '.join(header)!r}", line=1)
        try:
            n, k = int(header[0]), int(header[1])
        except ValueError:
            raise DataError(f"Header values must be integers, got {' '.join(header)!r}", line=1)
        if n < 0 or k < 1:
            raise DataError(f"Header declares n={n}, k={k}", line=1)

        tokens = []
        seen = set()
        vectors = np.empty((n, k), dtype=np.float32)
        line_no = 1
        for line_no, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                raise DataError("Empty row", line=line_no)
            row = line_no - 2
            if row >= n:
                raise DataError(f"More rows than the {n} declared in the header", line=line_no)
            token, values = parts[0], parts[1:]
            if len(values) != k:
                raise DataError(
                    f"Token {token!r} has {len(values)} values but the header declares k={k}",
                    line=line_no
                )
            if token in seen:
                raise DataError(f"Duplicate token {token!r}", line=line_no)
            try:
                parsed = [float(v) for v in values]
            except ValueError as e:
                raise DataError(f"Unparseable value for {token!r}: {e}", line=line_no)
            if not all(math.isfinite(v) for v in parsed):
                raise DataError(f"Non-finite value for {token!r}", line=line_no)
            seen.add(token)
            tokens.append(token)
            vectors[row] = parsed
            if not np.all(np.isfinite(vectors[row])):
                raise DataError(f"Value for {token!r} overflows 32-bit precision", line=line_no)

    if len(tokens) != n:
        raise DataError(f"Header declares {n} rows but the file has {len(tokens)}", line=line_no)

    corpus = EmbeddingCorpus(tokens, vectors)
    logger.info(f"Loaded {corpus.n} embeddings (k={corpus.k}) from {filename}")
    return corpus


def save_embedding_corpus(corpus: EmbeddingCorpus, filename: str):
    """Write a corpus in ``.vec`` format; values are written exactly, so reloading is bit-identical."""
    ensure_parent_dir(filename)
    with open(filename, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"{corpus.n} {corpus.k}\n")
        for token, vec in zip(corpus.tokens, corpus.vectors):
            values = ' '.join(repr(float(v)) for v in vec)
            f.write(f"{token} {values}\n")
    logger.info(f"Saved {corpus.n} embeddings to {filename}")


def load_dataset(
    filename: str,
    num_classes: int,
    split: Split = Split.TRAIN,
    name: str | None = None,
) -> Dataset:
    """
    Load a ``label<TAB>text`` dataset, tokenizing every text.

    Args:
        filename: Path to the TSV file
        num_classes: Number of classes; every label must be below it
        split: Which split the file holds
        name: Dataset name used in reports (defaults to the file name)

    Raises:
        DataError: On a non-integer label, a label >= num_classes or a text that
            tokenizes to nothing. The message carries the 1-based line number.
    """
    try:
        df = pd.read_csv(
            filename, sep='\t', header=None, names=['label', 'text'], dtype=str,
            keep_default_na=False, quoting=csv.QUOTE_NONE, skip_blank_lines=False,
            encoding='utf-8',
        )
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=['label', 'text'])
    except pd.errors.ParserError as e:
        raise DataError(f"Malformed TSV in {filename}: {e}")
    df = df.fillna('')

    documents = []
    for i, (label_str, text) in enumerate(zip(df['label'], df['text'])):
        line_no = i + 1
        try:
            label = int(label_str.strip())
        except ValueError:
            raise DataError(f"Label {label_str!r} is not an integer", line=line_no)
        if label < 0 or label >= num_classes:
            raise DataError(f"Label {label} out of range for {num_classes} classes", line=line_no)
        tokens = tokenize(text)
        if not tokens:
            raise DataError("Text is empty after tokenization", line=line_no)
        documents.append(Document(str(i), label, tuple(tokens)))

    dataset = Dataset(tuple(documents), num_classes, split, name if name is not None else str(filename))
    logger.info(f"Loaded {len(dataset)} documents from {filename}")
    return dataset


def save_dataset(dataset: Dataset | Sequence[Document], filename: str):
    """Write documents as ``label<TAB>text`` lines."""
    documents = dataset.documents if isinstance(dataset, Dataset) else dataset
    ensure_parent_dir(filename)
    # Tokens never contain tabs or newlines, so no quoting is needed.
    with open(filename, 'w', encoding='utf-8', newline='\n') as f:
        for doc in documents:
            f.write(f'{doc.label}\t{doc.text}\n')
    logger.info(f"Saved {len(documents)} documents to {filename}")
