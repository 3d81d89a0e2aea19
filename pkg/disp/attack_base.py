#!/usr/bin/env python3
"""
Base class for adversarial attacks.

An attack edits a single token. Character-level attacks change the token's
surface; word-level attacks replace it with another corpus token.
"""

from abc import ABC, abstractmethod
from typing import Optional

import numpy as np

from .text import AttackKind, EmbeddingCorpus
from .utils import is_alphabetic


class AttackBase(ABC):
    """
    Abstract base class for token attacks.

    Each attack has:
    - A name for logging/debugging
    - The AttackKind it produces in PerturbationRecords
    - A minimum token length below which it cannot apply
    - An apply() method that returns the perturbed token
    """

    def __init__(self, name: str, kind: AttackKind, min_length: int = 1):
        """
        Initialize an attack.

        Args:
            name: Human-readable name for this attack
            kind: Perturbation family recorded for every edit
            min_length: Shortest token the attack accepts
        """
        if min_length < 1:
            raise ValueError(f"min_length must be at least 1, got {min_length}")
        self.name = name
        self.kind = AttackKind(kind)
        self.min_length = min_length

    def is_attackable(self, token: str, corpus: Optional[EmbeddingCorpus] = None) -> bool:
        """
        Whether this attack may target `token`.

        Only alphabetic surfaces of at least `min_length` characters qualify;
        subclasses add their own conditions.
        """
        return is_alphabetic(token) and len(token) >= self.min_length

    @abstractmethod
    def apply(self, token: str, rng: np.random.Generator,
              corpus: Optional[EmbeddingCorpus] = None) -> str:
        """
        Perturb one token.

        Args:
            token: Surface to perturb
            rng: Caller-owned random generator; the only source of randomness
            corpus: Embedding corpus, required by word-level attacks

        Returns:
            A token that differs from the input
        """
        pass

    def __repr__(self):
        return f"{self.__class__.__name__}(name='{self.name}', kind='{self.kind.value}')"
