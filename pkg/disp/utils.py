#!/usr/bin/env python3
"""
Utility functions shared across the pipeline: seeding, hashing and file
helpers.
"""

import hashlib
import json
import os

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """Derive a 64-bit seed from a base seed and any number of keys.

    The same (seed, keys) always yields the same value, so per-document
    streams can be drawn in any order or in parallel.
    """
    h = hashlib.sha256(str(int(seed)).encode('utf-8'))
    for key in keys:
        h.update(b'\x1f')
        h.update(str(key).encode('utf-8'))
    return int.from_bytes(h.digest()[:8], 'little')


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Create a numpy Generator seeded from (seed, *keys)."""
    return np.random.default_rng(derive_seed(seed, *keys))


def sha256_bytes(data: bytes) -> str:
    """Hex sha256 of a byte string."""
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    """Hex sha256 of a file's contents, read in 1 MiB blocks."""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            h.update(block)
    return h.hexdigest()


def canonical_json(obj) -> str:
    """JSON with sorted keys and no whitespace, stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), ensure_ascii=False)


def hash_config(obj) -> str:
    """Hash of the canonical JSON form of a config dictionary."""
    return sha256_bytes(canonical_json(obj).encode('utf-8'))


def ensure_parent_dir(filename: str):
    """Create the directory holding `filename` if it does not exist."""
    dirname = os.path.dirname(filename)
    if dirname:
        os.makedirs(dirname, exist_ok=True)


def write_json(obj, filename: str):
    """Write `obj` as indented, key-sorted JSON."""
    ensure_parent_dir(filename)
    with open(filename, 'w', encoding='utf-8') as f:
        json.dump(obj, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')


def is_alphabetic(surface: str) -> bool:
    """True when every character of the surface is a letter."""
    return len(surface) > 0 and surface.isalpha()
