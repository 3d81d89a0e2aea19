#!/usr/bin/env python3
"""
Run configuration: nested dataclasses loaded from a versioned JSON file,
overridable from the command line, and echoed into a manifest beside every
output.
"""

import dataclasses
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import DataError, VersionMismatchError
from .neural import EncoderConfig
from .synthetic import SyntheticTaskSpec
from .text import AttackKind
from .utils import derive_seed, hash_config, sha256_file, write_json

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
MANIFEST_NAME = 'manifest.json'


@dataclass
class EncoderSettings:
    d: int = 64
    num_heads: int = 4
    num_layers: int = 2
    max_seq_len: int = 64
    ffn_multiplier: int = 4
    dropout: float = 0.1

    def encoder_config(self, vocab_size: int, seed: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size, d=self.d, num_heads=self.num_heads, num_layers=self.num_layers,
            max_seq_len=self.max_seq_len, ffn_multiplier=self.ffn_multiplier, dropout=self.dropout, seed=seed,
        )


@dataclass
class TrainingSettings:
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 32
    clip_norm: Optional[float] = 1.0


@dataclass
class ModelSettings:
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)


@dataclass
class AttackSettings:
    kinds: list[str] = field(default_factory=lambda: [k.value for k in AttackKind])
    num_attacks: int = 1
    max_attacks: int = 3
    candidates: int = 50
    embed_top_k: int = 10


@dataclass
class IndexSettings:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 64


@dataclass
class TaskSettings:
    """Either a synthetic task (source='synthetic') or TSV/vec files (source='files')."""

    source: str = 'synthetic'
    name: str = 'synthetic'
    vocab_size: int = 2000
    class_tokens: int = 100
    num_classes: int = 2
    k: int = 50
    train_docs: int = 2000
    test_docs: int = 500
    min_length: int = 8
    max_length: int = 24
    train_path: str = ''
    test_path: str = ''
    corpus_path: str = ''

    def synthetic_spec(self, seed: int, corpus_seed: Optional[int] = None) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            vocab_size=self.vocab_size, num_classes=self.num_classes, class_tokens=self.class_tokens,
            train_docs=self.train_docs, test_docs=self.test_docs, min_length=self.min_length,
            max_length=self.max_length, k=self.k, seed=seed, name=self.name, corpus_seed=corpus_seed,
        )


@dataclass
class RunConfig:
    """
    Everything a run depends on. Component seeds are derived from `seed`,
    so one explicit integer fixes the whole run.
    """

    version: int = CONFIG_VERSION
    seed: int = 0
    window: int = 2
    threads: int = 1
    output_dir: str = 'out'
    task: TaskSettings = field(default_factory=TaskSettings)
    classifier: ModelSettings = field(default_factory=lambda: ModelSettings(training=TrainingSettings(epochs=5)))
    discriminator: ModelSettings = field(default_factory=ModelSettings)
    estimator: ModelSettings = field(default_factory=lambda: ModelSettings(training=TrainingSettings(batch_size=64)))
    attack: AttackSettings = field(default_factory=AttackSettings)
    index: IndexSettings = field(default_factory=IndexSettings)

    def component_seed(self, component: str) -> int:
        return derive_seed(self.seed, component) % (2 ** 31)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hash_config(self.to_dict())


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise DataError(f"Config section {path or '<root>'} must be an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ''
        raise DataError(f"Unknown config key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        key = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _from_dict(hint, value, key)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    """
    Build a RunConfig, rejecting unknown keys at any level.

    Raises:
        DataError: Unknown key or malformed section
        VersionMismatchError: Missing or unsupported `version`
    """
    if data.get('version') != CONFIG_VERSION:
        raise VersionMismatchError(f"Config version {data.get('version')!r} is not supported (expected {CONFIG_VERSION})")
    return _from_dict(RunConfig, data, '')


def load_config(filename: str) -> RunConfig:
    with open(filename, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"Config file {filename} is not valid JSON: {e.msg}", line=e.lineno)
    config = config_from_dict(data)
    logger.info(f"Loaded config from {filename}")
    return config


def _coerce(current: Any, value: str):
    if isinstance(current, bool):
        return value.lower() in ('1', 'true', 'yes')
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float) or current is None:
        return None if value.lower() == 'none' else float(value)
    if isinstance(current, list):
        return [v for v in value.split(',') if v]
    return value


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """
    Return a copy of `config` with dotted keys replaced.

    String values are converted to the type of the value they replace, so
    `{'attack.num_attacks': '2'}` sets an int.

    Raises:
        DataError: If a dotted key names no config field
    """
    data = config.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = dotted.split('.')
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise DataError(f"Unknown config key: {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise DataError(f"Unknown config key: {dotted}")
        node[parts[-1]] = _coerce(node[parts[-1]], value) if isinstance(value, str) else value
    return config_from_dict(data)


def tool_version() -> str:
    from . import __version__
    return __version__


def write_manifest(out_dir: str, command: str, config: RunConfig,
                   inputs: list[str] = (), outputs: list[str] = (), name: str = MANIFEST_NAME) -> str:
    """
    Write a manifest into `out_dir`: command, merged config and its hash,
    sha256 of every input, the output list and the tool version.
    """
    manifest = {
        'command': command,
        'tool_version': tool_version(),
        'config_hash': config.config_hash(),
        'config': config.to_dict(),
        'inputs': {path: sha256_file(path) for path in inputs if path and os.path.isfile(path)},
        'outputs': sorted(os.path.relpath(path, out_dir) for path in outputs),
    }
    filename = os.path.join(out_dir, name)
    write_json(manifest, filename)
    logger.info(f"Wrote manifest to {filename}")
    return filename
