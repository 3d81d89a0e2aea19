#!/usr/bin/env python3
"""
Small contextual encoder shared by the discriminator, the embedding
estimator and the downstream classifier.

The encoder is a stack of pre-norm transformer blocks (self-attention and
a GELU feed-forward layer) over learned token and position embeddings. It
produces one d-dimensional vector per input position. EncoderConfig can
describe anything from the desk-scale default (d=64, 2 layers, 4 heads) to
BERT-base scale (d=768, 12 layers, 12 heads).

This module also owns the training plumbing: gradient collection, the
clipped Adam step, a finite-difference gradient checker, and the
DISPCKPT checkpoint format.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .errors import (
    CorruptFileError,
    DataError,
    IdOutOfRange,
    NonFiniteGradient,
    NonFiniteLoss,
    SequenceTooLong,
    VersionMismatchError,
)
from .utils import ensure_parent_dir

logger = logging.getLogger(__name__)

PAD_TOKEN = '[PAD]'
UNK_TOKEN = '[UNK]'
MASK_TOKEN = '[MASK]'

CHECKPOINT_MAGIC = b'DISPCKPT'
CHECKPOINT_VERSION = 1

# Checkpoint kind tag -> model class; filled by register_checkpoint_kind.
CHECKPOINT_KINDS: dict[str, type] = {}


@dataclass(frozen=True)
class SpecialTokens:
    """Reserved vocabulary ids."""

    pad: int = 0
    unk: int = 1
    mask: int = 2

    def __post_init__(self):
        if len({self.pad, self.unk, self.mask}) != 3:
            raise ValueError(f"Special token ids must be distinct, got {self}")


class Vocabulary:
    """
    Token to encoder-id mapping with [PAD], [UNK] and [MASK] at ids 0, 1, 2.

    Out-of-vocabulary surfaces map to [UNK]; the surfaces themselves are
    never altered.
    """

    def __init__(self, tokens: Iterable[str] = ()):
        self.special = SpecialTokens()
        self.tokens = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN]
        self._ids = {token: i for i, token in enumerate(self.tokens)}
        for token in tokens:
            if token not in self._ids:
                self._ids[token] = len(self.tokens)
                self.tokens.append(token)

    @classmethod
    def build(cls, documents: Iterable = (), corpus=None) -> 'Vocabulary':
        """Tokens of `documents` in first-seen order, then the corpus tokens."""
        def surfaces():
            for doc in documents:
                yield from doc.tokens
            if corpus is not None:
                yield from corpus.tokens
        return cls(surfaces())

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self.special.unk)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids.get(token, self.special.unk) for token in tokens]

    def to_list(self) -> list[str]:
        """Non-special tokens in id order."""
        return self.tokens[3:]


@dataclass
class EncoderConfig:
    """
    Shape of an encoder.

    Args:
        vocab_size: Number of token ids, specials included
        d: Model width
        num_heads: Attention heads; must divide d
        num_layers: Transformer blocks
        max_seq_len: Longest accepted input
        ffn_multiplier: Feed-forward hidden width as a multiple of d
        dropout: Dropout probability in training mode
        seed: Seed for parameter initialization
    """

    vocab_size: int
    d: int = 64
    num_heads: int = 4
    num_layers: int = 2
    max_seq_len: int = 64
    ffn_multiplier: int = 4
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError(f"vocab_size must cover the 3 special tokens, got {self.vocab_size}")
        if self.d < 1 or self.num_heads < 1 or self.d % self.num_heads != 0:
            raise ValueError(f"d ({self.d}) must be a positive multiple of num_heads ({self.num_heads})")
        if self.num_layers < 0:
            raise ValueError(f"num_layers must be non-negative, got {self.num_layers}")
        if self.max_seq_len < 1:
            raise ValueError(f"max_seq_len must be positive, got {self.max_seq_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'EncoderConfig':
        return cls(**data)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, num_heads: int, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d // num_heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.output = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        """
        Args:
            x: (B, L, d) inputs
            pad_mask: (B, L) bool, True at padded positions; padded keys get
                no attention weight

        Returns:
            (B, L, d) outputs and the (B, H, L, L) attention weights
        """
        B, L, d = x.shape
        q = self.query(x).view(B, L, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.key(x).view(B, L, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.value(x).view(B, L, self.num_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if pad_mask is not None:
            # finfo.min rather than -inf keeps all-padding rows finite
            scores = scores.masked_fill(pad_mask[:, None, None, :], torch.finfo(scores.dtype).min)
        weights = scores.softmax(dim=-1)
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(B, L, d)
        return self.output(out), weights


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float):
        super().__init__()
        self.linear_1 = nn.Linear(d, hidden)
        self.activation = nn.GELU()
        self.linear_2 = nn.Linear(hidden, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.linear_2(self.dropout(self.activation(self.linear_1(x))))


class EncoderBlock(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.attention_norm = nn.LayerNorm(config.d)
        self.attention = MultiHeadSelfAttention(config.d, config.num_heads, config.dropout)
        self.ffn_norm = nn.LayerNorm(config.d)
        self.ffn = FeedForward(config.d, config.d * config.ffn_multiplier, config.dropout)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, pad_mask=None):
        attended, weights = self.attention(self.attention_norm(x), pad_mask)
        x = x + self.dropout(attended)
        x = x + self.dropout(self.ffn(self.ffn_norm(x)))
        return x, weights


class EncoderModel(nn.Module):
    """
    Contextual token encoder.

    forward(token_ids, pad_mask) maps a (B, L) batch of ids to (B, L, d)
    representations.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d)
        self.position_embedding = nn.Embedding(config.max_seq_len, config.d)
        self.dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.num_layers))
        self.final_norm = nn.LayerNorm(config.d)
        init_parameters(self, config.seed)

    def forward(self, token_ids, pad_mask=None, return_attention=False):
        L = token_ids.shape[1]
        positions = torch.arange(L, device=token_ids.device)
        x = self.dropout(self.token_embedding(token_ids) + self.position_embedding(positions)[None])
        attention = []
        for block in self.blocks:
            x, weights = block(x, pad_mask)
            attention.append(weights)
        x = self.final_norm(x)
        if return_attention:
            return x, attention
        return x


def init_parameters(module: nn.Module, seed: int):
    """normal(0, 0.02) for embeddings and projection weights, zeros for biases,
    ones/zeros for layer norms; drawn from a generator seeded by `seed`."""
    generator = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    with torch.no_grad():
        for name, sub in module.named_modules():
            if isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()
            elif isinstance(sub, (nn.Linear, nn.Embedding)):
                sub.weight.normal_(0.0, 0.02, generator=generator)
                if getattr(sub, 'bias', None) is not None:
                    sub.bias.zero_()


def check_ids(token_ids, config: EncoderConfig):
    """Raise SequenceTooLong / IdOutOfRange for inputs the encoder cannot take."""
    token_ids = torch.as_tensor(token_ids)
    if token_ids.shape[-1] > config.max_seq_len:
        raise SequenceTooLong(f"Sequence of length {token_ids.shape[-1]} exceeds max_seq_len={config.max_seq_len}")
    if token_ids.numel() and (int(token_ids.max()) >= config.vocab_size or int(token_ids.min()) < 0):
        raise IdOutOfRange(f"Token ids must lie in [0, {config.vocab_size})")


def encode(model: EncoderModel, token_ids, pad_mask=None, return_attention: bool = False):
    """
    Contextual representations of one sequence in inference mode.

    Args:
        model: Encoder
        token_ids: Sequence of L ids (L <= max_seq_len)
        pad_mask: Optional sequence of L bools, True at padded positions
        return_attention: Also return the per-layer (H, L, L) attention weights

    Returns:
        (L, d) tensor, plus the attention list when requested

    Raises:
        SequenceTooLong: If L > max_seq_len
        IdOutOfRange: If an id is outside the vocabulary
    """
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    check_ids(ids, model.config)
    mask = None if pad_mask is None else torch.as_tensor(pad_mask, dtype=torch.bool)[None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out, attention = model(ids[None], mask, return_attention=True)
    finally:
        model.train(was_training)
    if return_attention:
        return out[0], [a[0] for a in attention]
    return out[0]


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = 0, length: Optional[int] = None):
    """Right-pad id sequences into a (B, L) LongTensor and a (B, L) pad mask."""
    length = length if length is not None else max((len(s) for s in sequences), default=1)
    ids = torch.full((len(sequences), length), pad_id, dtype=torch.long)
    mask = torch.ones((len(sequences), length), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
        mask[row, :len(seq)] = False
    return ids, mask


def chunk_ranges(length: int, max_len: int) -> list[tuple[int, int]]:
    """Non-overlapping [start, end) windows of at most max_len covering 0..length."""
    return [(start, min(start + max_len, length)) for start in range(0, length, max_len)]


def backward(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of `loss` for every parameter of `model`.

    Returns:
        Parameter name -> gradient, shaped like the parameter (zeros for
        parameters the loss does not reach)

    Raises:
        NonFiniteLoss: If the loss is NaN or infinite
    """
    if not torch.isfinite(loss).all():
        raise NonFiniteLoss(f"Loss is not finite: {float(loss)}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


@dataclass
class OptimizerState:
    """Adam moments (inside the torch optimizer), step count and clipping threshold."""

    optimizer: torch.optim.Adam
    lr: float
    clip_norm: Optional[float] = 1.0
    step_count: int = 0


def make_optimizer(model: nn.Module, lr: float = 1e-3, clip_norm: Optional[float] = 1.0,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    """Adam with bias correction over all parameters of `model`."""
    optimizer = torch.optim.Adam(model.parameters(), lr=lr, betas=betas, eps=eps)
    return OptimizerState(optimizer=optimizer, lr=lr, clip_norm=clip_norm)


def clip_gradients(gradients: dict[str, torch.Tensor], max_norm: Optional[float]):
    """
    Scale gradients so their global L2 norm is at most `max_norm`.

    Returns:
        (clipped gradients, norm before clipping)
    """
    if not gradients:
        return {}, 0.0
    total = torch.linalg.vector_norm(
        torch.stack([torch.linalg.vector_norm(g.detach().double()) for g in gradients.values()])
    )
    total = float(total)
    if max_norm is None or total <= max_norm:
        return dict(gradients), total
    scale = max_norm / (total + 1e-6)
    return {name: g * scale for name, g in gradients.items()}, total


def optimizer_step(model: nn.Module, gradients: dict[str, torch.Tensor], state: OptimizerState):
    """
    Apply one clipped Adam update.

    Raises:
        NonFiniteGradient: If any gradient entry is NaN or infinite
    """
    for name, g in gradients.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"Gradient of {name} is not finite")
    clipped, _ = clip_gradients(gradients, state.clip_norm)
    for name, p in model.named_parameters():
        g = clipped.get(name)
        p.grad = None if g is None else g.to(p.dtype).clone()
    state.optimizer.step()
    state.step_count += 1
    return model, state


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    num_coords: int
    tolerance: float
    worst_parameter: str = ''
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    model_factory: Callable[[], nn.Module],
    loss_fn: Callable[[nn.Module], torch.Tensor],
    tolerance: float = 1e-4,
    num_coords: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """
    Compare autograd gradients with central finite differences in 64-bit.

    A random subsample of parameter coordinates (all of them when there are
    fewer than `num_coords`) is perturbed by +/- h. The relative error of a
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).

    Args:
        model_factory: Builds a fresh model; it is converted to float64 and
            put in eval mode
        loss_fn: Scalar loss of the model
        tolerance: Largest acceptable relative error
    """
    model = model_factory().double()
    model.eval()
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    analytic = backward(model, loss_fn(model))

    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(num_coords, total), replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    errors = []
    worst, worst_name = 0.0, ''
    with torch.no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side='right') - 1)
            name, p = named[which]
            idx = int(flat - offsets[which])
            view = p.view(-1)
            saved = float(view[idx])
            view[idx] = saved + h
            loss_plus = float(loss_fn(model))
            view[idx] = saved - h
            loss_minus = float(loss_fn(model))
            view[idx] = saved
            numeric = (loss_plus - loss_minus) / (2 * h)
            a = float(analytic[name].view(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            errors.append(err)
            if err > worst:
                worst, worst_name = err, name

    report = GradCheckReport(worst, len(picks), tolerance, worst_name, errors)
    status = 'passed' if report.passed else 'FAILED'
    logger.info(f"Gradient check {status}: max relative error {worst:.3e} over {len(picks)} coordinates")
    return report


@dataclass
class TrainingResult:
    """A trained model with its per-epoch mean losses and per-step losses."""

    model: nn.Module
    epoch_losses: list[float]
    step_losses: list[float] = field(default_factory=list)


def fit(
    model: nn.Module,
    make_batches: Callable[[int], Sequence],
    compute_loss: Callable[[nn.Module, object], torch.Tensor],
    epochs: int,
    lr: float = 1e-3,
    clip_norm: Optional[float] = 1.0,
    seed: int = 0,
    desc: str = 'train',
    progress: bool = False,
) -> TrainingResult:
    """
    Generic training loop: backward, then a clipped Adam step per batch.

    Args:
        make_batches: epoch -> list of batches (called once per epoch)
        compute_loss: (model, batch) -> scalar loss
        seed: Seeds torch's dropout stream

    Raises:
        NonFiniteLoss: With the epoch and batch id of the offending batch
    """
    torch.manual_seed(int(seed) % (2 ** 63))
    state = make_optimizer(model, lr=lr, clip_norm=clip_norm)
    epoch_losses, step_losses = [], []
    model.train()
    for epoch in tqdm(range(epochs), desc=desc, disable=not progress):
        batches = make_batches(epoch)
        losses = []
        for batch_id, batch in enumerate(batches):
            loss = compute_loss(model, batch)
            try:
                gradients = backward(model, loss)
            except NonFiniteLoss as e:
                raise NonFiniteLoss(f"{desc}: epoch {epoch} batch {batch_id}: {e}")
            optimizer_step(model, gradients, state)
            losses.append(float(loss))
        step_losses.extend(losses)
        mean = float(np.mean(losses)) if losses else float('nan')
        epoch_losses.append(mean)
        logger.info(f"  {desc} epoch {epoch + 1}/{epochs}: loss {mean:.4f}")
    model.eval()
    return TrainingResult(model, epoch_losses, step_losses)


def register_checkpoint_kind(kind: str):
    """Class decorator registering a model class for `load_checkpoint`."""
    def decorate(cls):
        cls.checkpoint_kind = kind
        CHECKPOINT_KINDS[kind] = cls
        return cls
    return decorate


def save_checkpoint(model: nn.Module, filename: str):
    """
    Write a model to a DISPCKPT file.

    Layout: magic, u32 version, u32 header length, JSON header (kind, model
    header, ordered tensor manifest of names and shapes), then each tensor as
    raw little-endian float32 in manifest order.
    """
    state = model.state_dict()
    header = {
        'kind': model.checkpoint_kind,
        'model': model.checkpoint_header(),
        'tensors': [{'name': name, 'shape': list(t.shape)} for name, t in state.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    ensure_parent_dir(filename)
    with open(filename, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for t in state.values():
            f.write(t.detach().cpu().numpy().astype('<f4').tobytes())
    logger.info(f"Saved {model.checkpoint_kind} checkpoint to {filename}")


def load_checkpoint(filename: str, expected_kind: Optional[str] = None) -> nn.Module:
    """
    Read a DISPCKPT file back into the model class named by its kind tag.

    Raises:
        CorruptFileError: Bad magic, truncation, trailing bytes or a tensor
            manifest that does not match the model
        VersionMismatchError: Unsupported format version
        DataError: When `expected_kind` is given and the file holds another kind
    """
    # Importing the model modules registers their checkpoint kinds.
    from . import classifier, discriminator, estimator  # noqa: F401

    with open(filename, 'rb') as f:
        data = f.read()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptFileError("Not a checkpoint file (bad magic)", offset=0)
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 8:
        raise CorruptFileError("Truncated before the version field", offset=offset)
    version, header_len = struct.unpack('<II', data[offset:offset + 8])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"Checkpoint format version {version}, expected {CHECKPOINT_VERSION}", offset=offset)
    offset += 8
    if len(data) < offset + header_len:
        raise CorruptFileError("Truncated inside the header", offset=offset)
    try:
        header = json.loads(data[offset:offset + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"Unreadable header: {e}", offset=offset)
    offset += header_len

    kind = header.get('kind')
    if kind not in CHECKPOINT_KINDS:
        raise CorruptFileError(f"Unknown checkpoint kind {kind!r}", offset=len(CHECKPOINT_MAGIC) + 8)
    if expected_kind is not None and kind != expected_kind:
        raise DataError(f"{filename} holds a {kind} checkpoint, expected {expected_kind}")
    model = CHECKPOINT_KINDS[kind].from_checkpoint_header(header['model'])

    state = model.state_dict()
    manifest = header['tensors']
    if [entry['name'] for entry in manifest] != list(state):
        raise CorruptFileError("Tensor manifest does not match the model layout", offset=offset)
    loaded = {}
    for entry in manifest:
        shape = tuple(entry['shape'])
        if shape != tuple(state[entry['name']].shape):
            raise CorruptFileError(f"Tensor {entry['name']} has shape {shape}", offset=offset)
        size = 4 * int(np.prod(shape, dtype=np.int64))
        if len(data) < offset + size:
            raise CorruptFileError(f"Truncated inside tensor {entry['name']}", offset=offset)
        array = np.frombuffer(data, dtype='<f4', count=size // 4, offset=offset).reshape(shape)
        loaded[entry['name']] = torch.from_numpy(array.astype(np.float32))
        offset += size
    if offset != len(data):
        raise CorruptFileError(f"{len(data) - offset} unexpected trailing bytes", offset=offset)
    model.load_state_dict(loaded)
    model.eval()
    logger.info(f"Loaded {kind} checkpoint from {filename}")
    return model
