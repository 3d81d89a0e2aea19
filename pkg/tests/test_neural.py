#!/usr/bin/env python3
"""
Tests for the encoder, the optimizer plumbing, the gradient checker and the
checkpoint format.
"""

import sys
import os
import math
import struct
import tempfile

import torch
from torch import nn

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from disp.discriminator import DiscriminatorModel, token_cross_entropy
from disp.errors import (
    CorruptFileError,
    DataError,
    IdOutOfRange,
    NonFiniteGradient,
    NonFiniteLoss,
    SequenceTooLong,
    VersionMismatchError,
)
from disp.neural import (
    EncoderConfig,
    EncoderModel,
    Vocabulary,
    backward,
    chunk_ranges,
    clip_gradients,
    encode,
    fit,
    grad_check,
    load_checkpoint,
    make_optimizer,
    optimizer_step,
    pad_batch,
    save_checkpoint,
)
from disp.text import Document


def small_config(vocab_size=10, **kwargs):
    """Helper: a tiny encoder configuration."""
    settings = dict(vocab_size=vocab_size, d=16, num_heads=4, num_layers=2, max_seq_len=8, dropout=0.1, seed=0)
    settings.update(kwargs)
    return EncoderConfig(**settings)


class Scalar(nn.Module):
    """A single trainable number."""

    def __init__(self, value):
        super().__init__()
        self.p = nn.Parameter(torch.tensor([value], dtype=torch.float64))


def test_vocabulary_reserves_special_ids():
    """Test [PAD], [UNK] and [MASK] sit at ids 0-2 and unknown tokens map to [UNK]."""
    docs = [Document('0', 0, ('a', 'b', 'a')), Document('1', 1, ('c',))]
    vocab = Vocabulary.build(docs)
    assert vocab.tokens[:3] == ['[PAD]', '[UNK]', '[MASK]']
    assert vocab.encode(['a', 'b', 'c', 'zzz']) == [3, 4, 5, 1]
    assert vocab.to_list() == ['a', 'b', 'c']
    assert len(Vocabulary(vocab.to_list())) == len(vocab)


def test_encoder_config_validation():
    """Test d must be a multiple of num_heads and dropout must be below 1."""
    for kwargs in ({'d': 10, 'num_heads': 4}, {'dropout': 1.0}, {'max_seq_len': 0}):
        try:
            small_config(**kwargs)
            assert False, f'Expected ValueError for {kwargs}'
        except ValueError:
            pass
    config = small_config()
    assert EncoderConfig.from_dict(config.to_dict()) == config


def test_encode_shape_and_determinism():
    """Test encode gives one d-vector per token and identical seeds give identical outputs."""
    a = EncoderModel(small_config())
    b = EncoderModel(small_config())
    out = encode(a, [3, 4, 5, 6, 7])
    assert out.shape == (5, 16)
    assert torch.equal(out, encode(b, [3, 4, 5, 6, 7]))
    assert torch.equal(out, encode(a, [3, 4, 5, 6, 7])), 'Inference mode must disable dropout'
    other = EncoderModel(small_config(seed=1))
    assert not torch.equal(out, encode(other, [3, 4, 5, 6, 7]))


def test_encode_rejects_bad_inputs():
    """Test over-length sequences and out-of-range ids are rejected."""
    model = EncoderModel(small_config())
    try:
        encode(model, [3] * 9)
        assert False, 'Expected SequenceTooLong'
    except SequenceTooLong:
        pass
    try:
        encode(model, [3, 10])
        assert False, 'Expected IdOutOfRange'
    except IdOutOfRange:
        pass


def test_attention_ignores_padding():
    """Test padded keys get zero weight and do not change unpadded outputs."""
    model = EncoderModel(small_config())
    plain = encode(model, [3, 4, 5, 6, 7])
    padded, attention = encode(model, [3, 4, 5, 6, 7, 0, 0, 0],
                               pad_mask=[False] * 5 + [True] * 3, return_attention=True)
    assert torch.allclose(plain, padded[:5], atol=1e-5)
    assert len(attention) == 2
    for weights in attention:
        assert weights.shape == (4, 8, 8)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(4, 8), atol=1e-6)
        assert torch.all(weights[:, :, 5:] == 0)


def test_cross_entropy_reference_values():
    """Test equal logits cost ln 2 and saturated logits cost about 0."""
    labels = torch.tensor([[0, 1, 1]])
    even = torch.zeros((1, 3, 2))
    assert math.isclose(float(token_cross_entropy(even, labels)), math.log(2), rel_tol=1e-6)

    confident = torch.tensor([[[100.0, -100.0], [-100.0, 100.0], [-100.0, 100.0]]])
    assert float(token_cross_entropy(confident, labels)) < 1e-6

    # padded positions are excluded from the mean
    mask = torch.tensor([[False, False, True]])
    mixed = torch.tensor([[[0.0, 0.0], [0.0, 0.0], [100.0, -100.0]]])
    assert math.isclose(float(token_cross_entropy(mixed, labels, mask)), math.log(2), rel_tol=1e-6)


def test_backward_returns_every_parameter():
    """Test gradients come back for every parameter, zeros when unused."""
    model = nn.ModuleDict({'used': nn.Linear(2, 1), 'unused': nn.Linear(2, 1)})
    loss = model['used'](torch.ones(1, 2)).sum()
    gradients = backward(model, loss)
    assert set(gradients) == {name for name, _ in model.named_parameters()}
    assert torch.equal(gradients['unused.weight'], torch.zeros(1, 2))
    assert torch.equal(gradients['used.weight'], torch.ones(1, 2))


def test_backward_rejects_non_finite_loss():
    """Test a NaN loss raises NonFiniteLoss before any gradient is computed."""
    model = Scalar(1.0)
    try:
        backward(model, model.p.sum() * float('nan'))
        assert False, 'Expected NonFiniteLoss'
    except NonFiniteLoss:
        pass


def test_adam_matches_hand_computation():
    """Test two Adam steps against the bias-corrected update rule."""
    model = Scalar(1.0)
    state = make_optimizer(model, lr=0.1, clip_norm=None)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    p, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -0.25], start=1):
        optimizer_step(model, {'p': torch.tensor([g], dtype=torch.float64)}, state)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= 0.1 * m_hat / (math.sqrt(v_hat) + eps)
        assert math.isclose(float(model.p), p, rel_tol=1e-9), f'step {t}: {float(model.p)} != {p}'
    assert state.step_count == 2


def test_clip_gradients():
    """Test the global norm is scaled to max_norm and small gradients pass through."""
    gradients = {'a': torch.tensor([3.0]), 'b': torch.tensor([4.0])}
    clipped, norm = clip_gradients(gradients, 1.0)
    assert math.isclose(norm, 5.0, rel_tol=1e-9)
    clipped_norm = math.sqrt(float(clipped['a']) ** 2 + float(clipped['b']) ** 2)
    assert clipped_norm <= 1.0 + 1e-6 and math.isclose(clipped_norm, 1.0, rel_tol=1e-5)
    untouched, _ = clip_gradients(gradients, 10.0)
    assert torch.equal(untouched['a'], gradients['a'])
    same, _ = clip_gradients(gradients, None)
    assert torch.equal(same['b'], gradients['b'])


def test_optimizer_step_rejects_non_finite_gradient():
    """Test an infinite gradient raises NonFiniteGradient and leaves the parameter alone."""
    model = Scalar(1.0)
    state = make_optimizer(model)
    try:
        optimizer_step(model, {'p': torch.tensor([float('inf')], dtype=torch.float64)}, state)
        assert False, 'Expected NonFiniteGradient'
    except NonFiniteGradient:
        pass
    assert float(model.p) == 1.0


def test_grad_check_linear_model():
    """Test a linear model with squared loss checks out to near machine precision."""
    x = torch.tensor([[1.0, -2.0, 0.5], [0.3, 0.1, -1.0]], dtype=torch.float64)
    y = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)

    def factory():
        torch.manual_seed(0)
        return nn.Linear(3, 1)

    report = grad_check(factory, lambda m: ((m(x) - y) ** 2).sum(), num_coords=50)
    assert report.passed
    assert report.num_coords == 4
    assert report.max_rel_error < 1e-6


class DoubleGradient(torch.autograd.Function):
    """Identity whose backward pass is wrong by a factor of two."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return 2 * grad


def test_grad_check_detects_wrong_gradient():
    """Test a corrupted backward pass fails the check."""
    x = torch.tensor([[1.0, -2.0, 0.5]], dtype=torch.float64)

    class Broken(nn.Module):
        def __init__(self):
            super().__init__()
            torch.manual_seed(0)
            self.linear = nn.Linear(3, 1)

        def forward(self, inputs):
            return DoubleGradient.apply(self.linear(inputs))

    report = grad_check(Broken, lambda m: (m(x) ** 2).sum())
    assert not report.passed
    assert report.max_rel_error > 0.4


def test_grad_check_encoder():
    """Test the transformer encoder under the token-classification head."""
    vocab = Vocabulary(f'tok{i}' for i in range(7))
    config = EncoderConfig(vocab_size=len(vocab), d=8, num_heads=2, num_layers=1, max_seq_len=6, dropout=0.0)
    ids = torch.tensor([[3, 4, 5, 6, 7, 8], [9, 3, 4, 0, 0, 0]])
    mask = torch.tensor([[False] * 6, [False] * 3 + [True] * 3])
    labels = torch.tensor([[0, 1, 0, 0, 1, 0], [1, 0, 0, 0, 0, 0]])
    report = grad_check(lambda: DiscriminatorModel(config, vocab),
                        lambda m: token_cross_entropy(m(ids, mask), labels, mask), num_coords=100)
    assert report.passed, f'Max relative error {report.max_rel_error} at {report.worst_parameter}'


def test_fit_reduces_loss_and_reports_bad_batches():
    """Test the training loop lowers a simple loss and names the failing batch."""
    model = Scalar(3.0)
    result = fit(model, lambda epoch: [None] * 10, lambda m, batch: (m.p ** 2).sum(), epochs=5, lr=0.1)
    assert len(result.epoch_losses) == 5 and len(result.step_losses) == 50
    assert result.epoch_losses[-1] < result.epoch_losses[0]

    try:
        fit(Scalar(1.0), lambda epoch: [None, None], lambda m, batch: m.p.sum() * float('nan'), epochs=1)
        assert False, 'Expected NonFiniteLoss'
    except NonFiniteLoss as e:
        assert 'epoch 0 batch 0' in str(e), f'Unexpected message: {e}'


def test_pad_batch_and_chunks():
    """Test right padding with a mask and non-overlapping chunking."""
    ids, mask = pad_batch([[5, 6, 7], [8]], pad_id=0)
    assert ids.tolist() == [[5, 6, 7], [8, 0, 0]]
    assert mask.tolist() == [[False, False, False], [False, True, True]]
    assert chunk_ranges(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert chunk_ranges(3, 64) == [(0, 3)]


def make_discriminator():
    vocab = Vocabulary(['at', 'its', 'best'])
    return DiscriminatorModel(small_config(vocab_size=len(vocab), seed=4), vocab)


def test_checkpoint_round_trip():
    """Test a saved model reloads with identical tensors, vocabulary and config."""
    model = make_discriminator()
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'models', 'disc.ckpt')
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, expected_kind='discriminator')
    assert isinstance(loaded, DiscriminatorModel)
    assert loaded.config == model.config
    assert loaded.vocab.tokens == model.vocab.tokens
    for (name, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), f'Tensor {name} changed'


def test_checkpoint_errors():
    """Test bad magic, version bumps, truncation and the wrong kind are rejected."""
    model = make_discriminator()
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'disc.ckpt')
        save_checkpoint(model, path)
        with open(path, 'rb') as f:
            data = f.read()

        def check(contents, error_type):
            bad = os.path.join(tmpdir, 'bad.ckpt')
            with open(bad, 'wb') as f:
                f.write(contents)
            try:
                load_checkpoint(bad)
                assert False, f'Expected {error_type.__name__}'
            except error_type as e:
                assert e.offset is not None

        check(b'XXXXXXXX' + data[8:], CorruptFileError)
        check(data[:8] + struct.pack('<I', 2) + data[12:], VersionMismatchError)
        check(data[:-4], CorruptFileError)
        check(data + b'\x00\x00\x00\x00', CorruptFileError)

        try:
            load_checkpoint(path, expected_kind='classifier')
            assert False, 'Expected DataError'
        except DataError as e:
            assert not isinstance(e, CorruptFileError)


def run_all_tests():
    """Run all tests."""
    print('Running neural tests...\n')

    for name, test in list(globals().items()):
        if name.startswith('test_') and callable(test):
            test()
            print(f'✓ {name} passed')

    print('\n✅ All neural tests passed!')


if __name__ == '__main__':
    run_all_tests()
