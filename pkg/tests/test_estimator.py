#!/usr/bin/env python3
"""
Tests for the masked-window embedding estimator.
"""

import sys
import os
import math

import numpy as np
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from disp.errors import NoTrainableWindows
from disp.estimator import (
    ContextWindow,
    EstimatorModel,
    embedding_mse,
    estimate,
    estimate_many,
    estimator_rmse,
    extract_window,
    train_estimator,
    training_windows,
)
from disp.neural import EncoderConfig, Vocabulary
from disp.synthetic import SyntheticTaskSpec, generate_synthetic_task
from disp.text import Document, EmbeddingCorpus

TOKENS = ['t1', 't2', 't3', 't4', 't5']


def make_model(vocab, k=4, w=2, seed=0):
    config = EncoderConfig(vocab_size=len(vocab), d=32, num_heads=4, num_layers=1,
                           max_seq_len=8, dropout=0.0, seed=seed)
    return EstimatorModel(config, vocab, k, w)


def test_window_at_document_start():
    """Test positions before the document are padded and the center is masked."""
    vocab = Vocabulary(TOKENS)
    window = extract_window(TOKENS, 0, 2, vocab)
    special = vocab.special
    assert window.token_ids == (special.pad, special.pad, special.mask, vocab.id('t2'), vocab.id('t3'))
    assert window.pad_mask == (True, True, False, False, False)
    assert window.center == special.mask


def test_window_interior_and_end():
    """Test interior windows see both sides and end windows pad on the right."""
    vocab = Vocabulary(TOKENS)
    special = vocab.special
    interior = extract_window(TOKENS, 2, 2, vocab)
    assert interior.token_ids == (vocab.id('t1'), vocab.id('t2'), special.mask, vocab.id('t4'), vocab.id('t5'))
    assert not any(interior.pad_mask)
    end = extract_window(TOKENS, 4, 1, vocab)
    assert end.token_ids == (vocab.id('t4'), special.mask, special.pad)


def test_window_of_width_zero():
    """Test w=0 gives a lone [MASK]."""
    vocab = Vocabulary(TOKENS)
    assert extract_window(TOKENS, 3, 0, vocab).token_ids == (vocab.special.mask,)


def test_window_rejects_bad_positions():
    """Test positions outside the document and malformed windows."""
    vocab = Vocabulary(TOKENS)
    try:
        extract_window(TOKENS, 5, 2, vocab)
        assert False, 'Expected IndexError'
    except IndexError:
        pass
    try:
        ContextWindow((0, 1), (False, False), 0, 2)
        assert False, 'Expected ValueError'
    except ValueError:
        pass


def test_model_checks_window_fits():
    """Test 2w+1 must fit the encoder's max_seq_len."""
    vocab = Vocabulary(TOKENS)
    try:
        make_model(vocab, w=4)
        assert False, 'Expected ValueError for a 9-token window with max_seq_len 8'
    except ValueError:
        pass


def test_zero_projection_gives_zero_vector():
    """Test a zero W^G yields the zero vector of length k."""
    vocab = Vocabulary(TOKENS)
    model = make_model(vocab, k=6)
    with torch.no_grad():
        model.projection.zero_()
    result = estimate(model, extract_window(TOKENS, 2, 2, vocab))
    assert result.vector.shape == (6,)
    assert not result.vector.any()
    assert result.position == 2


def test_center_surface_is_ignored():
    """Test changing the token at the center leaves the estimate unchanged."""
    vocab = Vocabulary(TOKENS + ['other'])
    model = make_model(vocab)
    clean = estimate(model, extract_window(TOKENS, 2, 2, vocab)).vector
    swapped = TOKENS[:2] + ['other'] + TOKENS[3:]
    assert np.array_equal(estimate(model, extract_window(swapped, 2, 2, vocab)).vector, clean)
    unknown = TOKENS[:2] + ['zzqx'] + TOKENS[3:]
    assert np.array_equal(estimate(model, extract_window(unknown, 2, 2, vocab)).vector, clean)
    # the context does matter
    neighbor = TOKENS[:1] + ['other'] + TOKENS[2:]
    assert not np.array_equal(estimate(model, extract_window(neighbor, 2, 2, vocab)).vector, clean)


def test_estimate_many_matches_single_estimates():
    """Test batched estimation agrees with one window at a time."""
    vocab = Vocabulary(TOKENS)
    model = make_model(vocab)
    windows = [extract_window(TOKENS, i, 2, vocab) for i in range(5)]
    batched = estimate_many(model, windows)
    for window, result in zip(windows, batched):
        assert np.allclose(result.vector, estimate(model, window).vector, atol=1e-6)
    assert estimate_many(model, []) == []


def test_embedding_mse_values():
    """Test a perfect estimate costs 0 and a unit error in one of four dimensions costs 0.25."""
    target = torch.tensor([[0.5, -1.0, 2.0, 0.0]])
    assert float(embedding_mse(target.clone(), target)) == 0.0
    off = target + torch.tensor([[1.0, 0.0, 0.0, 0.0]])
    assert math.isclose(float(embedding_mse(off, target)), 0.25, rel_tol=1e-6)


def test_training_windows_skip_unknown_centers():
    """Test windows are only built around tokens present in the corpus."""
    corpus = EmbeddingCorpus(['t1', 't3'], [[1.0, 0.0], [0.0, 1.0]])
    vocab = Vocabulary(TOKENS)
    windows, targets = training_windows([Document('d', 0, tuple(TOKENS))], corpus, vocab, 1)
    assert [win.position for win in windows] == [0, 2]
    assert targets.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_training_needs_corpus_tokens():
    """Test training fails when no document token has an embedding."""
    corpus = EmbeddingCorpus(['zz', 'yy'], np.eye(2))
    vocab = Vocabulary(TOKENS)
    model = make_model(vocab, k=2)
    try:
        train_estimator(model, [Document('d', 0, tuple(TOKENS))], corpus, epochs=1)
        assert False, 'Expected NoTrainableWindows'
    except NoTrainableWindows:
        pass
    try:
        train_estimator(make_model(vocab, k=3), [Document('d', 0, tuple(TOKENS))], corpus, epochs=1)
        assert False, 'Expected ValueError for mismatched k'
    except ValueError:
        pass


def test_training_beats_zero_predictor():
    """Test a briefly trained estimator beats always predicting the zero vector."""
    spec = SyntheticTaskSpec(vocab_size=200, class_tokens=20, train_docs=200, test_docs=50,
                             min_length=8, max_length=14, k=16, seed=2)
    task = generate_synthetic_task(spec)
    vocab = Vocabulary.build(task.train, task.corpus)
    model = make_model(vocab, k=16)
    result = train_estimator(model, task.train.documents, task.corpus, epochs=5, lr=3e-3, seed=0)
    assert result.epoch_losses[-1] < result.epoch_losses[0], f'Losses: {result.epoch_losses}'

    _, targets = training_windows(task.test.documents, task.corpus, vocab, model.w)
    zero_rmse = math.sqrt(float(np.mean(np.asarray(targets, dtype=np.float64) ** 2)))
    rmse = estimator_rmse(model, task.test.documents, task.corpus)
    assert rmse < zero_rmse, f'RMSE {rmse:.4f} not below the zero predictor {zero_rmse:.4f}'


def run_all_tests():
    """Run all tests."""
    print('Running estimator tests...\n')

    for test in (
        test_window_at_document_start,
        test_window_interior_and_end,
        test_window_of_width_zero,
        test_window_rejects_bad_positions,
        test_model_checks_window_fits,
        test_zero_projection_gives_zero_vector,
        test_center_surface_is_ignored,
        test_estimate_many_matches_single_estimates,
        test_embedding_mse_values,
        test_training_windows_skip_unknown_centers,
        test_training_needs_corpus_tokens,
        test_training_beats_zero_predictor,
    ):
        test()
        print(f'✓ {test.__name__} passed')

    print('\n✅ All estimator tests passed!')


if __name__ == '__main__':
    run_all_tests()
