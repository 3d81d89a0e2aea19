#!/usr/bin/env python3
"""
Tests for the evaluation harness: log aggregation, report consistency,
report files, oracle-attack caching and the end-to-end runs.
"""

import sys
import os
import json
import tempfile

import pandas as pd
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from disp.classifier import ClassifierModel
from disp.config import RunConfig, apply_overrides
from disp.discriminator import DiscriminatorModel
from disp.errors import VocabularyMismatch
from disp.estimator import EstimatorModel
from disp.evaluation import (
    LOG_COLUMNS,
    DefenseModels,
    EvalReport,
    accuracy_table,
    evaluate_task,
    gradient_checks,
    read_prediction_log,
    run_defense_eval,
    run_sweep,
    run_transfer_eval,
    summarize_log,
    verify_report,
    write_report,
)
from disp.knn import build_index
from disp.neural import EncoderConfig, Vocabulary
from disp.synthetic import SyntheticTaskSpec, generate_synthetic_task
from disp.text import AttackKind


def hand_made_log():
    """Helper: four rows over two attack kinds with known aggregates."""
    rows = [
        # doc, kind, n, label, clean, attacked, defended, disp_g, truth, perturbed, flagged, tp, fp, fn
        ('0', 'insertion', 1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 0, 0),
        ('1', 'insertion', 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 1, 1),
        ('0', 'swap', 1, 1, 1, 1, 1, 1, 1, 1, 2, 1, 1, 0),
        ('1', 'swap', 1, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 1),
    ]
    return pd.DataFrame(rows, columns=LOG_COLUMNS)


def hand_made_report():
    log = hand_made_log()
    kinds, overall = summarize_log(log)
    return EvalReport(kinds, overall, {'task': 'hand-made'}, log=log)


def tiny_task(seed=1, corpus_seed=None, name='tiny'):
    spec = SyntheticTaskSpec(vocab_size=120, class_tokens=15, train_docs=60, test_docs=12,
                             min_length=8, max_length=12, k=8, seed=seed, name=name, corpus_seed=corpus_seed)
    return generate_synthetic_task(spec)


def untrained_models(task):
    """Helper: randomly initialized models, enough to exercise the harness."""
    vocab = Vocabulary.build(task.train, task.corpus)

    def config(seed):
        return EncoderConfig(vocab_size=len(vocab), d=16, num_heads=2, num_layers=1,
                             max_seq_len=16, dropout=0.0, seed=seed)

    return DefenseModels(
        classifier=ClassifierModel(config(1), vocab, 2),
        discriminator=DiscriminatorModel(config(2), vocab),
        estimator=EstimatorModel(config(3), vocab, task.corpus.k, w=2),
        index=build_index(task.corpus, M=8, ef_construction=40),
        corpus=task.corpus,
        ef_search=32,
    )


def tiny_config(**overrides):
    """Helper: a run config sized for a test."""
    settings = {
        'task.vocab_size': 120, 'task.class_tokens': 15, 'task.k': 8,
        'task.train_docs': 150, 'task.test_docs': 20, 'task.min_length': 8, 'task.max_length': 12,
        'attack.kinds': ['insertion', 'random'], 'attack.candidates': 5,
        'index.M': 8, 'index.ef_construction': 40, 'index.ef_search': 32,
    }
    for model in ('classifier', 'discriminator', 'estimator'):
        settings.update({f'{model}.encoder.d': 16, f'{model}.encoder.num_heads': 2,
                         f'{model}.encoder.num_layers': 1, f'{model}.encoder.max_seq_len': 16,
                         f'{model}.training.epochs': 2})
    settings.update(overrides)
    return apply_overrides(RunConfig(), settings)


def test_summaries_from_log():
    """Test per-kind and overall accuracies and detection metrics of a known log."""
    kinds, overall = summarize_log(hand_made_log())
    assert list(kinds) == ['insertion', 'swap']
    insertion = kinds['insertion']
    assert (insertion.attack_free_accuracy, insertion.attacked_accuracy, insertion.defended_accuracy) == (1.0, 0.0, 0.5)
    assert (insertion.precision, insertion.recall, insertion.f1) == (0.5, 0.5, 0.5)
    swap = kinds['swap']
    assert (swap.attack_free_accuracy, swap.defended_accuracy, swap.truth_token_accuracy) == (0.5, 1.0, 0.5)
    assert overall.num_docs == 4
    assert overall.attack_free_accuracy == 0.75
    assert overall.attacked_accuracy == 0.25
    assert overall.defended_accuracy == 0.75
    assert overall.disp_g_accuracy == 1.0
    assert overall.truth_token_accuracy == 0.75
    assert (overall.precision, overall.recall) == (0.5, 0.5)


def test_verify_report_detects_tampering():
    """Test a consistent report verifies and an edited aggregate is caught."""
    report = hand_made_report()
    assert verify_report(report) == []
    report.overall.defended_accuracy = 0.9
    problems = verify_report(report)
    assert len(problems) == 1 and 'overall.defended_accuracy' in problems[0], problems


def test_accuracy_table_layout():
    """Test defenses as rows and Attack-free, kinds, Overall as columns."""
    table = accuracy_table(hand_made_report())
    assert list(table.index) == ['No defense', 'DISP', 'DISP_G', 'DISP (ground-truth tokens)']
    assert list(table.columns) == ['Attack-free', 'Insertion', 'Swap', 'Overall']
    assert table.loc['DISP', 'Overall'] == 0.75
    assert table.loc['No defense', 'Insertion'] == 0.0


def test_write_report_files_reverify():
    """Test written reports carry a schema version and their log re-verifies."""
    report = hand_made_report()
    with tempfile.TemporaryDirectory() as tmpdir:
        paths = write_report(report, tmpdir, prefix='eval')
        assert all(os.path.isfile(p) for p in paths)
        with open(paths[0]) as f:
            data = json.load(f)
        log = read_prediction_log(paths[1])
    assert data['schema_version'] == 1
    assert data['metadata'] == {'task': 'hand-made'}
    assert set(data['kinds']) == {'insertion', 'swap'}
    assert list(log['doc_id']) == ['0', '1', '0', '1']
    assert verify_report(report, log) == []


def test_defense_eval_with_untrained_models():
    """Test the harness logs one row per document and kind and verifies cleanly."""
    task = tiny_task()
    models = untrained_models(task)
    kinds = [AttackKind.INSERTION, AttackKind.EMBED]
    report = run_defense_eval(task.test, models, kinds, num_attacks=1, seed=3, candidates=3)
    assert len(report.log) == 2 * len(task.test)
    assert list(report.kinds) == ['insertion', 'embed']
    assert set(report.log['num_perturbed']) == {1}
    assert verify_report(report) == []
    assert report.metadata['kinds'] == ['insertion', 'embed']
    # attack-free accuracy does not depend on the attack kind
    assert report.kinds['insertion'].attack_free_accuracy == report.kinds['embed'].attack_free_accuracy

    again = run_defense_eval(task.test, models, kinds, num_attacks=1, seed=3, candidates=3)
    pd.testing.assert_frame_equal(report.log, again.log)


def test_oracle_cache_round_trip():
    """Test a second run reads the cached attacks and reproduces the log."""
    task = tiny_task()
    models = untrained_models(task)
    with tempfile.TemporaryDirectory() as tmpdir:
        first = run_defense_eval(task.test, models, ['swap'], seed=4, candidates=3, cache_dir=tmpdir)
        cached = [name for name in os.listdir(tmpdir) if name.startswith('oracle-swap-')]
        assert len(cached) == 1
        second = run_defense_eval(task.test, models, ['swap'], seed=4, candidates=3, cache_dir=tmpdir)
        assert os.listdir(tmpdir) == cached
    pd.testing.assert_frame_equal(first.log, second.log)


def test_sweep_rows():
    """Test the sweep has a row per kind and attack count plus overall rows."""
    task = tiny_task()
    models = untrained_models(task)
    sweep = run_sweep(task.test, models, ['deletion'], max_attacks=2, seed=0, candidates=2)
    assert list(sweep['kind']) == ['deletion', 'overall', 'deletion', 'overall']
    assert list(sweep['num_attacks']) == [1, 1, 2, 2]


def test_transfer_needs_shared_corpus():
    """Test defending one task with models of a task over another corpus is refused."""
    config = tiny_config()
    try:
        run_transfer_eval(tiny_task(seed=1), tiny_task(seed=2), config)
        assert False, 'Expected VocabularyMismatch'
    except VocabularyMismatch:
        pass


def test_gradient_checks_pass():
    """Test analytic gradients of all three heads agree with finite differences."""
    reports = gradient_checks(seed=0, num_coords=100)
    assert set(reports) == {'discriminator', 'estimator', 'classifier'}
    for name, report in reports.items():
        assert report.passed, f'{name}: max relative error {report.max_rel_error:.2e} at {report.worst_parameter}'


@pytest.mark.slow
def test_evaluate_task_end_to_end():
    """Test training and evaluating on a small synthetic task gives a consistent report."""
    config = tiny_config()
    task = generate_synthetic_task(config.task.synthetic_spec(config.component_seed('task')))
    report, models = evaluate_task(task, config)
    assert verify_report(report) == []
    assert list(report.kinds) == ['insertion', 'random']
    assert report.overall.num_docs == 2 * config.task.test_docs
    assert report.metadata['config_hash'] == config.config_hash()
    assert report.metadata['estimator_rmse'] > 0
    assert models.index.n == task.corpus.n


@pytest.mark.slow
def test_transfer_end_to_end():
    """Test transfer evaluation across two tasks sharing a corpus."""
    config = tiny_config()
    source = generate_synthetic_task(config.task.synthetic_spec(11, corpus_seed=5))
    target = generate_synthetic_task(config.task.synthetic_spec(12, corpus_seed=5))
    report = run_transfer_eval(source, target, config)
    assert verify_report(report) == []
    assert report.overall.num_docs == 2 * config.task.test_docs


def run_all_tests():
    """Run the fast tests."""
    print('Running evaluation tests...\n')

    for test in (
        test_summaries_from_log,
        test_verify_report_detects_tampering,
        test_accuracy_table_layout,
        test_write_report_files_reverify,
        test_defense_eval_with_untrained_models,
        test_oracle_cache_round_trip,
        test_sweep_rows,
        test_transfer_needs_shared_corpus,
        test_gradient_checks_pass,
    ):
        test()
        print(f'✓ {test.__name__} passed')

    print('\n✅ All evaluation tests passed!')


if __name__ == '__main__':
    run_all_tests()
