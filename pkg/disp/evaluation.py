#!/usr/bin/env python3
"""
Evaluation harness: train the three models, attack a test split with the
oracle protocol, defend it, and report accuracy and detection metrics per
attack kind.

Every aggregate in an EvalReport is computed from its per-document
prediction log, which can be written next to the report and re-checked with
verify_report.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .attacks import AttackConfig, kinds_from_names, oracle_attack
from .classifier import ClassifierModel, predict, train_classifier
from .config import RunConfig, TaskSettings
from .discriminator import (
    DetectionMetrics,
    DiscriminatorModel,
    PerturbationSet,
    detection_table,
    discriminate,
    token_cross_entropy,
    train_discriminator,
)
from .errors import AttackError, VocabularyMismatch
from .estimator import EstimatorModel, embedding_mse, estimator_rmse, train_estimator
from .knn import HnswIndex, build_index
from .neural import EncoderConfig, GradCheckReport, Vocabulary, grad_check
from .recovery import recover, recover_with_embeddings, recover_with_truth_tokens
from .synthetic import Task, generate_synthetic_task
from .text import (
    AttackKind,
    Dataset,
    Document,
    EmbeddingCorpus,
    PerturbationRecord,
    Split,
    load_dataset,
    load_embedding_corpus,
)
from .utils import canonical_json, make_rng, sha256_bytes, write_json

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
LOG_COLUMNS = [
    'doc_id', 'kind', 'num_attacks', 'label', 'clean_pred', 'attacked_pred', 'defended_pred',
    'disp_g_pred', 'truth_token_pred', 'num_perturbed', 'num_flagged', 'tp', 'fp', 'fn',
]
OVERALL = 'overall'


@dataclass
class DefenseModels:
    """Everything the defense and its evaluation need."""

    classifier: ClassifierModel
    discriminator: DiscriminatorModel
    estimator: EstimatorModel
    index: HnswIndex
    corpus: EmbeddingCorpus
    ef_search: int = 64


@dataclass
class AttackedDocument:
    clean: Document
    attacked: Document
    records: list[PerturbationRecord]


@dataclass
class AccuracySummary:
    num_docs: int
    attack_free_accuracy: float
    attacked_accuracy: float
    defended_accuracy: float
    disp_g_accuracy: float
    truth_token_accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    """
    Accuracy and detection metrics per attack kind plus their micro-average.

    `log` holds one row per (document, kind); every number in `kinds` and
    `overall` is recomputable from it.
    """

    kinds: dict[str, AccuracySummary]
    overall: AccuracySummary
    metadata: dict = field(default_factory=dict)
    sweep: list[dict] = field(default_factory=list)
    log: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=LOG_COLUMNS), repr=False)

    def to_dict(self) -> dict:
        return {
            'schema_version': REPORT_VERSION,
            'kinds': {kind: asdict(summary) for kind, summary in self.kinds.items()},
            'overall': asdict(self.overall),
            'metadata': self.metadata,
            'sweep': self.sweep,
        }


def load_task(settings: TaskSettings, seed: int) -> Task:
    """Generate the synthetic task or load train/test/corpus files."""
    if settings.source == 'synthetic':
        return generate_synthetic_task(settings.synthetic_spec(seed))
    if settings.source != 'files':
        raise ValueError(f"Unknown task source {settings.source!r}; use 'synthetic' or 'files'")
    corpus = load_embedding_corpus(settings.corpus_path)
    train = load_dataset(settings.train_path, settings.num_classes, Split.TRAIN, f'{settings.name}-train')
    test = load_dataset(settings.test_path, settings.num_classes, Split.TEST, f'{settings.name}-test')
    return Task(train, test, corpus)


def train_models(
    train: Dataset,
    corpus: EmbeddingCorpus,
    config: RunConfig,
    defense_train: Optional[Dataset] = None,
    progress: bool = False,
) -> DefenseModels:
    """
    Train the classifier on `train`, the discriminator and estimator on
    `defense_train` (defaults to `train`), and index the corpus.
    """
    defense_docs = (defense_train if defense_train is not None else train).documents

    seed = config.component_seed('classifier')
    vocab = Vocabulary.build(train, corpus)
    training = config.classifier.training
    classifier = train_classifier(
        train, config.classifier.encoder.encoder_config(len(vocab), seed), vocab,
        epochs=training.epochs, lr=training.lr, batch_size=training.batch_size, seed=seed,
        clip_norm=training.clip_norm, progress=progress,
    ).model

    defense_vocab = Vocabulary.build(defense_docs, corpus)
    seed = config.component_seed('discriminator')
    training = config.discriminator.training
    discriminator = DiscriminatorModel(config.discriminator.encoder.encoder_config(len(defense_vocab), seed), defense_vocab)
    train_discriminator(
        discriminator, defense_docs, corpus, epochs=training.epochs, lr=training.lr,
        batch_size=training.batch_size, seed=seed, kinds=kinds_from_names(config.attack.kinds),
        clip_norm=training.clip_norm, progress=progress,
    )

    seed = config.component_seed('estimator')
    training = config.estimator.training
    estimator = EstimatorModel(
        config.estimator.encoder.encoder_config(len(defense_vocab), seed), defense_vocab, corpus.k, config.window,
    )
    train_estimator(
        estimator, defense_docs, corpus, epochs=training.epochs, lr=training.lr,
        batch_size=training.batch_size, seed=seed, clip_norm=training.clip_norm, progress=progress,
    )

    index = build_index(corpus, config.index.M, config.index.ef_construction, config.component_seed('index'))
    return DefenseModels(classifier, discriminator, estimator, index, corpus, config.index.ef_search)


def parallel_map(fn: Callable, items: Sequence, threads: int = 1, desc: str = '', progress: bool = False) -> list:
    """Ordered map over `items` with up to `threads` workers."""
    if threads <= 1:
        return [fn(item) for item in tqdm(items, desc=desc, disable=not progress)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=not progress))


def model_fingerprint(model) -> str:
    """sha256 over a model's parameters in state-dict order."""
    payload = b''.join(t.detach().cpu().numpy().astype('<f4').tobytes() for t in model.state_dict().values())
    return sha256_bytes(payload)


def documents_hash(documents: Iterable[Document]) -> str:
    return sha256_bytes(canonical_json([[d.id, d.label, list(d.tokens)] for d in documents]).encode('utf-8'))


def attack_documents(
    documents: Sequence[Document],
    classifier: ClassifierModel,
    cfg: AttackConfig,
    corpus: Optional[EmbeddingCorpus],
    candidates: int = 50,
    threads: int = 1,
    progress: bool = False,
) -> list[AttackedDocument]:
    """
    Oracle-attack every document. Documents the attack cannot reach keep
    their clean text and get no records.
    """
    def attack_one(doc):
        try:
            attacked, records = oracle_attack(doc, classifier, cfg, corpus, candidates)
        except AttackError:
            return AttackedDocument(doc, doc, [])
        return AttackedDocument(doc, attacked, records)

    attacked = parallel_map(attack_one, documents, threads, desc=f'attack {cfg.kind.value}', progress=progress)
    untouched = sum(1 for item in attacked if not item.records and cfg.num_attacks > 0)
    if untouched:
        logger.warning(f"Warning: {untouched} document(s) had too few tokens for {cfg.num_attacks} {cfg.kind.value} attack(s)")
    return attacked


def cached_attack_documents(
    documents: Sequence[Document],
    classifier: ClassifierModel,
    cfg: AttackConfig,
    corpus: Optional[EmbeddingCorpus],
    cache_dir: Optional[str],
    candidates: int = 50,
    threads: int = 1,
    progress: bool = False,
) -> list[AttackedDocument]:
    """
    attack_documents backed by a JSON cache keyed by attack settings, the
    documents, the classifier parameters and the corpus.
    """
    if cache_dir is None:
        return attack_documents(documents, classifier, cfg, corpus, candidates, threads, progress)
    key = sha256_bytes(canonical_json({
        'documents': documents_hash(documents),
        'classifier': model_fingerprint(classifier),
        'corpus': corpus.content_hash() if corpus is not None else None,
        'candidates': candidates,
        'embed_top_k': cfg.embed_top_k,
    }).encode('utf-8'))
    filename = os.path.join(cache_dir, f'oracle-{cfg.kind.value}-n{cfg.num_attacks}-s{cfg.rng_seed}-{key[:16]}.json')
    if os.path.exists(filename):
        with open(filename, 'r', encoding='utf-8') as f:
            cached = json.load(f)
        attacked = [
            AttackedDocument(doc, Document(doc.id, doc.label, tuple(entry['tokens'])),
                             [PerturbationRecord.from_dict(r) for r in entry['records']])
            for doc, entry in zip(documents, cached['documents'])
        ]
        logger.info(f"Loaded {len(attacked)} cached {cfg.kind.value} attacks from {filename}")
        return attacked
    attacked = attack_documents(documents, classifier, cfg, corpus, candidates, threads, progress)
    write_json({
        'kind': cfg.kind.value,
        'num_attacks': cfg.num_attacks,
        'seed': cfg.rng_seed,
        'key': key,
        'documents': [
            {'doc_id': item.clean.id, 'tokens': list(item.attacked.tokens),
             'records': [r.to_dict(item.clean.id) for r in item.records]}
            for item in attacked
        ],
    }, filename)
    return attacked


def evaluate_document(item: AttackedDocument, models: DefenseModels) -> dict:
    """Predictions of every defense variant for one attacked document."""
    clean, attacked, records = item.clean, item.attacked, item.records
    corpus = models.corpus
    truth = PerturbationSet.from_records(records, len(attacked))

    flagged, _ = discriminate(models.discriminator, attacked)
    defended = recover(attacked, flagged, models.estimator, models.index, corpus, models.ef_search).document
    if all(r.original in corpus for r in records):
        embeddings = {r.position: corpus.vector(r.original) for r in records}
        disp_g = recover_with_embeddings(attacked, truth, embeddings, models.index, corpus, models.ef_search).document
    else:
        disp_g = recover_with_truth_tokens(attacked, truth, clean).document
    truth_tokens = recover_with_truth_tokens(attacked, flagged, clean).document

    detection = DetectionMetrics()
    detection.add(flagged, records)
    return {
        'doc_id': clean.id,
        'label': clean.label,
        'clean_pred': predict(models.classifier, clean)[0],
        'attacked_pred': predict(models.classifier, attacked)[0],
        'defended_pred': predict(models.classifier, defended)[0],
        'disp_g_pred': predict(models.classifier, disp_g)[0],
        'truth_token_pred': predict(models.classifier, truth_tokens)[0],
        'num_perturbed': len(records),
        'num_flagged': len(flagged),
        'tp': detection.tp,
        'fp': detection.fp,
        'fn': detection.fn,
    }


def summarize(frame: pd.DataFrame) -> AccuracySummary:
    """Aggregate a slice of the prediction log."""
    def accuracy(column):
        return float((frame[column] == frame['label']).mean()) if len(frame) else 0.0

    detection = DetectionMetrics(int(frame['tp'].sum()), int(frame['fp'].sum()), int(frame['fn'].sum()))
    return AccuracySummary(
        num_docs=len(frame),
        attack_free_accuracy=accuracy('clean_pred'),
        attacked_accuracy=accuracy('attacked_pred'),
        defended_accuracy=accuracy('defended_pred'),
        disp_g_accuracy=accuracy('disp_g_pred'),
        truth_token_accuracy=accuracy('truth_token_pred'),
        precision=detection.precision,
        recall=detection.recall,
        f1=detection.f1,
    )


def summarize_log(log: pd.DataFrame) -> tuple[dict[str, AccuracySummary], AccuracySummary]:
    """Per-kind summaries in attack-kind order, plus the overall micro-average."""
    present = set(log['kind'])
    kinds = {kind.value: summarize(log[log['kind'] == kind.value]) for kind in AttackKind if kind.value in present}
    return kinds, summarize(log)


def run_defense_eval(
    documents: Sequence[Document] | Dataset,
    models: DefenseModels,
    kinds: Sequence[AttackKind | str] = tuple(AttackKind),
    num_attacks: int = 1,
    seed: int = 0,
    candidates: int = 50,
    embed_top_k: int = 10,
    threads: int = 1,
    cache_dir: Optional[str] = None,
    progress: bool = False,
    metadata: Optional[dict] = None,
) -> EvalReport:
    """
    Attack, defend and score `documents` for every attack kind.

    For each document and kind the oracle attack produces X_a; the log
    records the classifier's prediction on the clean text, on X_a, on the
    DISP recovery, on the ground-truth ceiling (true positions and true
    embeddings) and on the learned positions filled with the true tokens.
    """
    documents = list(documents)
    rows = []
    for kind in kinds:
        cfg = AttackConfig(AttackKind(kind), num_attacks, seed, embed_top_k)
        attacked = cached_attack_documents(
            documents, models.classifier, cfg, models.corpus, cache_dir, candidates, threads, progress,
        )
        results = parallel_map(lambda item: evaluate_document(item, models), attacked, threads,
                               desc=f'defend {cfg.kind.value}', progress=progress)
        for row in results:
            row.update(kind=cfg.kind.value, num_attacks=num_attacks)
        rows.extend(results)
        logger.info(f"  Evaluated {len(results)} documents under {cfg.kind.value} x{num_attacks}")

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    per_kind, overall = summarize_log(log)
    info = {
        'seed': seed,
        'num_attacks': num_attacks,
        'candidates': candidates,
        'kinds': [AttackKind(k).value for k in kinds],
        'num_documents': len(documents),
    }
    info.update(metadata or {})
    return EvalReport(per_kind, overall, info, log=log)


def verify_report(report: EvalReport, log: Optional[pd.DataFrame] = None, tolerance: float = 1e-12) -> list[str]:
    """
    Recompute every aggregate from the prediction log.

    Returns:
        Descriptions of mismatches; empty when the report is consistent
    """
    log = report.log if log is None else log
    kinds, overall = summarize_log(log)
    problems = []
    if set(kinds) != set(report.kinds):
        problems.append(f"Log covers kinds {sorted(kinds)}, report covers {sorted(report.kinds)}")
    for name, expected in [(OVERALL, overall)] + list(kinds.items()):
        reported = report.overall if name == OVERALL else report.kinds.get(name)
        if reported is None:
            continue
        for key, value in asdict(expected).items():
            if abs(getattr(reported, key) - value) > tolerance:
                problems.append(f"{name}.{key}: report {getattr(reported, key)} != log {value}")
    return problems


def read_prediction_log(filename: str) -> pd.DataFrame:
    return pd.read_csv(filename, sep='\t', dtype={'doc_id': str, 'kind': str})


def accuracy_table(report: EvalReport) -> pd.DataFrame:
    """Accuracy per defense (rows) by attack-free / attack kind / Overall (columns)."""
    rows = {
        'No defense': 'attacked_accuracy',
        'DISP': 'defended_accuracy',
        'DISP_G': 'disp_g_accuracy',
        'DISP (ground-truth tokens)': 'truth_token_accuracy',
    }
    table = {}
    for label, attr in rows.items():
        values = {'Attack-free': report.overall.attack_free_accuracy}
        for kind, summary in report.kinds.items():
            values[kind.capitalize()] = getattr(summary, attr)
        values['Overall'] = getattr(report.overall, attr)
        table[label] = values
    return pd.DataFrame.from_dict(table, orient='index')


def write_report(report: EvalReport, out_dir: str, prefix: str = 'report') -> list[str]:
    """
    Write the report JSON, the prediction log TSV and the accuracy and
    detection CSV tables.

    Returns:
        Paths written
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'json': os.path.join(out_dir, f'{prefix}.json'),
        'log': os.path.join(out_dir, f'{prefix}-predictions.tsv'),
        'accuracy': os.path.join(out_dir, f'{prefix}-accuracy.csv'),
        'detection': os.path.join(out_dir, f'{prefix}-detection.csv'),
    }
    write_json(report.to_dict(), paths['json'])
    report.log.to_csv(paths['log'], sep='\t', index=False)
    accuracy_table(report).to_csv(paths['accuracy'], float_format='%.4f')
    detection = {
        name: DetectionMetrics(
            int(report.log.loc[report.log['kind'] == name, 'tp'].sum()),
            int(report.log.loc[report.log['kind'] == name, 'fp'].sum()),
            int(report.log.loc[report.log['kind'] == name, 'fn'].sum()),
        )
        for name in report.kinds
    }
    detection[OVERALL] = DetectionMetrics(int(report.log['tp'].sum()), int(report.log['fp'].sum()),
                                          int(report.log['fn'].sum()))
    detection_table(detection).to_csv(paths['detection'], float_format='%.4f')
    logger.info(f"Wrote report to {paths['json']}")
    return list(paths.values())


def run_sweep(
    documents: Sequence[Document] | Dataset,
    models: DefenseModels,
    kinds: Sequence[AttackKind | str] = tuple(AttackKind),
    max_attacks: int = 3,
    seed: int = 0,
    **eval_kwargs,
) -> pd.DataFrame:
    """
    Accuracy per (kind, num_attacks) for num_attacks in 1..max_attacks, plus
    an 'overall' row per attack count.
    """
    rows = []
    for n in range(1, max_attacks + 1):
        report = run_defense_eval(documents, models, kinds, n, seed, **eval_kwargs)
        for name, summary in list(report.kinds.items()) + [(OVERALL, report.overall)]:
            rows.append({
                'kind': name,
                'num_attacks': n,
                'attack_free_accuracy': summary.attack_free_accuracy,
                'attacked_accuracy': summary.attacked_accuracy,
                'defended_accuracy': summary.defended_accuracy,
                'disp_g_accuracy': summary.disp_g_accuracy,
            })
    return pd.DataFrame(rows)


def evaluate_task(task: Task, config: RunConfig, cache_dir: Optional[str] = None,
                  progress: bool = False, defense_task: Optional[Task] = None) -> tuple[EvalReport, DefenseModels]:
    """Train every model for `task` and run the defense evaluation on its test split."""
    models = train_models(task.train, task.corpus, config,
                          defense_train=defense_task.train if defense_task is not None else None,
                          progress=progress)
    rmse = estimator_rmse(models.estimator, task.test.documents, task.corpus)
    logger.info(f"Estimator RMSE on {task.name} test windows: {rmse:.4f}")
    report = run_defense_eval(
        task.test, models, kinds_from_names(config.attack.kinds), config.attack.num_attacks,
        config.component_seed('attack'), config.attack.candidates, config.attack.embed_top_k,
        config.threads, cache_dir, progress,
        metadata={'task': task.name, 'config_hash': config.config_hash(), 'run_seed': config.seed,
                  'estimator_rmse': rmse},
    )
    return report, models


def run_transfer_eval(train_task: Task, defend_task: Task, config: RunConfig,
                      cache_dir: Optional[str] = None, progress: bool = False) -> EvalReport:
    """
    Train the discriminator and estimator on `train_task`, the classifier on
    `defend_task`, and evaluate the defense on `defend_task`'s test split.

    Raises:
        VocabularyMismatch: If the two tasks use different embedding corpora
    """
    if train_task.corpus.content_hash() != defend_task.corpus.content_hash():
        raise VocabularyMismatch(
            f"Tasks {train_task.name!r} and {defend_task.name!r} use different embedding corpora"
        )
    report, _ = evaluate_task(defend_task, config, cache_dir, progress, defense_task=train_task)
    report.metadata.update(train_task=train_task.name, defend_task=defend_task.name)
    return report


def gradient_checks(seed: int = 0, num_coords: int = 200, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    """
    Finite-difference checks of a 1-layer d=16 encoder under each of the
    three heads (token cross-entropy, window MSE, document cross-entropy).
    """
    vocab = Vocabulary(f'tok{i}' for i in range(17))
    config = EncoderConfig(vocab_size=len(vocab), d=16, num_heads=2, num_layers=1, max_seq_len=8,
                           dropout=0.0, seed=seed)
    rng = make_rng(seed, 'grad-check')
    ids = torch.as_tensor(rng.integers(3, len(vocab), size=(3, 8)), dtype=torch.long)
    mask = torch.zeros((3, 8), dtype=torch.bool)
    mask[1, 6:] = True
    mask[2, 4:] = True
    token_labels = torch.as_tensor(rng.integers(0, 2, size=(3, 8)), dtype=torch.long)
    windows = ids[:, :5].clone()
    windows[:, 2] = vocab.special.mask
    window_mask = torch.zeros((3, 5), dtype=torch.bool)
    window_mask[2, 3:] = True
    targets = torch.as_tensor(rng.normal(size=(3, 6)), dtype=torch.float64)
    doc_labels = torch.as_tensor([0, 1, 1], dtype=torch.long)

    checks = {
        'discriminator': (
            lambda: DiscriminatorModel(config, vocab),
            lambda m: token_cross_entropy(m(ids, mask), token_labels, mask),
        ),
        'estimator': (
            lambda: EstimatorModel(config, vocab, k=6, w=2),
            lambda m: embedding_mse(m(windows, window_mask), targets),
        ),
        'classifier': (
            lambda: ClassifierModel(config, vocab, num_classes=2),
            lambda m: F.cross_entropy(m(ids, mask), doc_labels),
        ),
    }
    return {
        name: grad_check(factory, loss_fn, tolerance=tolerance, num_coords=num_coords, seed=seed)
        for name, (factory, loss_fn) in checks.items()
    }
