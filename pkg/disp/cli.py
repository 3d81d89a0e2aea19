#!/usr/bin/env python3
"""
Command-line entry point.

Every subcommand takes the same common flags (--config, --seed, --threads,
--quiet) and writes a manifest next to its outputs. Exit codes: 0 success,
1 usage error, 2 data/attack/model error, 3 numeric failure.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

import torch

from .attacks import AttackConfig, kinds_from_names
from .classifier import train_classifier
from .config import RunConfig, apply_overrides, load_config, write_manifest
from .discriminator import DiscriminatorModel, train_discriminator
from .errors import AttackError, DataError, ModelError, NumericError
from .estimator import EstimatorModel, estimator_rmse, train_estimator
from .evaluation import (
    attack_documents,
    evaluate_task,
    gradient_checks,
    load_task,
    run_sweep,
    run_transfer_eval,
    write_report,
)
from .knn import build_index, load_index, save_index
from .neural import Vocabulary, load_checkpoint, save_checkpoint
from .recovery import defend, write_recovery_reports
from .synthetic import Task, generate_synthetic_task
from .text import AttackKind, Split, load_dataset, load_embedding_corpus, save_dataset, save_embedding_corpus
from .utils import write_json
from .visualize import plot_sweep

logger = logging.getLogger('disp')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def common_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--config', help='JSON run configuration (flags override its values)')
    parent.add_argument('--seed', type=int, help='Run seed')
    parent.add_argument('--threads', type=int, help='Worker threads for document-parallel stages')
    parent.add_argument('--quiet', action='store_true', help='Only print warnings and errors')
    return parent


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='disp', description='Discriminate-and-recover defense for text classifiers')
    sub = parser.add_subparsers(dest='command', metavar='command', parser_class=ArgumentParser)
    common = [common_options()]

    p = sub.add_parser('gen-task', parents=common, help='Generate a synthetic task')
    p.add_argument('--out', required=True, help='Output directory')

    p = sub.add_parser('train-classifier', parents=common, help='Train the protected classifier')
    p.add_argument('--dataset', required=True)
    p.add_argument('--num-classes', type=int, default=2)
    p.add_argument('--corpus', help='Embedding corpus whose tokens join the vocabulary')
    p.add_argument('--epochs', type=int)
    p.add_argument('--out', required=True, help='Checkpoint path')

    p = sub.add_parser('train-discriminator', parents=common, help='Train the perturbation discriminator')
    p.add_argument('--dataset', required=True)
    p.add_argument('--num-classes', type=int, default=2)
    p.add_argument('--corpus', required=True)
    p.add_argument('--epochs', type=int)
    p.add_argument('--out', required=True, help='Checkpoint path')

    p = sub.add_parser('train-estimator', parents=common, help='Train the embedding estimator')
    p.add_argument('--dataset', required=True)
    p.add_argument('--num-classes', type=int, default=2)
    p.add_argument('--corpus', required=True)
    p.add_argument('--w', type=int, help='Context half-width')
    p.add_argument('--epochs', type=int)
    p.add_argument('--out', required=True, help='Checkpoint path')

    p = sub.add_parser('build-index', parents=common, help='Build the HNSW index over a corpus')
    p.add_argument('--corpus', required=True)
    p.add_argument('--M', type=int)
    p.add_argument('--ef-construction', type=int)
    p.add_argument('--out', required=True, help='Index path')

    p = sub.add_parser('attack', parents=common, help='Oracle-attack a dataset')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--classifier', required=True, help='Classifier checkpoint')
    p.add_argument('--corpus', help='Embedding corpus (required for word-level attacks)')
    p.add_argument('--kind', required=True, choices=[k.value for k in AttackKind])
    p.add_argument('--num-attacks', type=int)
    p.add_argument('--candidates', type=int)
    p.add_argument('--out', required=True, help='Perturbed TSV; records go to <out>.records.json')

    p = sub.add_parser('defend', parents=common, help='Recover a perturbed dataset')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--num-classes', type=int, default=2)
    p.add_argument('--disc', required=True, help='Discriminator checkpoint')
    p.add_argument('--est', required=True, help='Estimator checkpoint')
    p.add_argument('--index', required=True)
    p.add_argument('--corpus', required=True)
    p.add_argument('--ef-search', type=int)
    p.add_argument('--out', required=True, help='Recovered TSV')
    p.add_argument('--report', help='Recovery report JSON')

    for name, text in (('eval', 'Train all models and evaluate the defense'),
                       ('sweep', 'Evaluate over 1..max attacks')):
        p = sub.add_parser(name, parents=common, help=text)
        p.add_argument('--task', choices=['synthetic', 'files'])
        p.add_argument('--num-attacks', type=int)
        p.add_argument('--cache', help='Directory caching oracle attacks')
        p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--max-attacks', type=int)
    p.add_argument('--plot', help='Write the sweep plot to this image')

    p = sub.add_parser('transfer', parents=common, help='Train the defense on one task, defend another')
    p.add_argument('--train-seed', type=int, help='Seed of the synthetic task the defense trains on')
    p.add_argument('--train-dataset', help='TSV the defense trains on (files tasks)')
    p.add_argument('--cache', help='Directory caching oracle attacks')
    p.add_argument('--out', required=True, help='Output directory')

    p = sub.add_parser('grad-check', parents=common, help='Finite-difference gradient check')
    p.add_argument('--coords', type=int, default=200)
    p.add_argument('--tolerance', type=float, default=1e-4)
    return parser


def resolve_config(args) -> RunConfig:
    """Config file (or defaults) with the command-line overrides applied."""
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {'seed': args.seed, 'threads': args.threads}
    for flag, key in (('epochs', None), ('w', 'window'), ('M', 'index.M'),
                      ('ef_construction', 'index.ef_construction'), ('ef_search', 'index.ef_search'),
                      ('num_attacks', 'attack.num_attacks'), ('candidates', 'attack.candidates'),
                      ('max_attacks', 'attack.max_attacks'), ('task', 'task.source')):
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == 'epochs':
            section = {'train-classifier': 'classifier', 'train-discriminator': 'discriminator',
                       'train-estimator': 'estimator'}[args.command]
            overrides[f'{section}.training.epochs'] = value
        else:
            overrides[key] = value
    return apply_overrides(config, overrides)


def out_dir_of(path: str) -> str:
    return os.path.dirname(os.path.abspath(path))


def cmd_gen_task(args, config: RunConfig):
    task = load_task(config.task, config.component_seed('task'))
    os.makedirs(args.out, exist_ok=True)
    outputs = [os.path.join(args.out, name) for name in ('train.tsv', 'test.tsv', 'corpus.vec')]
    save_dataset(task.train, outputs[0])
    save_dataset(task.test, outputs[1])
    save_embedding_corpus(task.corpus, outputs[2])
    write_manifest(args.out, 'gen-task', config, outputs=outputs, name='gen-task.manifest.json')


def cmd_train_classifier(args, config: RunConfig):
    train = load_dataset(args.dataset, args.num_classes, Split.TRAIN)
    corpus = load_embedding_corpus(args.corpus) if args.corpus else None
    vocab = Vocabulary.build(train, corpus)
    seed = config.component_seed('classifier')
    training = config.classifier.training
    result = train_classifier(
        train, config.classifier.encoder.encoder_config(len(vocab), seed), vocab, epochs=training.epochs,
        lr=training.lr, batch_size=training.batch_size, seed=seed, clip_norm=training.clip_norm,
        progress=not args.quiet,
    )
    save_checkpoint(result.model, args.out)
    write_json({'epoch_losses': result.epoch_losses}, args.out + '.losses.json')
    write_manifest(out_dir_of(args.out), 'train-classifier', config, [args.dataset, args.corpus],
                   [args.out, args.out + '.losses.json'], name='train-classifier.manifest.json')


def cmd_train_discriminator(args, config: RunConfig):
    train = load_dataset(args.dataset, args.num_classes, Split.TRAIN)
    corpus = load_embedding_corpus(args.corpus)
    vocab = Vocabulary.build(train, corpus)
    seed = config.component_seed('discriminator')
    settings = config.discriminator
    model = DiscriminatorModel(settings.encoder.encoder_config(len(vocab), seed), vocab)
    result = train_discriminator(
        model, train.documents, corpus, epochs=settings.training.epochs, lr=settings.training.lr,
        batch_size=settings.training.batch_size, seed=seed, kinds=kinds_from_names(config.attack.kinds),
        clip_norm=settings.training.clip_norm, progress=not args.quiet,
    )
    save_checkpoint(model, args.out)
    write_json({'epoch_losses': result.epoch_losses}, args.out + '.losses.json')
    write_manifest(out_dir_of(args.out), 'train-discriminator', config, [args.dataset, args.corpus],
                   [args.out, args.out + '.losses.json'], name='train-discriminator.manifest.json')


def cmd_train_estimator(args, config: RunConfig):
    train = load_dataset(args.dataset, args.num_classes, Split.TRAIN)
    corpus = load_embedding_corpus(args.corpus)
    vocab = Vocabulary.build(train, corpus)
    seed = config.component_seed('estimator')
    settings = config.estimator
    model = EstimatorModel(settings.encoder.encoder_config(len(vocab), seed), vocab, corpus.k, config.window)
    result = train_estimator(
        model, train.documents, corpus, epochs=settings.training.epochs, lr=settings.training.lr,
        batch_size=settings.training.batch_size, seed=seed, clip_norm=settings.training.clip_norm,
        progress=not args.quiet,
    )
    rmse = estimator_rmse(model, train.documents, corpus)
    logger.info(f"Final training RMSE: {rmse:.4f}")
    save_checkpoint(model, args.out)
    write_json({'epoch_losses': result.epoch_losses, 'rmse': rmse}, args.out + '.losses.json')
    write_manifest(out_dir_of(args.out), 'train-estimator', config, [args.dataset, args.corpus],
                   [args.out, args.out + '.losses.json'], name='train-estimator.manifest.json')


def cmd_build_index(args, config: RunConfig):
    corpus = load_embedding_corpus(args.corpus)
    index = build_index(corpus, config.index.M, config.index.ef_construction, config.component_seed('index'))
    save_index(index, args.out)
    write_manifest(out_dir_of(args.out), 'build-index', config, [args.corpus], [args.out],
                   name='build-index.manifest.json')


def cmd_attack(args, config: RunConfig):
    classifier = load_checkpoint(args.classifier, expected_kind='classifier')
    dataset = load_dataset(args.input, classifier.num_classes, Split.TEST)
    corpus = load_embedding_corpus(args.corpus) if args.corpus else None
    cfg = AttackConfig(args.kind, config.attack.num_attacks, config.component_seed('attack'),
                       config.attack.embed_top_k)
    attacked = attack_documents(dataset.documents, classifier, cfg, corpus, config.attack.candidates,
                                config.threads, progress=not args.quiet)
    save_dataset([item.attacked for item in attacked], args.out)
    records = [r.to_dict(item.clean.id) for item in attacked for r in item.records]
    write_json({'kind': cfg.kind.value, 'num_attacks': cfg.num_attacks, 'records': records},
               args.out + '.records.json')
    logger.info(f"Added {len(records)} perturbation(s) to {len(attacked)} documents")
    write_manifest(out_dir_of(args.out), 'attack', config, [args.input, args.classifier, args.corpus],
                   [args.out, args.out + '.records.json'], name='attack.manifest.json')


def cmd_defend(args, config: RunConfig):
    discriminator = load_checkpoint(args.disc, expected_kind='discriminator')
    estimator = load_checkpoint(args.est, expected_kind='estimator')
    corpus = load_embedding_corpus(args.corpus)
    index = load_index(args.index, corpus)
    dataset = load_dataset(args.input, args.num_classes, Split.TEST)
    reports = [defend(doc, discriminator, estimator, index, corpus, config.index.ef_search) for doc in dataset]
    save_dataset([r.document for r in reports], args.out)
    outputs = [args.out]
    if args.report:
        write_recovery_reports(reports, args.report)
        outputs.append(args.report)
    changed = sum(len(r.changed_positions) for r in reports)
    logger.info(f"Recovered {changed} token(s) across {len(reports)} documents")
    write_manifest(out_dir_of(args.out), 'defend', config,
                   [args.input, args.disc, args.est, args.index, args.corpus], outputs,
                   name='defend.manifest.json')


def cmd_eval(args, config: RunConfig):
    task = load_task(config.task, config.component_seed('task'))
    report, _ = evaluate_task(task, config, args.cache, progress=not args.quiet)
    outputs = write_report(report, args.out)
    log_summary(report)
    write_manifest(args.out, 'eval', config, task_inputs(config), outputs, name='eval.manifest.json')


def cmd_sweep(args, config: RunConfig):
    task = load_task(config.task, config.component_seed('task'))
    report, models = evaluate_task(task, config, args.cache, progress=not args.quiet)
    sweep = run_sweep(
        task.test, models, kinds_from_names(config.attack.kinds), config.attack.max_attacks,
        config.component_seed('attack'), candidates=config.attack.candidates,
        embed_top_k=config.attack.embed_top_k, threads=config.threads, cache_dir=args.cache,
        progress=not args.quiet,
    )
    report.sweep = sweep.to_dict(orient='records')
    os.makedirs(args.out, exist_ok=True)
    outputs = write_report(report, args.out)
    sweep_csv = os.path.join(args.out, 'sweep.csv')
    sweep.to_csv(sweep_csv, index=False, float_format='%.4f')
    outputs.append(sweep_csv)
    if args.plot:
        plot_sweep(sweep, args.plot)
        outputs.append(args.plot)
    write_manifest(args.out, 'sweep', config, task_inputs(config), outputs, name='sweep.manifest.json')


def cmd_transfer(args, config: RunConfig):
    if config.task.source == 'synthetic':
        corpus_seed = config.component_seed('task')
        defend_task = shared_corpus_task(config, corpus_seed, corpus_seed, 'defend')
        train_seed = args.train_seed if args.train_seed is not None else config.component_seed('transfer')
        train_task = shared_corpus_task(config, train_seed, corpus_seed, 'train')
    else:
        defend_task = load_task(config.task, config.component_seed('task'))
        if not args.train_dataset:
            raise UsageError("transfer with a files task needs --train-dataset")
        train = load_dataset(args.train_dataset, config.task.num_classes, Split.TRAIN,
                             f'{os.path.basename(args.train_dataset)}-train')
        train_task = Task(train, defend_task.test, defend_task.corpus)
    report = run_transfer_eval(train_task, defend_task, config, args.cache, progress=not args.quiet)
    outputs = write_report(report, args.out)
    log_summary(report)
    write_manifest(args.out, 'transfer', config, task_inputs(config) + [args.train_dataset], outputs,
                   name='transfer.manifest.json')


def shared_corpus_task(config: RunConfig, seed: int, corpus_seed: int, role: str) -> Task:
    """Synthetic task whose documents follow `seed` and whose corpus follows `corpus_seed`."""
    spec = config.task.synthetic_spec(seed, corpus_seed=corpus_seed)
    return generate_synthetic_task(replace(spec, name=f'{spec.name}-{role}'))


def cmd_grad_check(args, config: RunConfig) -> int:
    reports = gradient_checks(config.seed, args.coords, args.tolerance)
    for name, report in reports.items():
        status = 'ok' if report.passed else 'FAILED'
        print(f"{name:14s} max relative error {report.max_rel_error:.3e} "
              f"over {report.num_coords} coordinates: {status}")
    return EXIT_OK if all(r.passed for r in reports.values()) else EXIT_NUMERIC


def task_inputs(config: RunConfig) -> list[str]:
    if config.task.source != 'files':
        return []
    return [config.task.train_path, config.task.test_path, config.task.corpus_path]


def log_summary(report):
    for kind, summary in list(report.kinds.items()) + [('overall', report.overall)]:
        logger.info(
            f"  {kind:10s} attack-free {summary.attack_free_accuracy:.3f}  "
            f"attacked {summary.attacked_accuracy:.3f}  defended {summary.defended_accuracy:.3f}  "
            f"F1 {summary.f1:.3f}"
        )


COMMANDS = {
    'gen-task': cmd_gen_task,
    'train-classifier': cmd_train_classifier,
    'train-discriminator': cmd_train_discriminator,
    'train-estimator': cmd_train_estimator,
    'build-index': cmd_build_index,
    'attack': cmd_attack,
    'defend': cmd_defend,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'transfer': cmd_transfer,
    'grad-check': cmd_grad_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format='%(message)s')
    try:
        config = resolve_config(args)
        torch.set_num_threads(max(1, config.threads))
        code = COMMANDS[args.command](args, config)
    except UsageError as e:
        print(f"disp {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"Numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, AttackError, ModelError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == '__main__':
    sys.exit(main())
