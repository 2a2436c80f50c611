from argparse import ArgumentParser, Namespace
from trustprobe import constants
from trustprobe.base import ConfigError, TrustProbeError, derive_seed
from trustprobe.benchmark import inject, load_source, make_detector, prepare_experiment, report_experiment, run_benchmark
from trustprobe.config import ExperimentConfig, config_hash, init_config, load_config
from trustprobe.features import apply_feature_map, fit_feature_map
from trustprobe.pipeline import TrialLog
from typing import Any, Dict, List, Optional

import json
import logging
import numpy as np
import os
import pandas as pd
import sys


def provenance(cfg: ExperimentConfig) -> Dict[str, Any]:
    return {'config_hash': config_hash(cfg), 'seed': cfg.seed, 'version': constants.ARTIFACT_VERSION}


def write_json(doc: Dict[str, Any], path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write('\n')


def cmd_inject_noise(cfg: ExperimentConfig) -> int:
    if cfg.noise is None:
        raise ConfigError('inject-noise needs a [noise] section')
    raw = load_source(cfg.dataset, cfg.seed)
    noisy, artifacts = inject(raw, cfg.noise, cfg.seed)
    assert artifacts is not None
    n = raw.n_examples
    kept = np.arange(n) if artifacts.kept is None else artifacts.kept
    covered = np.zeros(n, dtype=bool)
    covered[kept] = True
    labels = np.full(n, constants.UNLABELED, dtype=np.int64)
    labels[kept] = noisy.noisy_labels
    clean = noisy.require_clean_labels()
    clean_all = np.array(raw.clean_labels if raw.clean_labels is not None else raw.noisy_labels, copy=True)
    clean_all[kept] = clean
    frame = pd.DataFrame({'id': raw.example_ids})
    for j in range(raw.n_features):
        frame[f'x{j}'] = raw.features[:, j]
    frame['clean_label'] = clean_all
    frame['noisy_label'] = labels
    frame['covered'] = covered
    if raw.rules is not None:
        for r in range(raw.rules.shape[1]):
            frame[f'rule_{r}'] = raw.rules[:, r]
    for key, value in provenance(cfg).items():
        frame[key] = value
    frame.to_csv(os.path.join(cfg.out, 'noisy.csv'), index=False, float_format='%.10g')
    write_json({**artifacts.transition.to_json(), 'noise': artifacts.spec.kind.value, **provenance(cfg)}, os.path.join(cfg.out, 'transition.json'))
    logging.info('%d of %d labels differ from ground truth', int((labels != clean_all).sum()), n)
    return 0


def rank_least_trusted(scores: np.ndarray) -> np.ndarray:
    """ Rank 1 is the least trusted row; ties go to the lower index. """
    order = np.lexsort((np.arange(len(scores)), scores))
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def cmd_detect(cfg: ExperimentConfig) -> int:
    raw = load_source(cfg.dataset, cfg.seed)
    noisy, _ = inject(raw, cfg.noise, cfg.seed)
    fmap = fit_feature_map(noisy, cfg.dataset.feature_map, derive_seed(cfg.seed, 'feature-map'))
    ds = apply_feature_map(fmap, noisy)
    detector = make_detector(cfg, dict(cfg.detector), workers=cfg.workers)
    scores = detector.score(ds)
    frame = pd.DataFrame({
        'id': ds.example_ids,
        'score': scores.scores,
        'rank': rank_least_trusted(scores.scores)
    })
    frame['detector_fingerprint'] = scores.fingerprint
    for key, value in provenance(cfg).items():
        frame[key] = value
    frame.to_csv(os.path.join(cfg.out, 'scores.csv'), index=False, float_format='%.17g')
    logging.info('wrote %d trust scores from detector %s', len(scores), scores.fingerprint)
    return 0


def cmd_pipeline(cfg: ExperimentConfig) -> int:
    validation_kind = cfg.pipeline.validation
    ds, tags = prepare_experiment(cfg, cfg.noise, validation_kind)
    detector = make_detector(cfg, dict(cfg.detector), workers=cfg.workers)
    trial_log = TrialLog(os.path.join(cfg.out, 'trials.jsonl'))
    report = report_experiment(cfg, ds, tags, detector, cfg.pipeline.handler, validation_kind, trial_log)
    doc = report.to_json()
    doc['noise'] = None if cfg.noise is None else cfg.noise.kind.value
    write_json(doc, os.path.join(cfg.out, 'report.json'))
    logging.info('test loss %.6f, normalized %s', report.test_loss, report.normalized.value)
    return 0


def cmd_benchmark(cfg: ExperimentConfig) -> int:
    outcome = run_benchmark(cfg)
    if not outcome.ok:
        print(f'{len(outcome.failures)} benchmark cells failed:', file=sys.stderr)
        for cell, error in outcome.failures:
            print(f'  {cell.label()}: {error}', file=sys.stderr)
        return 1
    return 0


def flatten_logs(root: str) -> pd.DataFrame:
    """ Every record of every `*.jsonl` file under `root`, one row each, in path order. """
    frames: List[pd.DataFrame] = []
    for directory, subdirs, files in os.walk(root):
        subdirs.sort()
        for name in sorted(files):
            if not name.endswith('.jsonl'):
                continue
            path = os.path.join(directory, name)
            records = []
            with open(path, 'r', encoding='utf-8') as f:
                for line in f:
                    line = line.strip()
                    if line == '':
                        continue
                    try:
                        records.append(json.loads(line))
                    except ValueError:
                        logging.warning('skipping unreadable line in %s', path)
            if len(records) > 0:
                frame = pd.json_normalize(records)
                frame.insert(0, 'source', os.path.relpath(path, root))
                frames.append(frame)
    if len(frames) == 0:
        return pd.DataFrame(columns=['source'])
    return pd.concat(frames, ignore_index=True, sort=False)


def cmd_report(cfg: ExperimentConfig) -> int:
    frame = flatten_logs(cfg.out)
    for column in frame.columns:
        # Lists (trusted_per_class) flatten to space-separated cells
        if frame[column].map(lambda v: isinstance(v, list)).any():
            frame[column] = frame[column].map(lambda v: ' '.join(str(x) for x in v) if isinstance(v, list) else v)
    path = os.path.join(cfg.out, 'report.csv')
    frame.to_csv(path, index=False, float_format='%.10g')
    logging.info('flattened %d trial records into %s', len(frame), path)
    return 0


COMMANDS = {
    'inject-noise': cmd_inject_noise,
    'detect': cmd_detect,
    'pipeline': cmd_pipeline,
    'benchmark': cmd_benchmark,
    'report': cmd_report
}


def make_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='trustprobe')
    parser.add_argument('command', choices=sorted(COMMANDS))
    parser.add_argument('--log-level', default='INFO')
    parser.add_argument('--config', help='TOML experiment file')
    parser.add_argument('--seed', type=int, help='master seed; overrides the config file')
    parser.add_argument('--workers', type=int, help=f'worker count; defaults to ${constants.WORKERS_ENV_VAR} or 1')
    parser.add_argument('--out', help='output directory; overrides the config file')
    return parser


def configure_logging(log_level: str) -> None:
    logging.basicConfig(
        format='%(asctime)s %(levelname)s %(filename)s:%(lineno)d -- %(message)s',
        level=log_level
    )


def resolve_config(args: Namespace) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.seed is not None:
        cfg = init_config(args.seed)
    elif args.command == 'report':
        # Flattening logs does not depend on the seed
        cfg = init_config(0)
    else:
        raise ConfigError('the master seed is mandatory: pass --seed or a --config file with `seed`')
    if args.workers is not None and args.workers < 1:
        raise ConfigError(f'--workers must be positive, got {args.workers}')
    return cfg.with_overrides(seed=args.seed, out=args.out, workers=args.workers)


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        logging.info('running %s with seed %d, config %s', args.command, cfg.seed, config_hash(cfg))
        code = COMMANDS[args.command](cfg)
    except TrustProbeError as e:
        logging.error('%s', e)
        return 1
    logging.info('done')
    return code


if __name__ == '__main__':
    sys.exit(main())
