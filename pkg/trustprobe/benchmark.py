from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from trustprobe import constants
from trustprobe.base import DatasetError, MatchException, PipelineError, TrustProbeError, derive_seed, stable_hash
from trustprobe.config import DataSource, DatasetConfig, ExperimentConfig, NoiseConfig, config_hash
from trustprobe.dataset import Dataset, SplitTags, ValidationKind, load_csv, split as split_dataset
from trustprobe.detector import Detector, RefiningDetector, build_detector
from trustprobe.evaluation import MetricReport, build_report, compute_baselines, normalized_loss
from trustprobe.models import BaseModelSpec
from trustprobe.noise import NoiseArtifacts, NoiseKind, apply_noise
from trustprobe.pipeline import Handler, PipelineResult, SplitConfig, TrialLog, TrialRecord, prepare_dataset, random_search, run_pipeline
from trustprobe.synthetic import make_blobs, make_labeling_rules
from typing import Any, Dict, List, Optional, Tuple

import json
import logging
import os
import pandas as pd


def load_source(cfg: DatasetConfig, seed: int) -> Dataset:
    """ The raw dataset: a CSV file, or blobs carrying labeling-rule columns. """
    if cfg.source == DataSource.Csv:
        if cfg.path is None:
            raise DatasetError('a csv data source needs a path')
        return load_csv(cfg.path, cfg.schema)
    elif cfg.source == DataSource.Blobs:
        blobs = make_blobs(cfg.n, cfg.n_classes, cfg.separation, derive_seed(seed, 'blobs'), cfg.priors)
        rules = make_labeling_rules(blobs.features, cfg.n_classes, cfg.n_rules, derive_seed(seed, 'rules'))
        return replace(blobs, rules=rules.votes)
    else:
        raise MatchException(cfg.source)


def inject(ds: Dataset, noise: Optional[NoiseConfig], seed: int) -> Tuple[Dataset, Optional[NoiseArtifacts]]:
    if noise is None:
        return ds, None
    return apply_noise(ds, noise.spec(derive_seed(seed, 'noise', noise.kind.value)))


def prepare_experiment(
    cfg: ExperimentConfig,
    noise: Optional[NoiseConfig],
    validation_kind: ValidationKind
) -> Tuple[Dataset, SplitTags]:
    """ Load, corrupt, split and featurize. The feature map is fit on the train split only. """
    raw = load_source(cfg.dataset, cfg.seed)
    noisy, _ = inject(raw, noise, cfg.seed)
    if not noisy.has_clean_labels():
        raise PipelineError('baselines need ground truth: add a clean label column or a [noise] section')
    tags = split_dataset(noisy, cfg.dataset.fractions, derive_seed(cfg.seed, 'split'), validation_kind)
    logging.info('split sizes (train, validation, test): %s', tags.sizes())
    return prepare_dataset(noisy, tags, cfg.dataset.feature_map, cfg.seed), tags


def make_detector(cfg: ExperimentConfig, block: Dict[str, Any], workers: int = 1) -> Detector:
    base = build_detector(block, cfg.seed).with_workers(workers)
    if cfg.pipeline.refine_rounds > 1:
        return RefiningDetector(base=base, rounds=cfg.pipeline.refine_rounds, keep_fraction=cfg.pipeline.keep_fraction)
    return base


def run_experiment(
    cfg: ExperimentConfig,
    ds: Dataset,
    tags: SplitTags,
    detector: Detector,
    handler: Handler,
    validation_kind: ValidationKind,
    trial_log: Optional[TrialLog] = None
) -> Tuple[PipelineResult, Optional[TrialRecord]]:
    """
    With search on, pick hyperparameters and the quantile on the validation
    loss and rerun the winner; otherwise run once at the configured split.
    """
    family = cfg.pipeline.estimator
    if not cfg.pipeline.search:
        spec = BaseModelSpec(family=family, seed=derive_seed(cfg.seed, 'estimator', 0))
        result = run_pipeline(ds, detector, cfg.split, handler, spec, cfg.seed, tags=tags, validation_kind=validation_kind)
        return result, None
    search = random_search(
        ds, detector, family,
        budget=cfg.pipeline.budget,
        grid=cfg.pipeline.grid,
        validation_kind=validation_kind,
        seed=cfg.seed,
        tags=tags,
        handler=handler,
        mode=cfg.split.mode,
        trial_log=trial_log,
        config_hash=config_hash(cfg)
    )
    best = search.best
    spec = BaseModelSpec(
        family=family,
        seed=derive_seed(cfg.seed, 'estimator', best.estimator_index),
        hyperparameters=best.estimator_hyperparameters
    )
    result = run_pipeline(
        ds, detector.with_model_hyperparameters(best.detector_hyperparameters),
        SplitConfig(best.quantile, cfg.split.mode), handler, spec, cfg.seed,
        tags=tags, validation_kind=validation_kind
    )
    return result, best


def report_experiment(
    cfg: ExperimentConfig,
    ds: Dataset,
    tags: SplitTags,
    detector: Detector,
    handler: Handler,
    validation_kind: ValidationKind,
    trial_log: Optional[TrialLog] = None
) -> MetricReport:
    result, _ = run_experiment(cfg, ds, tags, detector, handler, validation_kind, trial_log)
    baselines = compute_baselines(
        ds, cfg.pipeline.estimator,
        budget=cfg.pipeline.budget,
        validation_kind=validation_kind,
        seed=cfg.seed,
        tags=tags,
        grid=cfg.pipeline.grid
    )
    return build_report(ds, tags, result, baselines, detector.name, validation_kind, config_hash(cfg))


@dataclass(frozen=True)
class Cell:
    detector: str
    noise: NoiseKind
    validation: ValidationKind
    handler: Handler

    def label(self) -> str:
        return f'{self.detector}/{self.noise.value}/{self.validation.value}/{self.handler.value}'

    def to_json(self) -> Dict[str, str]:
        return {
            'detector': self.detector,
            'noise': self.noise.value,
            'validation_kind': self.validation.value,
            'handler': self.handler.value
        }


def cells(cfg: ExperimentConfig) -> List[Cell]:
    """ Detectors x noise kinds x validation kinds x handlers, in that nesting order. """
    bench = cfg.benchmark
    return [
        Cell(detector, noise, validation, handler)
        for detector in bench.detectors
        for noise in bench.noise
        for validation in bench.validation
        for handler in bench.handlers
    ]


def cell_fingerprint(cfg: ExperimentConfig, cell: Cell) -> str:
    return stable_hash({'config': config_hash(cfg), 'cell': cell.to_json()})


def baseline_rows(report: MetricReport, cell: Cell) -> List[Dict[str, Any]]:
    rows = []
    for name, loss in report.baselines.to_json().items():
        rows.append({
            **cell.to_json(),
            'row_kind': 'baseline',
            'detector': name,
            'test_loss': loss,
            'normalized_loss': normalized_loss(loss, report.baselines.none, report.baselines.silver).value,
            'seed': report.seed,
            'config_hash': report.config_hash,
            'version': report.version
        })
    return rows


def run_cell(cfg: ExperimentConfig, cell: Cell) -> List[Dict[str, Any]]:
    """ One detector row followed by the none, random, silver and gold baseline rows. """
    fp = cell_fingerprint(cfg, cell)
    cache_path = os.path.join(cfg.out, 'cells', f'{fp}.json')
    if os.path.exists(cache_path):
        with open(cache_path, 'r', encoding='utf-8') as f:
            logging.info('cell %s already finished', cell.label())
            return list(json.load(f)['rows'])
    rate = constants.DEFAULT_NOISE_RATE if cfg.noise is None else cfg.noise.rate
    allow_self_flips = False if cfg.noise is None else cfg.noise.allow_self_flips
    noise = NoiseConfig(kind=cell.noise, rate=rate, allow_self_flips=allow_self_flips)
    ds, tags = prepare_experiment(cfg, noise, cell.validation)
    detector = make_detector(cfg, {'preset': cell.detector})
    trial_log = TrialLog(os.path.join(cfg.out, 'trials', f'{fp}.jsonl'))
    report = report_experiment(cfg, ds, tags, detector, cell.handler, cell.validation, trial_log)
    rows = [{**report.csv_row(**cell.to_json()), 'row_kind': 'detector'}] + baseline_rows(report, cell)
    os.makedirs(os.path.dirname(cache_path), exist_ok=True)
    with open(cache_path, 'w', encoding='utf-8') as f:
        json.dump({'cell': cell.to_json(), 'rows': rows}, f, sort_keys=True, indent=2)
    logging.info('cell %s done', cell.label())
    return rows


@dataclass(frozen=True)
class BenchmarkOutcome:
    path: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    failures: List[Tuple[Cell, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return len(self.failures) == 0


RESULT_COLUMNS = [
    'row_kind', 'detector', 'noise', 'validation_kind', 'handler', 'quantile', 'detection_auroc',
    'class_balance_train', 'class_balance_filtered', 'class_balance_test', 'test_loss', 'normalized_loss',
    'loss_none', 'loss_random', 'loss_silver', 'loss_gold', 'vanished_classes', 'detector_fingerprint',
    'seed', 'config_hash', 'version'
]


def write_results(rows: List[Dict[str, Any]], path: str) -> None:
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    parent = os.path.dirname(path)
    if parent != '':
        os.makedirs(parent, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.10g')


def _describe(error: Exception) -> str:
    if isinstance(error, TrustProbeError):
        return str(error)
    return f'{type(error).__name__}: {error}'


def run_benchmark(cfg: ExperimentConfig) -> BenchmarkOutcome:
    """
    Run every cell, in a process pool when there is more than one worker, and
    merge finished rows in cell order into `<out>/results.csv`. A failing cell
    is recorded and the rest still run.
    """
    todo = cells(cfg)
    logging.info('benchmark of %d cells with %d workers', len(todo), cfg.workers)
    outcomes: List[Tuple[Cell, Optional[List[Dict[str, Any]]], Optional[str]]] = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures: List[Future] = [pool.submit(run_cell, cfg, cell) for cell in todo]
            for cell, future in zip(todo, futures):
                try:
                    outcomes.append((cell, future.result(), None))
                except Exception as e:
                    logging.exception('cell %s raised', cell.label())
                    outcomes.append((cell, None, _describe(e)))
    else:
        for cell in todo:
            try:
                outcomes.append((cell, run_cell(cfg, cell), None))
            except Exception as e:
                logging.exception('cell %s raised', cell.label())
                outcomes.append((cell, None, _describe(e)))
    rows: List[Dict[str, Any]] = []
    failures: List[Tuple[Cell, str]] = []
    for cell, cell_rows, error in outcomes:
        if cell_rows is not None:
            rows.extend(cell_rows)
        else:
            assert error is not None
            logging.error('cell %s failed: %s', cell.label(), error)
            failures.append((cell, error))
    path = os.path.join(cfg.out, 'results.csv')
    write_results(rows, path)
    logging.info('wrote %d rows to %s', len(rows), path)
    return BenchmarkOutcome(path=path, rows=rows, failures=failures)
