from dataclasses import asdict, dataclass, field
from enum import Enum, unique
from trustprobe import constants
from trustprobe.base import MatchException, ModelError, PipelineError, derive_seed, stable_hash
from trustprobe.dataset import (
    Dataset,
    Part,
    SplitTags,
    ValidationKind,
    recode_categories,
    split as split_dataset,
    target_for_test,
    validation_target
)
from trustprobe.detector import Detector, TrustScores
from trustprobe.features import FeatureKind, apply_feature_map, fit_feature_map
from trustprobe.models import BaseModelSpec, Family, fit, log_loss, sample_hyperparameters
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import json
import logging
import numpy as np
import os


@unique
class SplitMode(Enum):
    Global = 'global'
    PerClass = 'per_class'


@unique
class Handler(Enum):
    Filter = 'filter'
    Relabel = 'relabel'


SPLIT_MODE_LOOKUP: Dict[str, SplitMode] = {m.value: m for m in SplitMode}
HANDLER_LOOKUP: Dict[str, Handler] = {h.value: h for h in Handler}


@dataclass(frozen=True)
class SplitConfig:
    quantile: float
    mode: SplitMode = SplitMode.Global

    def __post_init__(self) -> None:
        if not any(abs(self.quantile - q) < 1e-12 for q in constants.QUANTILE_GRID):
            raise PipelineError(f'quantile {self.quantile} is not on the grid {constants.QUANTILE_GRID}')


@dataclass(frozen=True, eq=False)
class SplitResult:
    trusted: np.ndarray
    untrusted: np.ndarray

    @property
    def n_trusted(self) -> int:
        return len(self.trusted)

    @property
    def n_untrusted(self) -> int:
        return len(self.untrusted)


def _bottom(scores: np.ndarray, rows: np.ndarray, quantile: float) -> np.ndarray:
    """ The floor(q * len(rows)) lowest-scored rows, ties toward the lower index. """
    count = int(np.floor(quantile * len(rows) + 1e-9))
    order = np.lexsort((rows, scores[rows]))
    return rows[order[:count]]


def split(scores: TrustScores, cfg: SplitConfig, labels: np.ndarray) -> SplitResult:
    values = scores.scores
    labels = np.asarray(labels, dtype=np.int64)
    if len(values) != len(labels):
        raise PipelineError(f'{len(values)} scores for {len(labels)} labels')
    rows = np.arange(len(labels))
    if cfg.mode == SplitMode.Global:
        untrusted = _bottom(values, rows, cfg.quantile)
    elif cfg.mode == SplitMode.PerClass:
        parts = [_bottom(values, rows[labels == c], cfg.quantile) for c in np.unique(labels)]
        untrusted = np.concatenate(parts) if len(parts) > 0 else np.zeros(0, dtype=np.int64)
    else:
        raise MatchException(cfg.mode)
    untrusted = np.sort(untrusted).astype(np.int64)
    trusted = np.setdiff1d(rows, untrusted)
    return SplitResult(trusted=trusted, untrusted=untrusted)


def handle_filter(ds: Dataset, result: SplitResult) -> Dataset:
    kept = ds.subset(result.trusted)
    before = set(np.unique(ds.noisy_labels).tolist())
    after = set(np.unique(kept.noisy_labels).tolist())
    if before != after:
        logging.warning('filtering removed every example of classes %s', sorted(before - after))
    return kept


def handle_relabel(ds: Dataset, result: SplitResult) -> Dataset:
    """ Oracle review: untrusted rows get their clean label back. """
    labels = np.array(ds.noisy_labels, copy=True)
    labels[result.untrusted] = ds.require_clean_labels()[result.untrusted]
    return ds.with_noisy_labels(labels)


def handle(ds: Dataset, result: SplitResult, handler: Handler) -> Dataset:
    if handler == Handler.Filter:
        return handle_filter(ds, result)
    elif handler == Handler.Relabel:
        return handle_relabel(ds, result)
    else:
        raise MatchException(handler)


def prepare_dataset(ds: Dataset, tags: SplitTags, kind: FeatureKind, seed: int) -> Dataset:
    """ Fit category codes and the feature map on the train split and apply them to every row. """
    train_rows = tags.indices(Part.Train)
    ds = recode_categories(ds, train_rows)
    fmap = fit_feature_map(ds.subset(train_rows), kind, derive_seed(seed, 'feature-map'))
    return apply_feature_map(fmap, ds)


@dataclass(frozen=True)
class Evaluation:
    validation_loss: float
    test_loss: float


def fit_and_evaluate(train: Dataset, ds: Dataset, tags: SplitTags, spec: BaseModelSpec) -> Evaluation:
    """ Fit an estimator on `train` and score it on the validation target and the clean test split. """
    val_idx, val_labels = validation_target(ds, tags)
    test_idx, test_labels = target_for_test(ds, tags)
    if len(val_idx) == 0:
        raise PipelineError('the validation split is empty')
    if len(test_idx) == 0:
        raise PipelineError('the test split is empty')
    model = fit(spec, train.features, train.noisy_labels, ds.n_classes)
    return Evaluation(
        validation_loss=log_loss(model.predict_proba(ds.features[val_idx]), val_labels),
        test_loss=log_loss(model.predict_proba(ds.features[test_idx]), test_labels)
    )


@dataclass(frozen=True, eq=False)
class PipelineResult:
    detector_fingerprint: str
    split_config: SplitConfig
    handler: Handler
    split_result: SplitResult
    scores: TrustScores
    # Training split (row order of the scores) and what the handler made of it
    train: Dataset
    handled: Dataset
    validation_loss: float
    test_loss: float
    seed: int

    def trusted_per_class(self) -> List[int]:
        labels = self.train.noisy_labels[self.split_result.trusted]
        return np.bincount(labels, minlength=self.train.n_classes).tolist()


def run_pipeline(
    ds: Dataset,
    detector: Detector,
    split_cfg: SplitConfig,
    handler: Handler,
    estimator_spec: BaseModelSpec,
    seed: int,
    tags: Optional[SplitTags] = None,
    validation_kind: ValidationKind = ValidationKind.Noisy,
    scores: Optional[TrustScores] = None
) -> PipelineResult:
    """
    Score the train split, split it at the quantile, handle the untrusted part
    and fit the final estimator. Precomputed scores for the train split skip
    the detection stage.
    """
    if tags is None:
        tags = split_dataset(ds, constants.DEFAULT_FRACTIONS, derive_seed(seed, 'split'), validation_kind)
    train = ds.subset(tags.indices(Part.Train))
    if scores is None:
        scores = detector.score(train)
    result = split(scores, split_cfg, train.noisy_labels)
    logging.info('split at q=%.1f (%s): %d trusted, %d untrusted', split_cfg.quantile, split_cfg.mode.value, result.n_trusted, result.n_untrusted)
    handled = handle(train, result, handler)
    evaluation = fit_and_evaluate(handled, ds, tags, estimator_spec)
    logging.info('validation loss %.6f, test loss %.6f', evaluation.validation_loss, evaluation.test_loss)
    return PipelineResult(
        detector_fingerprint=scores.fingerprint,
        split_config=split_cfg,
        handler=handler,
        split_result=result,
        scores=scores,
        train=train,
        handled=handled,
        validation_loss=evaluation.validation_loss,
        test_loss=evaluation.test_loss,
        seed=seed
    )


@dataclass(frozen=True)
class TrialRecord:
    trial_index: int
    detector_index: int
    estimator_index: int
    detector_fingerprint: str
    detector_hyperparameters: Dict[str, Any]
    estimator_hyperparameters: Dict[str, Any]
    quantile: float
    mode: str
    handler: str
    validation_kind: str
    validation_loss: float
    test_loss: float
    n_trusted: int
    n_untrusted: int
    trusted_per_class: List[int]
    seed: int
    fingerprint: str = ''
    config_hash: str = ''
    version: str = constants.ARTIFACT_VERSION

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> 'TrialRecord':
        return cls(**doc)

    def sort_key(self) -> Tuple[float, float, int]:
        return (self.validation_loss, self.quantile, self.trial_index)


def trial_fingerprint(**fields: Any) -> str:
    return stable_hash(fields)


class TrialLog:
    """ Append-only JSON-lines log of trial records keyed by trial fingerprint. """

    def __init__(self, path: str) -> None:
        self._path = path
        self._records: Dict[str, TrialRecord] = {}
        if os.path.exists(path):
            with open(path, 'r', encoding='utf-8') as f:
                for line_no, line in enumerate(f, start=1):
                    line = line.strip()
                    if line == '':
                        continue
                    try:
                        record = TrialRecord.from_json(json.loads(line))
                    except (ValueError, TypeError) as e:
                        # A crash mid-write leaves at most one broken tail line
                        logging.warning('skipping unreadable trial log line %d in %s: %s', line_no, path, e)
                        continue
                    self._records[record.fingerprint] = record
            logging.info('resuming from %d logged trials in %s', len(self._records), path)

    @property
    def path(self) -> str:
        return self._path

    def __len__(self) -> int:
        return len(self._records)

    def get(self, fingerprint: str) -> Optional[TrialRecord]:
        return self._records.get(fingerprint)

    def append(self, record: TrialRecord) -> None:
        parent = os.path.dirname(self._path)
        if parent != '':
            os.makedirs(parent, exist_ok=True)
        with open(self._path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record.to_json(), sort_keys=True) + '\n')
        self._records[record.fingerprint] = record

    def records(self) -> Iterator[TrialRecord]:
        return iter(self._records.values())


@dataclass(frozen=True)
class SearchResult:
    best: TrialRecord
    trials: List[TrialRecord] = field(default_factory=list)


def _draws(family: Optional[Family], count: int, seed: int) -> List[Dict[str, float]]:
    rng = np.random.default_rng(seed)
    if family is None:
        return [{} for _ in range(count)]
    return [sample_hyperparameters(family, rng) for _ in range(count)]


def random_search(
    ds: Dataset,
    detector: Detector,
    estimator_family: Family,
    budget: Tuple[int, int] = constants.DEFAULT_SEARCH_BUDGET,
    grid: Sequence[float] = tuple(constants.QUANTILE_GRID),
    validation_kind: ValidationKind = ValidationKind.Noisy,
    seed: int = 0,
    tags: Optional[SplitTags] = None,
    handler: Handler = Handler.Filter,
    mode: SplitMode = SplitMode.Global,
    trial_log: Optional[TrialLog] = None,
    config_hash: str = ''
) -> SearchResult:
    """
    Every detector draw x estimator draw x grid quantile. Each detector draw
    scores the train split once; the winner has the lowest validation loss,
    ties going to the smaller quantile and then the earlier trial.
    """
    n_detectors, n_estimators = budget
    if n_detectors < 1 or n_estimators < 1:
        raise PipelineError(f'search budget must be positive, got {budget}')
    if tags is None:
        tags = split_dataset(ds, constants.DEFAULT_FRACTIONS, derive_seed(seed, 'split'), validation_kind)
    elif tags.validation_kind != validation_kind:
        raise PipelineError(f'tags validate with {tags.validation_kind.value}, search asked for {validation_kind.value}')
    if len(validation_target(ds, tags)[0]) == 0:
        raise PipelineError('the validation split is empty')
    train = ds.subset(tags.indices(Part.Train))
    split_fp = stable_hash(tags.assignment.tolist())
    detector_draws = _draws(detector.search_family, n_detectors, derive_seed(seed, 'search', 'detector'))
    estimator_draws = _draws(estimator_family, n_estimators, derive_seed(seed, 'search', 'estimator'))
    trials: List[TrialRecord] = []
    trial_index = 0
    for i, det_hp in enumerate(detector_draws):
        candidate = detector.with_model_hyperparameters(det_hp)
        det_fp = candidate.fingerprint()
        scores: Optional[TrustScores] = None
        for j, est_hp in enumerate(estimator_draws):
            spec = BaseModelSpec(family=estimator_family, seed=derive_seed(seed, 'estimator', j), hyperparameters=est_hp)
            for q in grid:
                fp = trial_fingerprint(
                    detector=det_fp, estimator=spec.to_json(), quantile=q, mode=mode.value,
                    handler=handler.value, validation=validation_kind.value, split=split_fp, seed=seed
                )
                logged = None if trial_log is None else trial_log.get(fp)
                if logged is not None:
                    trials.append(logged)
                    trial_index += 1
                    continue
                if scores is None:
                    scores = candidate.score(train)
                result = split(scores, SplitConfig(q, mode), train.noisy_labels)
                handled = handle(train, result, handler)
                try:
                    evaluation = fit_and_evaluate(handled, ds, tags, spec)
                except ModelError as e:
                    logging.warning('skipping trial at q=%.1f: %s', q, e)
                    continue
                record = TrialRecord(
                    trial_index=trial_index,
                    detector_index=i,
                    estimator_index=j,
                    detector_fingerprint=det_fp,
                    detector_hyperparameters=dict(det_hp),
                    estimator_hyperparameters=dict(est_hp),
                    quantile=float(q),
                    mode=mode.value,
                    handler=handler.value,
                    validation_kind=validation_kind.value,
                    validation_loss=evaluation.validation_loss,
                    test_loss=evaluation.test_loss,
                    n_trusted=result.n_trusted,
                    n_untrusted=result.n_untrusted,
                    trusted_per_class=np.bincount(train.noisy_labels[result.trusted], minlength=ds.n_classes).tolist(),
                    seed=seed,
                    fingerprint=fp,
                    config_hash=config_hash
                )
                if trial_log is not None:
                    trial_log.append(record)
                trials.append(record)
                trial_index += 1
        logging.debug('detector draw %d of %d done', i + 1, n_detectors)
    if len(trials) == 0:
        raise PipelineError('every trial failed to fit an estimator')
    best = min(trials, key=TrialRecord.sort_key)
    logging.info('search over %d trials picked q=%.1f with validation loss %.6f', len(trials), best.quantile, best.validation_loss)
    return SearchResult(best=best, trials=trials)
