from dataclasses import dataclass, field
from scipy.stats import rankdata
from trustprobe import constants
from trustprobe.base import EvaluationError, derive_seed
from trustprobe.dataset import Dataset, Part, SplitTags, ValidationKind, split as split_dataset
from trustprobe.detector import RandomDetector, TrustScores
from trustprobe.models import BaseModelSpec, Family, sample_hyperparameters
from trustprobe.pipeline import Handler, PipelineResult, fit_and_evaluate, random_search
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import logging
import numpy as np


def detection_auroc(scores: Union[TrustScores, np.ndarray], is_mislabeled: np.ndarray) -> float:
    """
    Probability that a random genuine row outranks a random mislabeled one,
    ties counting one half (Mann-Whitney U over average ranks).
    """
    values = scores.scores if isinstance(scores, TrustScores) else np.asarray(scores, dtype=np.float64)
    mislabeled = np.asarray(is_mislabeled, dtype=bool)
    if values.shape != mislabeled.shape:
        raise EvaluationError(f'{len(values)} scores for {len(mislabeled)} mislabeled flags')
    n_neg = int(mislabeled.sum())
    n_pos = len(mislabeled) - n_neg
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError('AUROC needs both genuine and mislabeled examples')
    ranks = rankdata(values)
    u = float(ranks[~mislabeled].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def class_counts(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)


def vanished_classes(labels: np.ndarray, n_classes: int) -> List[int]:
    return [int(c) for c in np.flatnonzero(class_counts(labels, n_classes) == 0)]


def class_balance(labels: np.ndarray, n_classes: int) -> float:
    """ Minority over majority class count; 0 when some class has no rows. """
    counts = class_counts(labels, n_classes)
    if counts.max(initial=0) == 0:
        raise EvaluationError('class balance of an empty label set is undefined')
    return float(counts.min()) / float(counts.max())


@dataclass(frozen=True)
class NormalizedLoss:
    # None when the none and silver baselines coincide
    value: Optional[float]
    raw: float

    @property
    def defined(self) -> bool:
        return self.value is not None


def normalized_loss(loss: float, loss_none: float, loss_silver: float) -> NormalizedLoss:
    """ Affine rescaling sending the silver baseline to 100 and the none baseline to 200. """
    if not all(np.isfinite([loss, loss_none, loss_silver])):
        raise EvaluationError(f'losses must be finite, got {loss}, {loss_none}, {loss_silver}')
    spread = loss_none - loss_silver
    if abs(spread) < constants.NORMALIZATION_EPS:
        return NormalizedLoss(value=None, raw=loss)
    scaled = constants.NORMALIZED_SILVER + (constants.NORMALIZED_NONE - constants.NORMALIZED_SILVER) * (loss - loss_silver) / spread
    return NormalizedLoss(value=scaled, raw=loss)


@dataclass(frozen=True)
class Baselines:
    none: float
    random: float
    silver: float
    gold: float

    def to_json(self) -> Dict[str, float]:
        return {'none': self.none, 'random': self.random, 'silver': self.silver, 'gold': self.gold}


def _search_estimator(train: Dataset, ds: Dataset, tags: SplitTags, family: Family, n_draws: int, seed: int) -> float:
    """ Test loss of the estimator draw with the lowest validation loss. """
    rng = np.random.default_rng(derive_seed(seed, 'search', 'estimator'))
    best: Optional[Tuple[float, float]] = None
    for j in range(n_draws):
        spec = BaseModelSpec(family=family, seed=derive_seed(seed, 'estimator', j), hyperparameters=sample_hyperparameters(family, rng))
        evaluation = fit_and_evaluate(train, ds, tags, spec)
        if best is None or evaluation.validation_loss < best[0]:
            best = (evaluation.validation_loss, evaluation.test_loss)
    if best is None:
        raise EvaluationError('baseline search needs at least one estimator draw')
    return best[1]


def compute_baselines(
    ds: Dataset,
    estimator_family: Family,
    budget: Tuple[int, int] = constants.DEFAULT_SEARCH_BUDGET,
    validation_kind: ValidationKind = ValidationKind.Noisy,
    seed: int = 0,
    tags: Optional[SplitTags] = None,
    grid: Sequence[float] = tuple(constants.QUANTILE_GRID)
) -> Baselines:
    """
    Test losses of the none, random, silver and gold training sets, each with
    its own estimator search. The random baseline searches the same quantile
    grid as a real detector.
    """
    if tags is None:
        tags = split_dataset(ds, constants.DEFAULT_FRACTIONS, derive_seed(seed, 'split'), validation_kind)
    train = ds.subset(tags.indices(Part.Train))
    n_draws = budget[1]
    none = _search_estimator(train, ds, tags, estimator_family, n_draws, seed)
    genuine = np.flatnonzero(~train.is_mislabeled())
    silver = _search_estimator(train.subset(genuine), ds, tags, estimator_family, n_draws, seed)
    gold = _search_estimator(train.with_noisy_labels(train.require_clean_labels()), ds, tags, estimator_family, n_draws, seed)
    random = random_search(
        ds, RandomDetector(seed=derive_seed(seed, 'random-baseline')), estimator_family,
        budget=(1, n_draws), grid=grid, validation_kind=validation_kind, seed=seed, tags=tags
    ).best.test_loss
    logging.info('baselines: none %.6f, random %.6f, silver %.6f, gold %.6f', none, random, silver, gold)
    return Baselines(none=none, random=random, silver=silver, gold=gold)


@dataclass(frozen=True)
class MetricReport:
    detector: str
    detector_fingerprint: str
    handler: str
    validation_kind: str
    quantile: float
    detection_auroc: Optional[float]
    class_balance_train: float
    class_balance_filtered: float
    class_balance_test: float
    test_loss: float
    normalized: NormalizedLoss
    baselines: Baselines
    vanished_classes: List[int] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ''
    version: str = constants.ARTIFACT_VERSION

    def to_json(self) -> Dict[str, Any]:
        return {
            'detector': self.detector,
            'detector_fingerprint': self.detector_fingerprint,
            'handler': self.handler,
            'validation_kind': self.validation_kind,
            'quantile': self.quantile,
            'detection_auroc': self.detection_auroc,
            'class_balance': {
                'train': self.class_balance_train,
                'filtered': self.class_balance_filtered,
                'test': self.class_balance_test
            },
            'test_loss': self.test_loss,
            'normalized_loss': self.normalized.value,
            'baselines': self.baselines.to_json(),
            'vanished_classes': list(self.vanished_classes),
            'seed': self.seed,
            'config_hash': self.config_hash,
            'version': self.version
        }

    def csv_row(self, **extra: Any) -> Dict[str, Any]:
        row: Dict[str, Any] = dict(extra)
        row.update({
            'detector': self.detector,
            'handler': self.handler,
            'validation_kind': self.validation_kind,
            'quantile': self.quantile,
            'detection_auroc': self.detection_auroc,
            'class_balance_train': self.class_balance_train,
            'class_balance_filtered': self.class_balance_filtered,
            'class_balance_test': self.class_balance_test,
            'test_loss': self.test_loss,
            'normalized_loss': self.normalized.value,
            'loss_none': self.baselines.none,
            'loss_random': self.baselines.random,
            'loss_silver': self.baselines.silver,
            'loss_gold': self.baselines.gold,
            'vanished_classes': ' '.join(str(c) for c in self.vanished_classes),
            'detector_fingerprint': self.detector_fingerprint,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'version': self.version
        })
        return row


def build_report(
    ds: Dataset,
    tags: SplitTags,
    result: PipelineResult,
    baselines: Baselines,
    detector_name: str,
    validation_kind: ValidationKind,
    config_hash: str = ''
) -> MetricReport:
    train = result.train
    auroc: Optional[float] = None
    if train.has_clean_labels():
        mislabeled = train.is_mislabeled()
        if 0 < mislabeled.sum() < len(mislabeled):
            auroc = detection_auroc(result.scores, mislabeled)
    test_labels = ds.clean_labels if ds.clean_labels is not None else ds.noisy_labels
    handled_labels = result.handled.noisy_labels
    if result.handler == Handler.Relabel:
        # Relabeling keeps every row; the filtered balance is what a filter would have kept
        handled_labels = train.noisy_labels[result.split_result.trusted]
    vanished = vanished_classes(handled_labels, ds.n_classes)
    if len(vanished) > 0:
        logging.warning('classes %s have no trusted rows left', vanished)
    return MetricReport(
        detector=detector_name,
        detector_fingerprint=result.detector_fingerprint,
        handler=result.handler.value,
        validation_kind=validation_kind.value,
        quantile=result.split_config.quantile,
        detection_auroc=auroc,
        class_balance_train=class_balance(train.noisy_labels, ds.n_classes),
        class_balance_filtered=class_balance(handled_labels, ds.n_classes) if len(handled_labels) > 0 else 0.0,
        class_balance_test=class_balance(test_labels[tags.indices(Part.Test)], ds.n_classes),
        test_loss=result.test_loss,
        normalized=normalized_loss(result.test_loss, baselines.none, baselines.silver),
        baselines=baselines,
        vanished_classes=vanished,
        seed=result.seed,
        config_hash=config_hash
    )
