from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, replace
from trustprobe import constants
from trustprobe.aggregation import Aggregator, AggregatorEffect, get_aggregator
from trustprobe.base import DetectorError, MatchException, derive_seed, stable_hash
from trustprobe.dataset import Dataset
from trustprobe.ensembling import EnsembleStrategy, StrategyKind, parse_strategy, probe_model
from trustprobe.models import FAMILY_CAPABILITIES, BaseModelSpec, Capability, Family, parse_family
from trustprobe.probing import Orientation, Probe, get_probe
from typing import Any, Dict, List, Mapping, Optional

import logging
import numpy as np


@dataclass(frozen=True, eq=False)
class TrustScores:
    # Higher means more trusted
    scores: np.ndarray
    fingerprint: str
    seed: int

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise DetectorError(f'trust scores must be a vector, got shape {scores.shape}')
        if not np.all(np.isfinite(scores)):
            raise DetectorError('trust scores must be finite')
        scores.flags.writeable = False
        object.__setattr__(self, 'scores', scores)

    def __len__(self) -> int:
        return len(self.scores)


def resolve_orientation(probe: Orientation, effect: AggregatorEffect) -> Orientation:
    """ Orientation of aggregated values, given the probe's and the aggregator's effect on it. """
    if effect == AggregatorEffect.Suspicion:
        return Orientation.Suspicion
    elif probe == Orientation.Signed:
        raise DetectorError('signed probes need an aggregator with a suspicion-oriented output, such as variance')
    elif effect == AggregatorEffect.Preserve:
        return probe
    elif effect == AggregatorEffect.Invert:
        return Orientation.Suspicion if probe == Orientation.Trust else Orientation.Trust
    else:
        raise MatchException(effect)


def impute_missing(values: np.ndarray) -> np.ndarray:
    """ Replace NaN markers with the median of the defined values. """
    missing = np.isnan(values)
    if not missing.any():
        return values
    if missing.all():
        raise DetectorError('the aggregator left every row undefined; use a strategy with out-of-bag rows')
    logging.warning('imputing %d undefined aggregate values with the median', int(missing.sum()))
    out = values.copy()
    out[missing] = float(np.median(values[~missing]))
    return out


class Detector(metaclass=ABCMeta):
    name: str = ''

    @abstractmethod
    def fingerprint(self) -> str:
        raise NotImplementedError()

    @abstractmethod
    def score(self, ds: Dataset) -> TrustScores:
        raise NotImplementedError()

    @property
    def search_family(self) -> Optional[Family]:
        """ Family whose search space tunes this detector, if any. """
        return None

    def with_model_hyperparameters(self, hyperparameters: Mapping[str, Any]) -> 'Detector':
        return self


@dataclass(frozen=True, eq=False)
class ModelProbingDetector(Detector):
    """
    Base model, ensemble strategy, probe and aggregator. Block combinations are
    checked on construction so incompatible ones never train anything.
    """

    model: BaseModelSpec
    ensemble: EnsembleStrategy
    probe: Probe
    aggregator: Aggregator
    seed: int = 0
    name: str = 'custom'
    workers: int = 1

    def __post_init__(self) -> None:
        capabilities = FAMILY_CAPABILITIES[self.model.family]
        missing = self.probe.requires - capabilities
        if len(missing) > 0:
            names = ', '.join(sorted(c.value for c in missing))
            raise DetectorError(f'probe {self.probe.name} needs {names}, which {self.model.family.value} models lack')
        if self.ensemble.kind == StrategyKind.Progressive and Capability.Staging not in capabilities:
            raise DetectorError(f'progressive ensembles need staging, which {self.model.family.value} models lack')
        if self.aggregator.needs_masks and not self.ensemble.independent:
            raise DetectorError(
                f'aggregator {self.aggregator.name} needs out-of-bag rows; '
                f'{self.ensemble.label()} trains every member on every row'
            )
        if self.aggregator.needs_order and not self.ensemble.ordered:
            raise DetectorError(f'aggregator {self.aggregator.name} needs a progressive ensemble, got {self.ensemble.label()}')
        if self.aggregator.needs_binary and not self.probe.binary:
            raise DetectorError(f'aggregator {self.aggregator.name} needs a binary probe, got {self.probe.name}')
        resolve_orientation(self.probe.orientation, self.aggregator.effect)

    @property
    def orientation(self) -> Orientation:
        return resolve_orientation(self.probe.orientation, self.aggregator.effect)

    @property
    def search_family(self) -> Optional[Family]:
        return self.model.family

    def blocks(self) -> Dict[str, Any]:
        return {
            'model': self.model.to_json(),
            'ensemble': self.ensemble.label(),
            'ensemble_seed': self.ensemble.seed,
            'probe': self.probe.name,
            'aggregate': self.aggregator.name,
            'seed': self.seed
        }

    def fingerprint(self) -> str:
        return stable_hash(self.blocks())

    def with_model_hyperparameters(self, hyperparameters: Mapping[str, Any]) -> 'ModelProbingDetector':
        return replace(self, model=self.model.with_hyperparameters(**hyperparameters))

    def with_workers(self, workers: int) -> 'ModelProbingDetector':
        return replace(self, workers=workers)

    def trust_scores(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        n_classes: Optional[int] = None,
        train_indices: Optional[np.ndarray] = None
    ) -> TrustScores:
        stream = probe_model(
            self.ensemble, self.model, features, labels, self.probe,
            n_classes=n_classes, train_indices=train_indices, workers=self.workers
        )
        values = impute_missing(self.aggregator(stream))
        if self.orientation == Orientation.Suspicion:
            values = -values
        logging.info('detector %s (%s) scored %d rows over %s members', self.name, self.fingerprint(), len(values), stream.n_members)
        return TrustScores(scores=values, fingerprint=self.fingerprint(), seed=self.seed)

    def score(self, ds: Dataset) -> TrustScores:
        return self.trust_scores(ds.features, ds.noisy_labels, ds.n_classes)


def trust_scores(det: ModelProbingDetector, features: np.ndarray, labels: np.ndarray) -> TrustScores:
    return det.trust_scores(features, labels)


@dataclass(frozen=True)
class RandomDetector(Detector):
    """ Uniform random scores; the random baseline. """

    seed: int = 0
    name: str = 'random'

    def fingerprint(self) -> str:
        return stable_hash({'detector': self.name, 'seed': self.seed})

    def score(self, ds: Dataset) -> TrustScores:
        rng = np.random.default_rng(derive_seed(self.seed, 'random-scores'))
        return TrustScores(scores=rng.random(ds.n_examples), fingerprint=self.fingerprint(), seed=self.seed)


@dataclass(frozen=True)
class OracleDetector(Detector):
    """ Scores 1 on genuine rows and 0 on mislabeled ones; needs clean labels. """

    seed: int = 0
    name: str = 'oracle'

    def fingerprint(self) -> str:
        return stable_hash({'detector': self.name, 'seed': self.seed})

    def score(self, ds: Dataset) -> TrustScores:
        scores = 1.0 - ds.is_mislabeled().astype(np.float64)
        return TrustScores(scores=scores, fingerprint=self.fingerprint(), seed=self.seed)


@dataclass(frozen=True)
class Preset:
    name: str
    family: Family
    ensemble: str
    probe: str
    aggregate: str


PRESETS: List[Preset] = [
    Preset('aum', Family.Gbt, 'progressive', 'margin', 'sum'),
    Preset('forget', Family.Klm, 'progressive', 'accuracy', 'forget_count'),
    Preset('small_loss', Family.Klm, 'none', 'logloss', 'sum'),
    Preset('cleanlab', Family.Klm, 'kfold:5', 'adjusted_confidence', 'oob_mean'),
    Preset('consensus', Family.Klm, 'bootstrap:10', 'accuracy', 'oob_mean'),
    # Input gradients of piecewise-constant trees vanish almost everywhere. The
    # log-probability gradient keeps rows the model disagrees with from shrinking.
    Preset('vosg', Family.Klm, 'progressive', 'log_input_gradient', 'variance'),
    Preset('tracin', Family.Klm, 'progressive', 'grad_norm_sq', 'sum'),
    Preset('agra', Family.Klm, 'none', 'unit_grad_cosine', 'sum'),
    Preset('self_influence', Family.Klm, 'none', 'self_influence', 'sum'),
    Preset('knn_edit', Family.Knn, 'loo', 'accuracy', 'oob_mean')
]

PRESET_LOOKUP: Dict[str, Preset] = {p.name: p for p in PRESETS}


def _assemble(
    name: str,
    family: Family,
    ensemble: str,
    probe: str,
    aggregate: str,
    seed: int,
    hyperparameters: Optional[Mapping[str, Any]],
    loo_cap: int
) -> ModelProbingDetector:
    return ModelProbingDetector(
        model=BaseModelSpec(family=family, seed=derive_seed(seed, 'model'), hyperparameters=dict(hyperparameters or {})),
        ensemble=parse_strategy(ensemble, seed=derive_seed(seed, 'ensemble'), loo_cap=loo_cap),
        probe=get_probe(probe),
        aggregator=get_aggregator(aggregate),
        seed=seed,
        name=name
    )


def preset(
    name: str,
    seed: int = 0,
    family: Optional[Family] = None,
    hyperparameters: Optional[Mapping[str, Any]] = None,
    loo_cap: int = constants.DEFAULT_LOO_CAP
) -> ModelProbingDetector:
    """ Named block assignment; `family` swaps the base model where the blocks allow it. """
    found = PRESET_LOOKUP.get(name)
    if found is None:
        raise DetectorError(f'unknown preset {name!r}, expected one of {sorted(PRESET_LOOKUP)}')
    chosen = found.family if family is None else family
    if found.name == 'vosg' and chosen == Family.Gbt:
        logging.warning('vosg on gbt: tree input gradients are zero almost everywhere, expect flat scores')
    return _assemble(found.name, chosen, found.ensemble, found.probe, found.aggregate, seed, hyperparameters, loo_cap)


BLOCK_KEYS = frozenset({'preset', 'model', 'ensemble', 'probe', 'aggregate', 'hyperparameters', 'loo_cap'})


def build_detector(block: Mapping[str, Any], seed: int) -> ModelProbingDetector:
    """
    Resolve `{ preset = "<name>" }` (optionally with `model` and
    `hyperparameters` overrides) or an explicit `{ model, ensemble, probe,
    aggregate }` block.
    """
    unknown = set(block) - BLOCK_KEYS
    if len(unknown) > 0:
        raise DetectorError(f'unknown detector keys: {sorted(unknown)}')
    loo_cap = int(block.get('loo_cap', constants.DEFAULT_LOO_CAP))
    hyperparameters = block.get('hyperparameters')
    family = parse_family(block['model']) if 'model' in block else None
    if 'preset' in block:
        return preset(block['preset'], seed, family=family, hyperparameters=hyperparameters, loo_cap=loo_cap)
    missing = [k for k in ('model', 'ensemble', 'probe', 'aggregate') if k not in block]
    if len(missing) > 0:
        raise DetectorError(f'detector block needs a preset or all of model, ensemble, probe, aggregate; missing {missing}')
    assert family is not None
    return _assemble('custom', family, block['ensemble'], block['probe'], block['aggregate'], seed, hyperparameters, loo_cap)


def iterative_refine(
    det: ModelProbingDetector,
    features: np.ndarray,
    labels: np.ndarray,
    rounds: int,
    keep_fraction: float,
    n_classes: Optional[int] = None
) -> TrustScores:
    """
    Rescore every row with members trained only on the rows the previous
    round trusted most. Round 1 trains on everything.
    """
    if rounds < 1:
        raise DetectorError(f'rounds must be at least 1, got {rounds}')
    if not 0.0 < keep_fraction <= 1.0:
        raise DetectorError(f'keep_fraction must lie in (0, 1], got {keep_fraction}')
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    present = np.unique(labels)
    scores = det.trust_scores(features, labels, k)
    for r in range(1, rounds):
        n_keep = int(np.floor(keep_fraction * n + 1e-9))
        # Highest scores first, ties toward the lower index
        order = np.lexsort((np.arange(n), -scores.scores))
        kept = np.sort(order[:n_keep])
        vanished = np.setdiff1d(present, labels[kept])
        if n_keep < k or len(vanished) > 0:
            raise DetectorError(
                f'keeping {n_keep} rows in round {r + 1} leaves classes {vanished.tolist()} without examples'
            )
        logging.info('refinement round %d trains on %d of %d rows', r + 1, n_keep, n)
        scores = det.trust_scores(features, labels, k, train_indices=kept)
    return scores


@dataclass(frozen=True, eq=False)
class RefiningDetector(Detector):
    """ A model-probing detector rescored with iterative refinement. """

    base: ModelProbingDetector
    rounds: int
    keep_fraction: float
    name: str = ''

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise DetectorError(f'rounds must be at least 1, got {self.rounds}')
        if self.name == '':
            object.__setattr__(self, 'name', self.base.name)

    def fingerprint(self) -> str:
        if self.rounds == 1:
            return self.base.fingerprint()
        return stable_hash({'base': self.base.fingerprint(), 'rounds': self.rounds, 'keep_fraction': self.keep_fraction})

    @property
    def search_family(self) -> Optional[Family]:
        return self.base.model.family

    def with_model_hyperparameters(self, hyperparameters: Mapping[str, Any]) -> 'RefiningDetector':
        return replace(self, base=self.base.with_model_hyperparameters(hyperparameters))

    def score(self, ds: Dataset) -> TrustScores:
        refined = iterative_refine(self.base, ds.features, ds.noisy_labels, self.rounds, self.keep_fraction, ds.n_classes)
        return TrustScores(scores=refined.scores, fingerprint=self.fingerprint(), seed=self.base.seed)
