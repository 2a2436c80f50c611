from dataclasses import dataclass
from enum import Enum, unique
from trustprobe import constants
from trustprobe.base import MatchException, NoiseError
from trustprobe.dataset import Dataset
from typing import Any, Dict, List, Optional, Tuple

import logging
import numpy as np


@unique
class NoiseKind(Enum):
    # Noise completely at random: uniform flips
    Ncar = 'ncar'
    # Noise not at random: majority vote over labeling rules
    Rules = 'rules'


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind
    seed: int
    rate: float = 0.0
    allow_self_flips: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise NoiseError(f'noise rate must lie in [0, 1], got {self.rate}')


@dataclass(frozen=True, eq=False)
class RuleMatrix:
    votes: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        votes = np.asarray(self.votes, dtype=np.int64)
        if votes.ndim != 2:
            raise NoiseError(f'rule votes must be a matrix, got shape {votes.shape}')
        bad = (votes != constants.ABSTAIN) & ((votes < 0) | (votes >= self.n_classes))
        if bad.any():
            row, col = (int(i) for i in np.argwhere(bad)[0])
            raise NoiseError(f'rule {col} votes {int(votes[row, col])} at row {row}, outside [0, {self.n_classes})')
        object.__setattr__(self, 'votes', votes)

    @property
    def n_rules(self) -> int:
        return int(self.votes.shape[1])


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    # T[i, j] = P(noisy = i | true = j); an extra last row counts unlabeled examples
    matrix: np.ndarray
    row_labels: Tuple[str, ...]
    column_labels: Tuple[str, ...]

    def to_json(self) -> Dict[str, Any]:
        return {
            'rows': list(self.row_labels),
            'columns': list(self.column_labels),
            'matrix': self.matrix.tolist()
        }


@dataclass(frozen=True, eq=False)
class NoiseArtifacts:
    spec: NoiseSpec
    transition: TransitionMatrix
    rules: Optional[RuleMatrix] = None
    # Rows of the input dataset that survived (covered by at least one rule)
    kept: Optional[np.ndarray] = None


def inject_ncar(
    labels: np.ndarray,
    n_classes: int,
    rate: float,
    seed: int,
    allow_self_flips: bool = False
) -> np.ndarray:
    """
    Flip each label independently with probability `rate`. By default the new
    label is drawn uniformly among the other K - 1 classes, so the realized
    mislabeled fraction matches the nominal rate.
    """
    if n_classes < 2:
        raise NoiseError(f'label noise needs at least 2 classes, got {n_classes}')
    if not 0.0 <= rate <= 1.0:
        raise NoiseError(f'noise rate must lie in [0, 1], got {rate}')
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    flipped = rng.random(len(labels)) < rate
    if allow_self_flips:
        replacement = rng.integers(0, n_classes, size=len(labels))
    else:
        replacement = (labels + rng.integers(1, n_classes, size=len(labels))) % n_classes
    return np.where(flipped, replacement, labels)


def vote_counts(rules: RuleMatrix) -> np.ndarray:
    """ n x K matrix of non-abstaining votes per class. """
    n = rules.votes.shape[0]
    counts = np.zeros((n, rules.n_classes), dtype=np.int64)
    for column in rules.votes.T:
        fired = column != constants.ABSTAIN
        np.add.at(counts, (np.flatnonzero(fired), column[fired]), 1)
    return counts


def aggregate_weak_labels(rules: RuleMatrix, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Majority vote over non-abstaining rules. Ties pick uniformly among the tied
    winners; rows without any vote are uncovered and labeled constants.UNLABELED.
    """
    counts = vote_counts(rules)
    top = counts.max(axis=1, initial=0)
    covered = top > 0
    winners = (counts == top[:, None]) & covered[:, None]
    rng = np.random.default_rng(seed)
    # A uniform key per (row, class) picks a uniform winner among ties
    keys = np.where(winners, rng.random(counts.shape), -1.0)
    labels = np.where(covered, np.argmax(keys, axis=1), constants.UNLABELED)
    return labels.astype(np.int64), covered


def estimate_transition_matrix(
    noisy: np.ndarray,
    clean: np.ndarray,
    n_classes: int,
    with_unlabeled_row: Optional[bool] = None
) -> TransitionMatrix:
    """
    Empirical T[i, j] = count(noisy = i and clean = j) / count(clean = j). The
    unlabeled row is added when requested, or by default when any noisy label
    is constants.UNLABELED.
    """
    noisy = np.asarray(noisy, dtype=np.int64)
    clean = np.asarray(clean, dtype=np.int64)
    if noisy.shape != clean.shape:
        raise NoiseError(f'noisy labels {noisy.shape} and clean labels {clean.shape} differ in shape')
    unlabeled = noisy == constants.UNLABELED
    if with_unlabeled_row is None:
        with_unlabeled_row = bool(unlabeled.any())
    if unlabeled.any() and not with_unlabeled_row:
        raise NoiseError('unlabeled examples present but no unlabeled row requested')
    bad = ~unlabeled & ((noisy < 0) | (noisy >= n_classes))
    if bad.any():
        raise NoiseError(f'noisy label {int(noisy[np.argmax(bad)])} outside [0, {n_classes})')
    n_rows = n_classes + (1 if with_unlabeled_row else 0)
    row_index = np.where(unlabeled, n_classes, noisy)
    counts = np.zeros((n_rows, n_classes), dtype=np.float64)
    np.add.at(counts, (row_index, clean), 1.0)
    totals = counts.sum(axis=0)
    for j in range(n_classes):
        if totals[j] == 0:
            raise NoiseError(f'true class {j} has no examples, its column is undefined')
    row_labels: List[str] = [str(i) for i in range(n_classes)]
    if with_unlabeled_row:
        row_labels.append('unlabeled')
    return TransitionMatrix(
        matrix=counts / totals[None, :],
        row_labels=tuple(row_labels),
        column_labels=tuple(str(j) for j in range(n_classes))
    )


def apply_noise(ds: Dataset, spec: NoiseSpec) -> Tuple[Dataset, NoiseArtifacts]:
    """
    Corrupt a dataset. Clean labels default to the current labels when the
    dataset has none; rows no rule voted on are dropped.
    """
    clean = ds.clean_labels if ds.clean_labels is not None else ds.noisy_labels
    base = Dataset(
        features=ds.features,
        noisy_labels=ds.noisy_labels,
        n_classes=ds.n_classes,
        example_ids=ds.example_ids,
        clean_labels=clean,
        rules=ds.rules,
        categorical=ds.categorical
    )
    if spec.kind == NoiseKind.Ncar:
        noisy = inject_ncar(clean, ds.n_classes, spec.rate, spec.seed, spec.allow_self_flips)
        transition = estimate_transition_matrix(noisy, clean, ds.n_classes, with_unlabeled_row=False)
        logging.info('ncar noise at rate %.3f flipped %d of %d labels', spec.rate, int((noisy != clean).sum()), len(clean))
        return base.with_noisy_labels(noisy), NoiseArtifacts(spec=spec, transition=transition)
    elif spec.kind == NoiseKind.Rules:
        if ds.rules is None:
            raise NoiseError('rule noise requested but the dataset has no rule columns')
        rules = RuleMatrix(ds.rules, ds.n_classes)
        labels, covered = aggregate_weak_labels(rules, spec.seed)
        transition = estimate_transition_matrix(labels, clean, ds.n_classes, with_unlabeled_row=True)
        kept = np.flatnonzero(covered)
        if len(kept) < len(labels):
            logging.info('dropping %d rows no labeling rule voted on', len(labels) - len(kept))
        noisy_ds = base.with_noisy_labels(np.where(covered, labels, clean)).subset(kept)
        return noisy_ds, NoiseArtifacts(spec=spec, transition=transition, rules=rules, kept=kept)
    else:
        raise MatchException(spec.kind)
