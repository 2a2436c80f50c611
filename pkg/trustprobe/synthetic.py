from trustprobe import constants
from trustprobe.base import DatasetError, derive_seed
from trustprobe.dataset import Dataset
from trustprobe.noise import RuleMatrix, aggregate_weak_labels
from typing import Optional, Sequence

import numpy as np


def blob_centers(n_classes: int, separation: float) -> np.ndarray:
    """ Class centers evenly spaced on a circle of radius `separation` in the plane. """
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    return separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_blobs(
    n: int,
    n_classes: int,
    separation: float,
    seed: int,
    priors: Optional[Sequence[float]] = None
) -> Dataset:
    """ Unit-variance 2-D Gaussian blobs; clean labels equal the observed labels. """
    if n_classes < 2:
        raise DatasetError(f'blobs need at least 2 classes, got {n_classes}')
    rng = np.random.default_rng(seed)
    if priors is None:
        labels = np.arange(n) % n_classes
        labels = labels[rng.permutation(n)]
    else:
        p = np.asarray(priors, dtype=np.float64)
        if len(p) != n_classes or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DatasetError(f'priors must be {n_classes} non-negative numbers summing to 1')
        labels = rng.choice(n_classes, size=n, p=p)
    centers = blob_centers(n_classes, separation)
    features = centers[labels] + rng.normal(size=(n, 2))
    return Dataset(
        features=features,
        noisy_labels=labels,
        n_classes=n_classes,
        example_ids=np.array([f'blob-{i}' for i in range(n)]),
        clean_labels=labels
    )


def make_labeling_rules(
    features: np.ndarray,
    n_classes: int,
    n_rules: int,
    seed: int,
    max_rotation: float = 0.6,
    abstain_rate: float = 0.1
) -> RuleMatrix:
    """
    Imperfect rules over 2-D inputs. Rule r votes for class r mod K inside an
    angular wedge of width 2*pi/K around that class's direction, rotated by a
    random angle up to `max_rotation` radians, so each rule mislabels the
    neighboring class near one boundary. Rules also abstain at random.
    """
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    angles = np.arctan2(features[:, 1], features[:, 0])
    half_width = np.pi / n_classes
    votes = np.full((len(features), n_rules), constants.ABSTAIN, dtype=np.int64)
    for r in range(n_rules):
        target = r % n_classes
        rotation = rng.uniform(-max_rotation, max_rotation)
        center = 2.0 * np.pi * target / n_classes + rotation
        # Signed angular distance wrapped to [-pi, pi)
        delta = (angles - center + np.pi) % (2.0 * np.pi) - np.pi
        fires = (np.abs(delta) <= half_width) & (rng.random(len(features)) >= abstain_rate)
        votes[fires, r] = target
    return RuleMatrix(votes=votes, n_classes=n_classes)


def make_nnar_task(
    n: int,
    n_classes: int,
    n_rules: int,
    seed: int,
    separation: float = 3.0,
    priors: Optional[Sequence[float]] = None
) -> Dataset:
    """
    Blobs whose observed labels come from a majority vote over imperfect
    labeling rules. Rows no rule voted on are dropped.
    """
    blobs = make_blobs(n, n_classes, separation, seed, priors)
    rules = make_labeling_rules(blobs.features, n_classes, n_rules, derive_seed(seed, 'rules'))
    noisy, covered = aggregate_weak_labels(rules, derive_seed(seed, 'votes'))
    kept = np.flatnonzero(covered)
    clean = blobs.require_clean_labels()
    return Dataset(
        features=blobs.features[kept],
        noisy_labels=noisy[kept],
        n_classes=n_classes,
        example_ids=blobs.example_ids[kept],
        clean_labels=clean[kept],
        rules=rules.votes[kept]
    )
