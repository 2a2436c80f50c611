from dataclasses import dataclass, field
from enum import Enum, unique
from trustprobe import constants
from trustprobe.base import DatasetError, MatchException
from trustprobe.dataset import Dataset
from typing import Any, Dict, Optional, Sequence, Tuple

import json
import numpy as np


@unique
class FeatureKind(Enum):
    Identity = 'identity'
    Standardize = 'standardize'
    OneHotStandardize = 'one-hot+standardize'
    RandomFourier = 'random-fourier'


FEATURE_KIND_LOOKUP: Dict[str, FeatureKind] = {k.value: k for k in FeatureKind}


def parse_feature_kind(name: str) -> FeatureKind:
    kind = FEATURE_KIND_LOOKUP.get(name)
    if kind is None:
        raise DatasetError(f'unknown feature map {name!r}, expected one of {sorted(FEATURE_KIND_LOOKUP)}')
    return kind


def rbf_bandwidth(features: np.ndarray) -> float:
    """
    Scale heuristic gamma = 1 / (d * var(X)) with var(X) the variance pooled over
    every entry of the matrix. Falls back to 1 / d for constant inputs.
    """
    d = max(features.shape[1], 1)
    variance = float(np.var(features)) if features.size > 0 else 0.0
    if variance <= 0.0:
        return 1.0 / d
    return 1.0 / (d * variance)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """
    A fitted, immutable input transformation. Only the fields relevant to `kind`
    are populated; the rest stay empty.
    """

    kind: FeatureKind
    input_dim: int
    seed: int
    means: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # Columns (by input index) encoded one-hot, with their sorted category values
    categorical: Tuple[int, ...] = ()
    categories: Tuple[Tuple[float, ...], ...] = ()
    # Random Fourier parameters: omega is d x D, phase has length D
    omega: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    phase: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: float = 0.0
    n_components: int = 0

    @property
    def output_dim(self) -> int:
        if self.kind == FeatureKind.Identity:
            return self.input_dim
        elif self.kind == FeatureKind.Standardize:
            return self.input_dim
        elif self.kind == FeatureKind.OneHotStandardize:
            n_numeric = self.input_dim - len(self.categorical)
            return n_numeric + sum(len(c) for c in self.categories)
        elif self.kind == FeatureKind.RandomFourier:
            return self.n_components
        else:
            raise MatchException(self.kind)

    def _numeric_columns(self) -> np.ndarray:
        return np.array([j for j in range(self.input_dim) if j not in self.categorical], dtype=np.int64)

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise DatasetError(f'feature map expects {self.input_dim} columns, got shape {features.shape}')
        if self.kind == FeatureKind.Identity:
            return features.copy()
        elif self.kind == FeatureKind.Standardize:
            return (features - self.means) / self.scales
        elif self.kind == FeatureKind.OneHotStandardize:
            numeric = features[:, self._numeric_columns()]
            blocks = [(numeric - self.means) / self.scales]
            for column, values in zip(self.categorical, self.categories):
                # Unseen categories match no value and encode to all zeros
                blocks.append((features[:, [column]] == np.asarray(values)[None, :]).astype(np.float64))
            return np.concatenate(blocks, axis=1)
        elif self.kind == FeatureKind.RandomFourier:
            return np.sqrt(2.0 / self.n_components) * np.cos(features @ self.omega + self.phase)
        else:
            raise MatchException(self.kind)

    def jacobian_factor(self, features: np.ndarray) -> np.ndarray:
        """
        For random Fourier maps, the n x D matrix of d(phi_j)/d(omega_j . x), so
        that d(phi_j)/dx = factor_j * omega[:, j].
        """
        if self.kind != FeatureKind.RandomFourier:
            raise DatasetError(f'no cosine features in a {self.kind.value} map')
        return -np.sqrt(2.0 / self.n_components) * np.sin(features @ self.omega + self.phase)

    def to_json(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'input_dim': self.input_dim,
            'seed': self.seed,
            'means': self.means.tolist(),
            'scales': self.scales.tolist(),
            'categorical': list(self.categorical),
            'categories': [list(c) for c in self.categories],
            'omega': self.omega.tolist(),
            'phase': self.phase.tolist(),
            'gamma': self.gamma,
            'n_components': self.n_components
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> 'FeatureMap':
        input_dim = int(doc['input_dim'])
        omega = np.asarray(doc['omega'], dtype=np.float64)
        if omega.size == 0:
            omega = np.zeros((0, 0))
        return cls(
            kind=parse_feature_kind(doc['kind']),
            input_dim=input_dim,
            seed=int(doc['seed']),
            means=np.asarray(doc['means'], dtype=np.float64),
            scales=np.asarray(doc['scales'], dtype=np.float64),
            categorical=tuple(int(c) for c in doc['categorical']),
            categories=tuple(tuple(float(v) for v in c) for c in doc['categories']),
            omega=omega,
            phase=np.asarray(doc['phase'], dtype=np.float64),
            gamma=float(doc['gamma']),
            n_components=int(doc['n_components'])
        )


def _moments(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    means = features.mean(axis=0) if features.shape[0] > 0 else np.zeros(features.shape[1])
    scales = features.std(axis=0) if features.shape[0] > 0 else np.ones(features.shape[1])
    # Constant columns keep their slot and transform to zeros
    scales = np.where(scales > 0.0, scales, 1.0)
    return means, scales


def fit_feature_map_array(
    features: np.ndarray,
    kind: FeatureKind,
    seed: int,
    categorical: Sequence[int] = (),
    n_components: int = constants.DEFAULT_KLM_COMPONENTS,
    gamma: Optional[float] = None
) -> FeatureMap:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DatasetError(f'features must be a matrix, got shape {features.shape}')
    if not np.all(np.isfinite(features)):
        raise DatasetError('cannot fit a feature map on non-finite features')
    d = features.shape[1]
    if kind == FeatureKind.Identity:
        return FeatureMap(kind=kind, input_dim=d, seed=seed)
    elif kind == FeatureKind.Standardize:
        means, scales = _moments(features)
        return FeatureMap(kind=kind, input_dim=d, seed=seed, means=means, scales=scales)
    elif kind == FeatureKind.OneHotStandardize:
        cat = tuple(sorted(int(c) for c in categorical))
        numeric = [j for j in range(d) if j not in cat]
        means, scales = _moments(features[:, numeric])
        categories = tuple(tuple(float(v) for v in np.unique(features[:, c])) for c in cat)
        return FeatureMap(
            kind=kind,
            input_dim=d,
            seed=seed,
            means=means,
            scales=scales,
            categorical=cat,
            categories=categories
        )
    elif kind == FeatureKind.RandomFourier:
        if n_components <= 0:
            raise DatasetError(f'random Fourier features need a positive output dimension, got {n_components}')
        bandwidth = rbf_bandwidth(features) if gamma is None else float(gamma)
        rng = np.random.default_rng(seed)
        omega = rng.normal(scale=np.sqrt(2.0 * bandwidth), size=(d, n_components))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n_components)
        return FeatureMap(
            kind=kind,
            input_dim=d,
            seed=seed,
            omega=omega,
            phase=phase,
            gamma=bandwidth,
            n_components=n_components
        )
    else:
        raise MatchException(kind)


def fit_feature_map(
    train: Dataset,
    kind: FeatureKind,
    seed: int,
    n_components: int = constants.DEFAULT_KLM_COMPONENTS,
    gamma: Optional[float] = None
) -> FeatureMap:
    """ Fit on the given (training) rows only; categorical columns come from the dataset. """
    return fit_feature_map_array(
        train.features,
        kind,
        seed,
        categorical=train.categorical,
        n_components=n_components,
        gamma=gamma
    )


def apply_feature_map(fmap: FeatureMap, ds: Dataset) -> Dataset:
    return ds.with_features(fmap.transform(ds.features))
