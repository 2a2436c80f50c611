from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum, unique
from scipy.spatial.distance import cdist
from scipy.special import softmax
from trustprobe import constants
from trustprobe.base import MatchException, ModelError, derive_seed
from trustprobe.features import FeatureKind, FeatureMap, fit_feature_map_array
from trustprobe.trees import RegressionTree, grow_tree, presort_features
from typing import Any, Dict, FrozenSet, Iterator, List, Optional, Tuple

import logging
import numpy as np


@unique
class Family(Enum):
    # Kernelized linear model: random Fourier features + SGD on the log-loss
    Klm = 'klm'
    # Gradient-boosted regression trees on the softmax log-loss
    Gbt = 'gbt'
    # k nearest neighbors vote
    Knn = 'knn'


FAMILY_LOOKUP: Dict[str, Family] = {f.value: f for f in Family}


def parse_family(name: str) -> Family:
    family = FAMILY_LOOKUP.get(name)
    if family is None:
        raise ModelError(f'unknown model family {name!r}, expected one of {sorted(FAMILY_LOOKUP)}')
    return family


@unique
class Capability(Enum):
    Probabilities = 'probabilities'
    Logits = 'logits'
    InputGradients = 'input gradients'
    ParameterGradients = 'parameter gradients'
    Staging = 'staging'


FAMILY_CAPABILITIES: Dict[Family, FrozenSet[Capability]] = {
    Family.Klm: frozenset(Capability),
    Family.Gbt: frozenset({Capability.Probabilities, Capability.Logits, Capability.InputGradients, Capability.Staging}),
    # Neighbor votes have no logits and no parameters
    Family.Knn: frozenset({Capability.Probabilities, Capability.InputGradients, Capability.Staging})
}


DEFAULT_HYPERPARAMETERS: Dict[Family, Dict[str, Any]] = {
    Family.Klm: {
        'alpha': constants.DEFAULT_KLM_ALPHA,
        'learning_rate': constants.DEFAULT_KLM_LEARNING_RATE,
        'kernel': 'rbf',
        'n_components': constants.DEFAULT_KLM_COMPONENTS,
        'gamma': None,
        'batch_size': constants.DEFAULT_KLM_BATCH_SIZE,
        'max_iter': constants.MAX_ITER,
        'early_stopping': True,
        'patience': constants.EARLY_STOPPING_PATIENCE,
        'tol': constants.EARLY_STOPPING_TOL,
        'holdout_fraction': constants.EARLY_STOPPING_HOLDOUT
    },
    Family.Gbt: {
        'l2': constants.DEFAULT_GBT_L2,
        'learning_rate': constants.DEFAULT_GBT_LEARNING_RATE,
        'max_depth': constants.DEFAULT_GBT_DEPTH,
        'min_samples_leaf': constants.DEFAULT_GBT_MIN_SAMPLES_LEAF,
        'max_iter': constants.MAX_ITER,
        'early_stopping': True,
        'patience': constants.EARLY_STOPPING_PATIENCE,
        'tol': constants.EARLY_STOPPING_TOL,
        'holdout_fraction': constants.EARLY_STOPPING_HOLDOUT
    },
    Family.Knn: {
        'n_neighbors': constants.DEFAULT_KNN_NEIGHBORS,
        'exclude_self': False
    }
}


@dataclass(frozen=True)
class BaseModelSpec:
    family: Family
    seed: int = 0
    hyperparameters: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = set(self.hyperparameters) - set(DEFAULT_HYPERPARAMETERS[self.family])
        if len(unknown) > 0:
            raise ModelError(f'unknown {self.family.value} hyperparameters: {sorted(unknown)}')

    def params(self) -> Dict[str, Any]:
        merged = dict(DEFAULT_HYPERPARAMETERS[self.family])
        merged.update(self.hyperparameters)
        return merged

    def with_hyperparameters(self, **overrides: Any) -> 'BaseModelSpec':
        merged = dict(self.hyperparameters)
        merged.update(overrides)
        return replace(self, hyperparameters=merged)

    def with_seed(self, seed: int) -> 'BaseModelSpec':
        return replace(self, seed=seed)

    def to_json(self) -> Dict[str, Any]:
        return {'family': self.family.value, 'seed': self.seed, 'hyperparameters': self.params()}


class Distribution(metaclass=ABCMeta):
    @abstractmethod
    def sample(self, rng: np.random.Generator) -> float:
        raise NotImplementedError()


@dataclass(frozen=True)
class Uniform(Distribution):
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class LogUniform(Distribution):
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(np.exp(rng.uniform(np.log(self.low), np.log(self.high))))


SEARCH_SPACES: Dict[Family, Dict[str, Distribution]] = {
    Family.Klm: {
        'alpha': LogUniform(1e-5, 1e-1),
        'learning_rate': LogUniform(1e-3, 1.0)
    },
    Family.Gbt: {
        'l2': Uniform(0.0, 100.0),
        'learning_rate': LogUniform(1e-5, 1e-1)
    },
    # No search space is given for k; it stays at its default
    Family.Knn: {}
}


def sample_hyperparameters(family: Family, rng: np.random.Generator) -> Dict[str, float]:
    space = SEARCH_SPACES[family]
    return {name: space[name].sample(rng) for name in sorted(space)}


def log_loss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """ Mean negative log-probability of the labels, probabilities clamped at constants.PROB_CLAMP. """
    if len(labels) == 0:
        raise ModelError('log-loss of an empty set is undefined')
    picked = probabilities[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, constants.PROB_CLAMP))))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class FittedModel(metaclass=ABCMeta):
    """
    A trained, immutable classifier. Every family gives probabilities; the
    remaining capabilities vary and are checked before probing.
    """

    family: Family
    n_classes: int
    n_features: int
    # 1-based index of the training iteration this snapshot stops at
    iteration: int

    @abstractmethod
    def capabilities(self) -> FrozenSet[Capability]:
        raise NotImplementedError()

    @abstractmethod
    def decision_function(self, features: np.ndarray) -> np.ndarray:
        """ Raw per-class scores; logits for families that have them. """
        raise NotImplementedError()

    @abstractmethod
    def to_json(self) -> Dict[str, Any]:
        raise NotImplementedError()

    def _check_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise ModelError(f'model expects {self.n_features} features, got shape {features.shape}')
        return features

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.decision_function(features), axis=1)

    @property
    def learning_rate(self) -> float:
        return 1.0

    def input_gradients(self, features: np.ndarray, classes: np.ndarray) -> np.ndarray:
        """
        n x d matrix of d p_c(x) / dx for each row's class, by central finite
        differences with per-coordinate step h_j = FD_STEP * (1 + |x_j|).
        """
        features = self._check_features(features)
        n, d = features.shape
        out = np.zeros((n, d))
        rows = np.arange(n)
        for j in range(d):
            step = constants.FD_STEP * (1.0 + np.abs(features[:, j]))
            up = features.copy()
            down = features.copy()
            up[:, j] += step
            down[:, j] -= step
            p_up = self.predict_proba(up)[rows, classes]
            p_down = self.predict_proba(down)[rows, classes]
            out[:, j] = (p_up - p_down) / (2.0 * step)
        return out

    def parameter_gradients(self, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        raise ModelError(f'{self.family.value} models expose no parameter gradients')


class EarlyStopping:
    """ Signals a stop once the holdout loss fails to improve by `tol` for `patience` iterations in a row. """

    def __init__(self, patience: int, tol: float) -> None:
        self._patience = patience
        self._tol = tol
        self._best = np.inf
        self._stale = 0

    def update(self, loss: float) -> bool:
        if loss < self._best - self._tol:
            self._best = loss
            self._stale = 0
        else:
            self._stale += 1
        return self._stale >= self._patience


def _check_training_data(features: np.ndarray, labels: np.ndarray, n_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ModelError(f'cannot fit on an empty feature matrix of shape {features.shape}')
    if labels.shape != (features.shape[0],):
        raise ModelError(f'expected {features.shape[0]} labels, got shape {labels.shape}')
    if not np.all(np.isfinite(features)):
        raise ModelError('features contain NaN or Inf')
    if np.any((labels < 0) | (labels >= n_classes)):
        raise ModelError(f'labels must lie in [0, {n_classes})')
    if len(np.unique(labels)) < 2:
        raise ModelError(f'cannot fit a classifier on a single class ({int(labels[0])})')
    return features, labels


def _holdout_split(n: int, params: Dict[str, Any], seed: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """ Deterministic early-stopping holdout carved from the rows being fit. """
    if not params.get('early_stopping', False) or n < constants.EARLY_STOPPING_MIN_ROWS:
        return np.arange(n), None
    rng = np.random.default_rng(derive_seed(seed, 'holdout'))
    perm = rng.permutation(n)
    n_holdout = max(1, int(round(params['holdout_fraction'] * n)))
    return np.sort(perm[n_holdout:]), np.sort(perm[:n_holdout])


def _resolve_n_classes(labels: np.ndarray, n_classes: Optional[int]) -> int:
    return int(labels.max()) + 1 if n_classes is None else n_classes


@dataclass(frozen=True, eq=False)
class LinearModel(FittedModel):
    """ Multinomial softmax regression over a (possibly random Fourier) feature map. """

    feature_map: FeatureMap
    # K x D weights and K biases
    weights: np.ndarray
    bias: np.ndarray
    alpha: float
    step_size: float
    iteration: int
    holdout_losses: Tuple[float, ...] = ()
    family: Family = Family.Klm

    @property
    def n_classes(self) -> int:  # type: ignore
        return int(self.weights.shape[0])

    @property
    def n_features(self) -> int:  # type: ignore
        return self.feature_map.input_dim

    @property
    def learning_rate(self) -> float:
        return self.step_size

    def capabilities(self) -> FrozenSet[Capability]:
        return FAMILY_CAPABILITIES[self.family]

    def embed(self, features: np.ndarray) -> np.ndarray:
        return self.feature_map.transform(self._check_features(features))

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        return self.embed(features) @ self.weights.T + self.bias

    def input_gradients(self, features: np.ndarray, classes: np.ndarray) -> np.ndarray:
        """ Analytic d p_c(x) / dx, through the cosine features when present. """
        features = self._check_features(features)
        probs = self.predict_proba(features)
        rows = np.arange(len(features))
        p_c = probs[rows, classes]
        # d p_c / d z_k = p_c (1[k = c] - p_k)
        dz = -p_c[:, None] * probs
        dz[rows, classes] += p_c
        d_embed = dz @ self.weights
        if self.feature_map.kind == FeatureKind.Identity:
            return d_embed
        elif self.feature_map.kind == FeatureKind.RandomFourier:
            return (d_embed * self.feature_map.jacobian_factor(features)) @ self.feature_map.omega.T
        else:
            return super().input_gradients(features, classes)

    def flat_parameters(self) -> np.ndarray:
        """ Row-major [W | b], matching the layout of parameter_gradients. """
        return np.concatenate([self.weights, self.bias[:, None]], axis=1).ravel()

    def with_flat_parameters(self, theta: np.ndarray) -> 'LinearModel':
        block = np.asarray(theta, dtype=np.float64).reshape(self.n_classes, -1)
        return replace(self, weights=block[:, :-1].copy(), bias=block[:, -1].copy())

    def parameter_gradients(self, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """
        n x K(D+1) per-example gradients of -log p_y(x) + alpha/2 ||W||^2 with
        respect to [W | b], flattened row-major.
        """
        embedded = self.embed(features)
        probs = softmax(embedded @ self.weights.T + self.bias, axis=1)
        residual = probs - one_hot(labels, self.n_classes)
        augmented = np.concatenate([embedded, np.ones((len(embedded), 1))], axis=1)
        grads = residual[:, :, None] * augmented[:, None, :]
        penalty = np.concatenate([self.alpha * self.weights, np.zeros((self.n_classes, 1))], axis=1)
        grads = grads + penalty[None, :, :]
        return grads.reshape(len(embedded), -1)

    def example_losses(self, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """ Per-example regularized loss, the function parameter_gradients differentiates. """
        probs = self.predict_proba(features)
        picked = np.maximum(probs[np.arange(len(labels)), labels], constants.PROB_CLAMP)
        return -np.log(picked) + 0.5 * self.alpha * float(np.sum(self.weights ** 2))

    def to_json(self) -> Dict[str, Any]:
        return {
            'format': 'trustprobe.model',
            'version': constants.MODEL_FORMAT_VERSION,
            'family': self.family.value,
            'feature_map': self.feature_map.to_json(),
            'weights': self.weights.tolist(),
            'bias': self.bias.tolist(),
            'alpha': self.alpha,
            'learning_rate': self.step_size,
            'iteration': self.iteration,
            'holdout_losses': list(self.holdout_losses)
        }


@dataclass(frozen=True, eq=False)
class BoostedTrees(FittedModel):
    """
    Softmax gradient boosting. A model that trained T rounds can be viewed at
    any prefix `n_rounds <= T` without copying trees.
    """

    init_scores: np.ndarray
    # rounds x classes
    trees: Tuple[Tuple[RegressionTree, ...], ...]
    step_size: float
    l2: float
    n_features_in: int
    n_rounds: int
    holdout_losses: Tuple[float, ...] = ()
    family: Family = Family.Gbt

    @property
    def n_classes(self) -> int:  # type: ignore
        return len(self.init_scores)

    @property
    def n_features(self) -> int:  # type: ignore
        return self.n_features_in

    @property
    def iteration(self) -> int:  # type: ignore
        return self.n_rounds

    @property
    def learning_rate(self) -> float:
        return self.step_size

    @property
    def n_trees(self) -> int:
        return sum(len(r) for r in self.trees[:self.n_rounds])

    def capabilities(self) -> FrozenSet[Capability]:
        return FAMILY_CAPABILITIES[self.family]

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        features = self._check_features(features)
        scores = np.tile(self.init_scores, (features.shape[0], 1))
        for round_trees in self.trees[:self.n_rounds]:
            for c, tree in enumerate(round_trees):
                scores[:, c] += self.step_size * tree.predict(features)
        return scores

    def prefix(self, n_rounds: int) -> 'BoostedTrees':
        if not 0 <= n_rounds <= len(self.trees):
            raise ModelError(f'prefix of {n_rounds} rounds out of range [0, {len(self.trees)}]')
        return replace(self, n_rounds=n_rounds)

    def to_json(self) -> Dict[str, Any]:
        return {
            'format': 'trustprobe.model',
            'version': constants.MODEL_FORMAT_VERSION,
            'family': self.family.value,
            'init_scores': self.init_scores.tolist(),
            'trees': [[t.to_json() for t in r] for r in self.trees[:self.n_rounds]],
            'learning_rate': self.step_size,
            'l2': self.l2,
            'n_features': self.n_features_in,
            'holdout_losses': list(self.holdout_losses)
        }


def nearest_indices(distances: np.ndarray, k: int) -> np.ndarray:
    """
    Column indices of the k smallest entries per row, ordered by distance with
    ties broken toward the lower index.
    """
    n, n_train = distances.shape
    k = min(k, n_train)
    if k == n_train:
        return np.argsort(distances, axis=1, kind='stable')
    candidates = np.argpartition(distances, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(distances, candidates, axis=1).max(axis=1)
    # Rows where more than k entries reach the k-th distance need the full ordering
    clear = (distances <= kth[:, None]).sum(axis=1) == k
    out = np.empty((n, k), dtype=np.int64)
    if clear.any():
        cand = np.sort(candidates[clear], axis=1)
        order = np.argsort(np.take_along_axis(distances[clear], cand, axis=1), axis=1, kind='stable')
        out[clear] = np.take_along_axis(cand, order, axis=1)
    if (~clear).any():
        out[~clear] = np.argsort(distances[~clear], axis=1, kind='stable')[:, :k]
    return out


# Rows of queries handled per distance block
_KNN_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class NearestNeighbors(FittedModel):
    train_features: np.ndarray
    train_labels: np.ndarray
    n_classes_in: int
    n_neighbors: int
    exclude_self: bool = False
    family: Family = Family.Knn

    @property
    def n_classes(self) -> int:  # type: ignore
        return self.n_classes_in

    @property
    def n_features(self) -> int:  # type: ignore
        return int(self.train_features.shape[1])

    @property
    def iteration(self) -> int:  # type: ignore
        return self.n_neighbors

    def capabilities(self) -> FrozenSet[Capability]:
        return FAMILY_CAPABILITIES[self.family]

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """ Fraction of the k nearest (Euclidean) training labels per class. """
        features = self._check_features(features)
        out = np.zeros((features.shape[0], self.n_classes))
        for start in range(0, features.shape[0], _KNN_BLOCK):
            block = features[start:start + _KNN_BLOCK]
            distances = cdist(block, self.train_features)
            if self.exclude_self:
                # An exact match is taken to be the query itself
                distances[distances == 0.0] = np.inf
            neighbors = nearest_indices(distances, self.n_neighbors)
            usable = np.isfinite(np.take_along_axis(distances, neighbors, axis=1))
            votes = np.zeros((len(block), self.n_classes))
            rows = np.repeat(np.arange(len(block)), neighbors.shape[1])
            np.add.at(votes, (rows, self.train_labels[neighbors].ravel()), usable.ravel().astype(np.float64))
            totals = votes.sum(axis=1, keepdims=True)
            uniform = np.full_like(votes, 1.0 / self.n_classes)
            out[start:start + len(block)] = np.where(totals > 0, votes / np.maximum(totals, 1.0), uniform)
        return out

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        return self.predict_proba(features)

    def to_json(self) -> Dict[str, Any]:
        return {
            'format': 'trustprobe.model',
            'version': constants.MODEL_FORMAT_VERSION,
            'family': self.family.value,
            'train_features': self.train_features.tolist(),
            'train_labels': self.train_labels.tolist(),
            'n_classes': self.n_classes_in,
            'n_neighbors': self.n_neighbors,
            'exclude_self': self.exclude_self
        }


def _stage_klm(params: Dict[str, Any], features: np.ndarray, labels: np.ndarray, n_classes: int, seed: int) -> Iterator[LinearModel]:
    train, holdout = _holdout_split(len(labels), params, seed)
    x_train, y_train = features[train], labels[train]
    kernel = params['kernel']
    if kernel == 'rbf':
        fmap = fit_feature_map_array(
            x_train, FeatureKind.RandomFourier, derive_seed(seed, 'fourier'),
            n_components=int(params['n_components']), gamma=params['gamma']
        )
    elif kernel == 'linear':
        fmap = fit_feature_map_array(x_train, FeatureKind.Identity, seed)
    else:
        raise ModelError(f'unknown klm kernel {kernel!r}, expected rbf or linear')
    embedded = fmap.transform(x_train)
    targets = one_hot(y_train, n_classes)
    alpha = float(params['alpha'])
    step = float(params['learning_rate'])
    batch = max(1, int(params['batch_size']))
    weights = np.zeros((n_classes, embedded.shape[1]))
    bias = np.zeros(n_classes)
    rng = np.random.default_rng(derive_seed(seed, 'shuffle'))
    stopper = EarlyStopping(int(params['patience']), float(params['tol']))
    losses: List[float] = []
    for epoch in range(1, int(params['max_iter']) + 1):
        order = rng.permutation(len(y_train))
        for start in range(0, len(order), batch):
            rows = order[start:start + batch]
            probs = softmax(embedded[rows] @ weights.T + bias, axis=1)
            residual = (probs - targets[rows]) / len(rows)
            # Explicit step on the loss, implicit (proximal) step on the l2 penalty
            weights = (weights - step * (residual.T @ embedded[rows])) / (1.0 + step * alpha)
            bias = bias - step * residual.sum(axis=0)
        snapshot = LinearModel(
            feature_map=fmap,
            weights=weights.copy(),
            bias=bias.copy(),
            alpha=alpha,
            step_size=step,
            iteration=epoch,
            holdout_losses=tuple(losses)
        )
        stop = False
        if holdout is not None:
            loss = log_loss(snapshot.predict_proba(features[holdout]), labels[holdout])
            losses.append(loss)
            snapshot = replace(snapshot, holdout_losses=tuple(losses))
            stop = stopper.update(loss)
        yield snapshot
        if stop:
            logging.debug('klm early stop after %d epochs', epoch)
            break


def _fit_gbt(params: Dict[str, Any], features: np.ndarray, labels: np.ndarray, n_classes: int, seed: int) -> BoostedTrees:
    train, holdout = _holdout_split(len(labels), params, seed)
    x_train, y_train = features[train], labels[train]
    # Priors come from every row being fit, holdout included
    priors = np.bincount(labels, minlength=n_classes) / len(labels)
    init = np.log(np.maximum(priors, constants.PROB_CLAMP))
    targets = one_hot(y_train, n_classes)
    step = float(params['learning_rate'])
    l2 = float(params['l2'])
    depth = int(params['max_depth'])
    min_leaf = int(params['min_samples_leaf'])
    presort = presort_features(x_train)
    scores = np.tile(init, (len(y_train), 1))
    holdout_scores = None if holdout is None else np.tile(init, (len(holdout), 1))
    stopper = EarlyStopping(int(params['patience']), float(params['tol']))
    rounds: List[Tuple[RegressionTree, ...]] = []
    losses: List[float] = []
    for it in range(1, int(params['max_iter']) + 1):
        probs = softmax(scores, axis=1)
        round_trees = []
        for c in range(n_classes):
            grad = probs[:, c] - targets[:, c]
            hess = np.maximum(probs[:, c] * (1.0 - probs[:, c]), 1e-16)
            round_trees.append(grow_tree(x_train, grad, hess, presort, depth, l2, min_leaf))
        for c, tree in enumerate(round_trees):
            scores[:, c] += step * tree.predict(x_train)
        rounds.append(tuple(round_trees))
        if holdout is not None and holdout_scores is not None:
            for c, tree in enumerate(round_trees):
                holdout_scores[:, c] += step * tree.predict(features[holdout])
            loss = log_loss(softmax(holdout_scores, axis=1), labels[holdout])
            losses.append(loss)
            if stopper.update(loss):
                logging.debug('gbt early stop after %d rounds', it)
                break
    return BoostedTrees(
        init_scores=init,
        trees=tuple(rounds),
        step_size=step,
        l2=l2,
        n_features_in=features.shape[1],
        n_rounds=len(rounds),
        holdout_losses=tuple(losses)
    )


def staged_fit(
    spec: BaseModelSpec,
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: Optional[int] = None
) -> Iterator[FittedModel]:
    """
    Lazily yield one snapshot per training iteration: an epoch for klm, a
    boosting round for gbt, a neighborhood size k = 1..k_max for knn. The last
    snapshot is the model `fit` returns.
    """
    n_classes = _resolve_n_classes(np.asarray(labels), n_classes)
    features, labels = _check_training_data(features, labels, n_classes)
    params = spec.params()
    if spec.family == Family.Klm:
        yield from _stage_klm(params, features, labels, n_classes, spec.seed)
    elif spec.family == Family.Gbt:
        # Trees are trained at once, then dispatched as prefixes
        full = _fit_gbt(params, features, labels, n_classes, spec.seed)
        for t in range(1, full.n_rounds + 1):
            yield full.prefix(t)
    elif spec.family == Family.Knn:
        for k in range(1, int(params['n_neighbors']) + 1):
            yield _make_knn(params, features, labels, n_classes, k)
    else:
        raise MatchException(spec.family)


def _make_knn(params: Dict[str, Any], features: np.ndarray, labels: np.ndarray, n_classes: int, k: int) -> NearestNeighbors:
    train_features = features.copy()
    train_features.flags.writeable = False
    train_labels = labels.copy()
    train_labels.flags.writeable = False
    return NearestNeighbors(
        train_features=train_features,
        train_labels=train_labels,
        n_classes_in=n_classes,
        n_neighbors=k,
        exclude_self=bool(params['exclude_self'])
    )


def fit(
    spec: BaseModelSpec,
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: Optional[int] = None
) -> FittedModel:
    n_classes = _resolve_n_classes(np.asarray(labels), n_classes)
    if spec.family == Family.Gbt:
        features, labels = _check_training_data(features, labels, n_classes)
        return _fit_gbt(spec.params(), features, labels, n_classes, spec.seed)
    elif spec.family == Family.Knn:
        features, labels = _check_training_data(features, labels, n_classes)
        params = spec.params()
        return _make_knn(params, features, labels, n_classes, int(params['n_neighbors']))
    last: Optional[FittedModel] = None
    for last in staged_fit(spec, features, labels, n_classes):
        pass
    if last is None:
        raise ModelError(f'{spec.family.value} produced no iterations (max_iter must be positive)')
    return last


def predict_proba(model: FittedModel, features: np.ndarray) -> np.ndarray:
    return model.predict_proba(features)


def input_gradient(model: FittedModel, x: np.ndarray, c: int) -> np.ndarray:
    """ d p_c(x) / dx for a single input vector. """
    return model.input_gradients(np.asarray(x, dtype=np.float64)[None, :], np.array([c]))[0]


def parameter_gradient(model: FittedModel, x: np.ndarray, y: int) -> np.ndarray:
    if Capability.ParameterGradients not in model.capabilities():
        raise ModelError(f'{model.family.value} models expose no parameter gradients')
    return model.parameter_gradients(np.asarray(x, dtype=np.float64)[None, :], np.array([y]))[0]


def model_from_json(doc: Dict[str, Any]) -> FittedModel:
    if doc.get('format') != 'trustprobe.model':
        raise ModelError('not a trustprobe model document')
    if doc.get('version') != constants.MODEL_FORMAT_VERSION:
        raise ModelError(f'unsupported model document version {doc.get("version")}')
    family = parse_family(doc['family'])
    if family == Family.Klm:
        return LinearModel(
            feature_map=FeatureMap.from_json(doc['feature_map']),
            weights=np.asarray(doc['weights'], dtype=np.float64),
            bias=np.asarray(doc['bias'], dtype=np.float64),
            alpha=float(doc['alpha']),
            step_size=float(doc['learning_rate']),
            iteration=int(doc['iteration']),
            holdout_losses=tuple(doc['holdout_losses'])
        )
    elif family == Family.Gbt:
        trees = tuple(tuple(RegressionTree.from_json(t) for t in r) for r in doc['trees'])
        return BoostedTrees(
            init_scores=np.asarray(doc['init_scores'], dtype=np.float64),
            trees=trees,
            step_size=float(doc['learning_rate']),
            l2=float(doc['l2']),
            n_features_in=int(doc['n_features']),
            n_rounds=len(trees),
            holdout_losses=tuple(doc['holdout_losses'])
        )
    elif family == Family.Knn:
        return NearestNeighbors(
            train_features=np.asarray(doc['train_features'], dtype=np.float64),
            train_labels=np.asarray(doc['train_labels'], dtype=np.int64),
            n_classes_in=int(doc['n_classes']),
            n_neighbors=int(doc['n_neighbors']),
            exclude_self=bool(doc['exclude_self'])
        )
    else:
        raise MatchException(family)


def model_to_json(model: FittedModel) -> Dict[str, Any]:
    return model.to_json()
