from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np


# Gains at or below this are not worth a split
MIN_SPLIT_GAIN = 1e-12


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """
    Binary axis-aligned tree stored as parallel node arrays. Leaves have
    feature == -1; internal nodes send x[feature] <= threshold to the left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, features: np.ndarray) -> np.ndarray:
        node = np.zeros(features.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            rows = np.flatnonzero(feat >= 0)
            if len(rows) == 0:
                break
            current = node[rows]
            go_left = features[rows, feat[rows]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
        return self.value[node]

    def to_json(self) -> Dict[str, Any]:
        return {
            'feature': self.feature.tolist(),
            'threshold': self.threshold.tolist(),
            'left': self.left.tolist(),
            'right': self.right.tolist(),
            'value': self.value.tolist()
        }

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> 'RegressionTree':
        return cls(
            feature=np.asarray(doc['feature'], dtype=np.int64),
            threshold=np.asarray(doc['threshold'], dtype=np.float64),
            left=np.asarray(doc['left'], dtype=np.int64),
            right=np.asarray(doc['right'], dtype=np.int64),
            value=np.asarray(doc['value'], dtype=np.float64)
        )


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


def leaf_value(grad_sum: float, hess_sum: float, l2: float) -> float:
    return -grad_sum / (hess_sum + l2)


def best_split(
    features: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    presort: np.ndarray,
    members: np.ndarray,
    l2: float,
    min_samples_leaf: int
) -> Optional[Split]:
    """
    Exact search over every feature and every boundary between distinct values
    of the rows in `members` (a boolean mask). Ties go to the lowest feature,
    then the lowest threshold.
    """
    grad_total = float(grad[members].sum())
    hess_total = float(hess[members].sum())
    parent_score = grad_total * grad_total / (hess_total + l2)
    best: Optional[Split] = None
    best_gain = MIN_SPLIT_GAIN
    for f in range(features.shape[1]):
        order = presort[:, f]
        idx = order[members[order]]
        count = len(idx)
        if count < 2 * min_samples_leaf:
            continue
        xs = features[idx, f]
        grad_left = np.cumsum(grad[idx])[:-1]
        hess_left = np.cumsum(hess[idx])[:-1]
        count_left = np.arange(1, count)
        valid = (xs[:-1] < xs[1:]) & (count_left >= min_samples_leaf) & (count - count_left >= min_samples_leaf)
        if not valid.any():
            continue
        grad_right = grad_total - grad_left
        hess_right = hess_total - hess_left
        gain = grad_left ** 2 / (hess_left + l2) + grad_right ** 2 / (hess_right + l2) - parent_score
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            threshold = 0.5 * (xs[i] + xs[i + 1])
            if not xs[i] <= threshold < xs[i + 1]:
                threshold = float(xs[i])
            best = Split(feature=f, threshold=float(threshold), gain=float(gain[i]))
            best_gain = float(gain[i])
    return best


class _TreeBuilder:
    def __init__(
        self,
        features: np.ndarray,
        grad: np.ndarray,
        hess: np.ndarray,
        presort: np.ndarray,
        max_depth: int,
        l2: float,
        min_samples_leaf: int
    ) -> None:
        self._features = features
        self._grad = grad
        self._hess = hess
        self._presort = presort
        self._max_depth = max_depth
        self._l2 = l2
        self._min_samples_leaf = min_samples_leaf
        self._feature: List[int] = []
        self._threshold: List[float] = []
        self._left: List[int] = []
        self._right: List[int] = []
        self._value: List[float] = []

    def _add_node(self, members: np.ndarray) -> int:
        node = len(self._feature)
        value = leaf_value(float(self._grad[members].sum()), float(self._hess[members].sum()), self._l2)
        self._feature.append(-1)
        self._threshold.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._value.append(value)
        return node

    def grow(self, members: np.ndarray, depth: int) -> int:
        node = self._add_node(members)
        if depth >= self._max_depth:
            return node
        split = best_split(
            self._features, self._grad, self._hess, self._presort,
            members, self._l2, self._min_samples_leaf
        )
        if split is None:
            return node
        goes_left = self._features[:, split.feature] <= split.threshold
        self._feature[node] = split.feature
        self._threshold[node] = split.threshold
        self._left[node] = self.grow(members & goes_left, depth + 1)
        self._right[node] = self.grow(members & ~goes_left, depth + 1)
        return node

    def build(self) -> RegressionTree:
        return RegressionTree(
            feature=np.array(self._feature, dtype=np.int64),
            threshold=np.array(self._threshold, dtype=np.float64),
            left=np.array(self._left, dtype=np.int64),
            right=np.array(self._right, dtype=np.int64),
            value=np.array(self._value, dtype=np.float64)
        )


def grow_tree(
    features: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    presort: np.ndarray,
    max_depth: int,
    l2: float,
    min_samples_leaf: int = 1
) -> RegressionTree:
    """
    Fit one second-order regression tree: leaves hold -G / (H + l2) over their
    rows. `presort` is `np.argsort(features, axis=0, kind='stable')`, computed
    once per boosting run.
    """
    builder = _TreeBuilder(features, grad, hess, presort, max_depth, l2, min_samples_leaf)
    builder.grow(np.ones(features.shape[0], dtype=bool), 0)
    return builder.build()


def presort_features(features: np.ndarray) -> np.ndarray:
    return np.argsort(features, axis=0, kind='stable')
