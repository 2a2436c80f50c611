from abc import ABCMeta, abstractmethod
from dataclasses import dataclass
from enum import Enum, unique
from scipy.linalg import solve
from scipy.special import softmax
from trustprobe import constants
from trustprobe.base import ProbeError
from trustprobe.models import Capability, FittedModel, LinearModel, one_hot
from typing import Callable, Dict, FrozenSet, Optional

import numpy as np


@unique
class Orientation(Enum):
    # Higher means more trusted
    Trust = 'trust'
    # Higher means more suspicious
    Suspicion = 'suspicion'
    # No direction on its own; only spread across members means anything
    Signed = 'signed'


@dataclass(frozen=True, eq=False)
class ProbeMatrix:
    values: np.ndarray
    probe_name: str
    model_index: int = 0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ProbeError(f'probe {self.probe_name} produced shape {values.shape}, expected a matrix')
        if not np.all(np.isfinite(values)):
            raise ProbeError(f'probe {self.probe_name} produced non-finite values for model {self.model_index}')
        object.__setattr__(self, 'values', values)

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


class Probe(metaclass=ABCMeta):
    """
    Scores every row of (X, y) by measuring a fitted model. Subclasses only
    compute values; capability checks and shape checks happen in __call__.
    """

    name: str = ''
    orientation: Orientation = Orientation.Trust
    requires: FrozenSet[Capability] = frozenset({Capability.Probabilities})
    # Values are always 0 or 1
    binary: bool = False

    def width(self, n_features: int) -> int:
        return 1

    @abstractmethod
    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        raise NotImplementedError()

    def values_with_train_rows(
        self,
        model: FittedModel,
        features: np.ndarray,
        labels: np.ndarray,
        train_rows: Optional[np.ndarray]
    ) -> np.ndarray:
        # Only scores tied to the training objective look at train_rows
        return self.values(model, features, labels)

    def check_model(self, model: FittedModel) -> None:
        missing = self.requires - model.capabilities()
        if len(missing) > 0:
            names = ', '.join(sorted(c.value for c in missing))
            raise ProbeError(f'probe {self.name} needs {names}, which {model.family.value} models lack')

    def __call__(
        self,
        model: FittedModel,
        features: np.ndarray,
        labels: np.ndarray,
        model_index: int = 0,
        train_rows: Optional[np.ndarray] = None
    ) -> ProbeMatrix:
        """ `train_rows` indexes the rows the model was fit on; None means all of them. """
        self.check_model(model)
        labels = np.asarray(labels, dtype=np.int64)
        values = np.asarray(self.values_with_train_rows(model, features, labels, train_rows), dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        expected = (len(labels), self.width(model.n_features))
        if values.shape != expected:
            raise ProbeError(f'probe {self.name} produced shape {values.shape}, expected {expected}')
        return ProbeMatrix(values=values, probe_name=self.name, model_index=model_index)


def _gather(matrix: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return matrix[np.arange(len(labels)), labels]


class AccuracyProbe(Probe):
    name = 'accuracy'
    binary = True

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        # argmax resolves ties toward the lower class id
        return (np.argmax(model.predict_proba(features), axis=1) == labels).astype(np.float64)


class SelfConfidenceProbe(Probe):
    name = 'self_confidence'

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return _gather(model.predict_proba(features), labels)


class AdjustedConfidenceProbe(Probe):
    """ Self-confidence minus the mean self-confidence of the rows sharing the label. """

    name = 'adjusted_confidence'

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        confidence = _gather(model.predict_proba(features), labels)
        sums = np.bincount(labels, weights=confidence, minlength=model.n_classes)
        counts = np.bincount(labels, minlength=model.n_classes)
        means = sums / np.maximum(counts, 1)
        return confidence - means[labels]


class MarginProbe(Probe):
    """ z_y - max_{c != y} z_c over logits, or over probabilities for models without logits. """

    name = 'margin'

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        if Capability.Logits in model.capabilities():
            scores = model.decision_function(features)
        else:
            scores = model.predict_proba(features)
        own = _gather(scores, labels)
        others = scores.copy()
        others[np.arange(len(labels)), labels] = -np.inf
        return own - others.max(axis=1)


class LogLossProbe(Probe):
    name = 'logloss'
    orientation = Orientation.Suspicion

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        picked = _gather(model.predict_proba(features), labels)
        return -np.log(np.maximum(picked, constants.PROB_CLAMP))


class L2OneHotProbe(Probe):
    name = 'l2_onehot'
    orientation = Orientation.Suspicion

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        probs = model.predict_proba(features)
        return np.linalg.norm(probs - one_hot(labels, probs.shape[1]), axis=1)


class InputGradientProbe(Probe):
    name = 'input_gradient'
    orientation = Orientation.Signed
    requires = frozenset({Capability.InputGradients})

    def width(self, n_features: int) -> int:
        return n_features

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return model.input_gradients(features, labels)


class LogInputGradientProbe(Probe):
    """
    Gradient of log p_y with respect to the input. Unlike input_gradient it is
    not shrunk by p_y, so rows the model disagrees with move the most.
    """

    name = 'log_input_gradient'
    orientation = Orientation.Signed
    requires = frozenset({Capability.InputGradients})

    def width(self, n_features: int) -> int:
        return n_features

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        picked = _gather(model.predict_proba(features), labels)
        return model.input_gradients(features, labels) / np.maximum(picked, constants.PROB_CLAMP)[:, None]


class GradNormSqProbe(Probe):
    """ Squared norm of the per-example loss gradient, scaled by the snapshot's step size. """

    name = 'grad_norm_sq'
    orientation = Orientation.Suspicion
    requires = frozenset({Capability.ParameterGradients})

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        grads = model.parameter_gradients(features, labels)
        return model.learning_rate * np.sum(grads ** 2, axis=1)


def _cosine_to_others(grads: np.ndarray, votes: np.ndarray) -> np.ndarray:
    """ cos(g_i, mean of votes_j over j != i); zero norms score 0. """
    n = grads.shape[0]
    if n < 2:
        return np.zeros(n)
    others = (votes.sum(axis=0)[None, :] - votes) / (n - 1)
    dots = np.sum(grads * others, axis=1)
    norms = np.linalg.norm(grads, axis=1) * np.linalg.norm(others, axis=1)
    safe = norms > 0.0
    out = np.zeros(n)
    out[safe] = dots[safe] / norms[safe]
    return np.clip(out, -1.0, 1.0)


class GradCosineProbe(Probe):
    """
    Cosine between each example's loss gradient and the mean gradient of every
    other example. Zero-norm gradients score 0.
    """

    name = 'grad_cosine'
    requires = frozenset({Capability.ParameterGradients})

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        grads = model.parameter_gradients(features, labels)
        return _cosine_to_others(grads, grads)


class UnitGradCosineProbe(Probe):
    """
    Like grad_cosine, but every other example contributes its unit gradient, so
    a few large gradients cannot outvote the rest.
    """

    name = 'unit_grad_cosine'
    requires = frozenset({Capability.ParameterGradients})

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        grads = model.parameter_gradients(features, labels)
        lengths = np.linalg.norm(grads, axis=1)
        units = np.zeros_like(grads)
        nonzero = lengths > 0.0
        units[nonzero] = grads[nonzero] / lengths[nonzero, None]
        return _cosine_to_others(grads, units)


def gauss_newton_hessian(model: LinearModel, features: np.ndarray) -> np.ndarray:
    """
    Gauss-Newton matrix of the mean regularized log-loss over the rows, in the
    row-major [W | b] parameter layout of LinearModel.parameter_gradients.
    """
    embedded = model.embed(features)
    probs = softmax(embedded @ model.weights.T + model.bias, axis=1)
    n, k = probs.shape
    augmented = np.concatenate([embedded, np.ones((n, 1))], axis=1)
    # Per-row softmax covariance diag(p) - p p^T
    cov = -probs[:, :, None] * probs[:, None, :]
    cov[:, np.arange(k), np.arange(k)] += probs
    size = k * augmented.shape[1]
    hessian = np.einsum('ikl,ia,ib->kalb', cov, augmented, augmented).reshape(size, size) / n
    penalty = np.concatenate([np.full((k, augmented.shape[1] - 1), model.alpha), np.zeros((k, 1))], axis=1)
    hessian[np.diag_indices(size)] += penalty.ravel()
    return hessian


HessianFn = Callable[[LinearModel, np.ndarray, np.ndarray], np.ndarray]


class SelfInfluenceProbe(Probe):
    """ g^T (H + damping I)^-1 g per example, H from `hessian` (Gauss-Newton by default). """

    name = 'self_influence'
    orientation = Orientation.Suspicion
    requires = frozenset({Capability.ParameterGradients})

    def __init__(self, damping: float = constants.SELF_INFLUENCE_DAMPING, hessian: Optional[HessianFn] = None) -> None:
        self._damping = damping
        self._hessian = hessian

    def values(self, model: FittedModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return self.values_with_train_rows(model, features, labels, None)

    def values_with_train_rows(
        self,
        model: FittedModel,
        features: np.ndarray,
        labels: np.ndarray,
        train_rows: Optional[np.ndarray]
    ) -> np.ndarray:
        if not isinstance(model, LinearModel):
            raise ProbeError(f'probe {self.name} supports klm models only, got {model.family.value}')
        grads = model.parameter_gradients(features, labels)
        # The curvature is that of the training objective, not of every scored row
        fit_features = features if train_rows is None else features[train_rows]
        fit_labels = labels if train_rows is None else labels[train_rows]
        if self._hessian is None:
            hessian = gauss_newton_hessian(model, fit_features)
        else:
            hessian = np.array(self._hessian(model, fit_features, fit_labels), dtype=np.float64)
        hessian[np.diag_indices(hessian.shape[0])] += self._damping
        solved = solve(hessian, grads.T, assume_a='sym')
        return np.sum(grads * solved.T, axis=1)


PROBE_LOOKUP: Dict[str, Probe] = {p.name: p for p in [
    AccuracyProbe(),
    SelfConfidenceProbe(),
    AdjustedConfidenceProbe(),
    MarginProbe(),
    LogLossProbe(),
    L2OneHotProbe(),
    InputGradientProbe(),
    LogInputGradientProbe(),
    GradNormSqProbe(),
    GradCosineProbe(),
    UnitGradCosineProbe(),
    SelfInfluenceProbe()
]}


def get_probe(name: str) -> Probe:
    probe = PROBE_LOOKUP.get(name)
    if probe is None:
        raise ProbeError(f'unknown probe {name!r}, expected one of {sorted(PROBE_LOOKUP)}')
    return probe
