from trustprobe.base import EnsembleError
from trustprobe.dataset import Dataset
from trustprobe.ensembling import (
    EnsembleStrategy,
    ProbeStream,
    StrategyKind,
    _independent_rows,
    member_count,
    parse_strategy,
    probe_model
)
from trustprobe.models import BaseModelSpec, Family, LinearModel
from trustprobe.probing import ProbeMatrix, SelfInfluenceProbe, gauss_newton_hessian, get_probe
from typing import List

import numpy as np
import pytest


@pytest.mark.parametrize(
    "text, kind, label",
    [
        ('none', StrategyKind.None_, 'none'),
        ('bootstrap:10', StrategyKind.Bootstrap, 'bootstrap:10'),
        ('kfold:5', StrategyKind.Kfold, 'kfold:5'),
        ('loo', StrategyKind.Loo, 'loo'),
        ('progressive', StrategyKind.Progressive, 'progressive')
    ]
)
def test_parse_strategy(text: str, kind: StrategyKind, label: str) -> None:
    strategy = parse_strategy(text)
    assert strategy.kind == kind
    assert strategy.label() == label


@pytest.mark.parametrize("text", ['bootstrap', 'kfold:x', 'kfold:1', 'bagging:3', 'loo:3', 'bootstrap:0'])
def test_parse_strategy_rejects(text: str) -> None:
    with pytest.raises(EnsembleError):
        parse_strategy(text)


def test_bootstrap_out_of_bag_fraction() -> None:
    strategy = EnsembleStrategy(kind=StrategyKind.Bootstrap, n_models=500, seed=3)
    n = 1000
    draws = _independent_rows(strategy, np.arange(n))
    fractions = [1.0 - len(np.unique(rows)) / n for rows in draws]
    assert abs(float(np.mean(fractions)) - 0.368) <= 0.01


def test_kfold_masks_partition_rows() -> None:
    strategy = EnsembleStrategy(kind=StrategyKind.Kfold, n_folds=4, seed=3)
    n = 103
    out_counts = np.zeros(n, dtype=np.int64)
    for rows in _independent_rows(strategy, np.arange(n)):
        mask = np.zeros(n, dtype=bool)
        mask[rows] = True
        out_counts += ~mask
    np.testing.assert_array_equal(out_counts, np.ones(n, dtype=np.int64))


def test_loo_respects_the_cap() -> None:
    strategy = EnsembleStrategy(kind=StrategyKind.Loo, loo_cap=10)
    with pytest.raises(EnsembleError):
        _independent_rows(strategy, np.arange(11))
    assert len(_independent_rows(strategy, np.arange(10))) == 10


def test_single_model_stream(blobs: Dataset, linear_klm: BaseModelSpec) -> None:
    stream = probe_model(parse_strategy('none'), linear_klm, blobs.features, blobs.noisy_labels, get_probe('logloss'))
    members = list(stream)
    assert len(members) == 1
    matrix, mask = members[0]
    assert matrix.values.shape == (blobs.n_examples, 1)
    assert mask is not None and mask.all()


def test_progressive_stream_is_ordered(blobs: Dataset, small_rbf_klm: BaseModelSpec) -> None:
    stream = probe_model(parse_strategy('progressive'), small_rbf_klm, blobs.features, blobs.noisy_labels, get_probe('accuracy'))
    assert stream.ordered and stream.binary
    assert stream.n_members is None
    indices = [matrix.model_index for matrix, _ in stream]
    assert indices == list(range(len(indices)))
    assert stream.n_members == len(indices)
    assert member_count(parse_strategy('progressive'), blobs.n_examples, small_rbf_klm, blobs.features, blobs.noisy_labels) == len(indices)


def values_of(stream: ProbeStream) -> List[np.ndarray]:
    return [matrix.values for matrix, _ in stream]


def test_bootstrap_stream_is_deterministic(blobs: Dataset, linear_klm: BaseModelSpec) -> None:
    strategy = parse_strategy('bootstrap:3', seed=9)
    a = values_of(probe_model(strategy, linear_klm, blobs.features, blobs.noisy_labels, get_probe('self_confidence')))
    b = values_of(probe_model(strategy, linear_klm, blobs.features, blobs.noisy_labels, get_probe('self_confidence')))
    assert len(a) == 3
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_threads_keep_member_order(blobs: Dataset) -> None:
    spec = BaseModelSpec(family=Family.Knn)
    strategy = parse_strategy('kfold:5', seed=2)
    serial = values_of(probe_model(strategy, spec, blobs.features, blobs.noisy_labels, get_probe('accuracy')))
    threaded = values_of(probe_model(strategy, spec, blobs.features, blobs.noisy_labels, get_probe('accuracy'), workers=3))
    for x, y in zip(serial, threaded):
        np.testing.assert_array_equal(x, y)


def test_train_indices_mark_the_rest_out_of_bag(blobs: Dataset) -> None:
    spec = BaseModelSpec(family=Family.Knn)
    pool = np.arange(0, blobs.n_examples, 2)
    stream = probe_model(parse_strategy('none'), spec, blobs.features, blobs.noisy_labels, get_probe('accuracy'), train_indices=pool)
    (matrix, mask), = list(stream)
    assert matrix.n_rows == blobs.n_examples
    assert mask is not None
    np.testing.assert_array_equal(np.flatnonzero(mask), pool)


@pytest.mark.parametrize("text", ['none', 'kfold:3', 'progressive'])
def test_members_see_only_their_training_rows(blobs: Dataset, linear_klm: BaseModelSpec, text: str) -> None:
    pool = np.arange(0, blobs.n_examples, 3)
    seen: List[int] = []

    def recording(model: LinearModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        seen.append(len(x))
        return gauss_newton_hessian(model, x)

    stream = probe_model(
        parse_strategy(text, seed=4),
        linear_klm,
        blobs.features,
        blobs.noisy_labels,
        SelfInfluenceProbe(hessian=recording),
        train_indices=pool
    )
    sizes = [int(mask.sum()) for _, mask in stream]
    assert seen == sizes
    assert all(size <= len(pool) for size in seen)


@pytest.mark.parametrize(
    "text, expected",
    [('none', 1), ('bootstrap:7', 7), ('kfold:3', 3), ('loo', 25)]
)
def test_member_count(text: str, expected: int) -> None:
    assert member_count(parse_strategy(text), 25, BaseModelSpec(family=Family.Knn)) == expected


def test_stream_from_members_checks_shapes() -> None:
    good = ProbeMatrix(values=np.zeros((3, 1)), probe_name='x')
    bad = ProbeMatrix(values=np.zeros((2, 1)), probe_name='x')
    stream = ProbeStream.from_members([(good, None), (bad, None)])
    with pytest.raises(EnsembleError):
        list(stream)
