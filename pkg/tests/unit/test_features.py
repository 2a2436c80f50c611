from scipy.spatial.distance import cdist
from trustprobe.base import DatasetError
from trustprobe.features import FeatureKind, FeatureMap, fit_feature_map_array, parse_feature_kind, rbf_bandwidth

import numpy as np
import pytest


def test_standardize_uses_fit_rows_only() -> None:
    train = np.array([[0.0, 5.0], [2.0, 5.0]])
    fmap = fit_feature_map_array(train, FeatureKind.Standardize, seed=0)
    np.testing.assert_allclose(fmap.transform(train), [[-1.0, 0.0], [1.0, 0.0]])
    # Constant columns map to zero, even for new values
    np.testing.assert_allclose(fmap.transform(np.array([[4.0, 9.0]])), [[3.0, 4.0]])


def test_one_hot_standardize() -> None:
    train = np.array([[1.0, 0.0], [3.0, 2.0], [5.0, 0.0]])
    fmap = fit_feature_map_array(train, FeatureKind.OneHotStandardize, seed=0, categorical=(1,))
    assert fmap.output_dim == 3
    out = fmap.transform(np.array([[3.0, 2.0], [3.0, 7.0]]))
    np.testing.assert_allclose(out, [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])


def test_random_fourier_jacobian(rng: np.random.Generator) -> None:
    features = rng.normal(size=(20, 3))
    fmap = fit_feature_map_array(features, FeatureKind.RandomFourier, seed=4, n_components=16)
    assert fmap.output_dim == 16
    assert fmap.gamma == pytest.approx(rbf_bandwidth(features))
    x = features[:1]
    analytic = fmap.jacobian_factor(x)[0][None, :] * fmap.omega
    numeric = np.zeros_like(analytic)
    h = 1e-6
    for j in range(3):
        up = x.copy()
        down = x.copy()
        up[0, j] += h
        down[0, j] -= h
        numeric[j] = (fmap.transform(up)[0] - fmap.transform(down)[0]) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, atol=1e-7)


def test_random_fourier_is_seeded(rng: np.random.Generator) -> None:
    features = rng.normal(size=(10, 2))
    a = fit_feature_map_array(features, FeatureKind.RandomFourier, seed=1, n_components=8)
    b = fit_feature_map_array(features, FeatureKind.RandomFourier, seed=1, n_components=8)
    np.testing.assert_array_equal(a.omega, b.omega)
    np.testing.assert_array_equal(a.phase, b.phase)


def test_json_round_trip(rng: np.random.Generator) -> None:
    features = rng.normal(size=(10, 2))
    fmap = fit_feature_map_array(features, FeatureKind.RandomFourier, seed=1, n_components=8)
    restored = FeatureMap.from_json(fmap.to_json())
    np.testing.assert_allclose(restored.transform(features), fmap.transform(features))


def test_rbf_bandwidth_of_constant_input() -> None:
    assert rbf_bandwidth(np.ones((4, 2))) == pytest.approx(0.5)


def test_bad_inputs() -> None:
    with pytest.raises(DatasetError):
        parse_feature_kind('polynomial')
    with pytest.raises(DatasetError):
        fit_feature_map_array(np.array([[np.nan]]), FeatureKind.Standardize, seed=0)
    fmap = fit_feature_map_array(np.zeros((2, 2)), FeatureKind.Identity, seed=0)
    with pytest.raises(DatasetError):
        fmap.transform(np.zeros((2, 3)))


@pytest.mark.parametrize("seed", [3, 17, 29])
def test_random_fourier_approximates_the_rbf_kernel(rng: np.random.Generator, seed: int) -> None:
    features = rng.normal(size=(60, 3))
    gamma = 0.2
    fmap = fit_feature_map_array(features, FeatureKind.RandomFourier, seed=seed, n_components=512, gamma=gamma)
    embedded = fmap.transform(features)
    approx = embedded @ embedded.T
    exact = np.exp(-gamma * cdist(features, features, 'sqeuclidean'))
    assert np.mean(np.abs(approx - exact)) <= 0.05
