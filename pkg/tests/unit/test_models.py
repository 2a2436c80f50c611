from trustprobe.base import ModelError
from trustprobe.dataset import Dataset
from trustprobe.features import FeatureKind, FeatureMap
from trustprobe.models import (
    SEARCH_SPACES,
    BaseModelSpec,
    BoostedTrees,
    Capability,
    Family,
    FittedModel,
    LinearModel,
    NearestNeighbors,
    fit,
    input_gradient,
    log_loss,
    model_from_json,
    model_to_json,
    nearest_indices,
    parameter_gradient,
    parse_family,
    sample_hyperparameters,
    staged_fit
)

import numpy as np
import pytest


def test_parse_family() -> None:
    assert parse_family('gbt') == Family.Gbt
    with pytest.raises(ModelError):
        parse_family('svm')


def test_spec_rejects_unknown_hyperparameters() -> None:
    with pytest.raises(ModelError):
        BaseModelSpec(family=Family.Klm, hyperparameters={'depth': 3})


def test_spec_merges_defaults() -> None:
    spec = BaseModelSpec(family=Family.Gbt).with_hyperparameters(l2=3.0)
    assert spec.params()['l2'] == 3.0
    assert spec.params()['max_depth'] == 3


@pytest.mark.parametrize("family", [Family.Klm, Family.Gbt])
def test_sampled_hyperparameters_stay_in_range(family: Family) -> None:
    rng = np.random.default_rng(0)
    for _ in range(50):
        draw = sample_hyperparameters(family, rng)
        for name, value in draw.items():
            space = SEARCH_SPACES[family][name]
            assert space.low <= value <= space.high  # type: ignore


def test_knn_has_no_search_space() -> None:
    assert sample_hyperparameters(Family.Knn, np.random.default_rng(0)) == {}


def test_log_loss() -> None:
    assert log_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1])) == pytest.approx(0.0)
    assert log_loss(np.array([[0.0, 1.0]]), np.array([0])) == pytest.approx(-np.log(1e-12))
    with pytest.raises(ModelError):
        log_loss(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))


def accuracy(model: FittedModel, ds: Dataset) -> float:
    return float(np.mean(np.argmax(model.predict_proba(ds.features), axis=1) == ds.noisy_labels))


def test_klm_learns_blobs(blobs: Dataset, linear_klm: BaseModelSpec) -> None:
    model = fit(linear_klm, blobs.features, blobs.noisy_labels)
    assert isinstance(model, LinearModel)
    assert accuracy(model, blobs) > 0.9
    np.testing.assert_allclose(model.predict_proba(blobs.features).sum(axis=1), np.ones(blobs.n_examples))


def test_gbt_learns_blobs(blobs: Dataset, small_gbt: BaseModelSpec) -> None:
    model = fit(small_gbt, blobs.features, blobs.noisy_labels)
    assert isinstance(model, BoostedTrees)
    assert accuracy(model, blobs) > 0.9


def test_knn_with_one_neighbor_memorizes(blobs: Dataset) -> None:
    spec = BaseModelSpec(family=Family.Knn, hyperparameters={'n_neighbors': 1})
    model = fit(spec, blobs.features, blobs.noisy_labels)
    assert accuracy(model, blobs) == 1.0


def test_knn_exclude_self() -> None:
    features = np.array([[0.0], [1.0], [10.0]])
    labels = np.array([0, 1, 1])
    spec = BaseModelSpec(family=Family.Knn, hyperparameters={'n_neighbors': 1, 'exclude_self': True})
    model = fit(spec, features, labels)
    # Row 0's nearest other row is row 1
    np.testing.assert_allclose(model.predict_proba(features[:1]), [[0.0, 1.0]])


def test_nearest_indices_break_ties_toward_lower_index() -> None:
    distances = np.array([[1.0, 0.5, 0.5, 0.5, 2.0]])
    np.testing.assert_array_equal(nearest_indices(distances, 2), [[1, 2]])
    np.testing.assert_array_equal(nearest_indices(distances, 5), [[1, 2, 3, 0, 4]])


@pytest.mark.parametrize("fixture", ['linear_klm', 'small_rbf_klm', 'small_gbt'])
def test_staged_fit_ends_at_fit(request, blobs: Dataset, fixture: str) -> None:
    spec = request.getfixturevalue(fixture)
    snapshots = list(staged_fit(spec, blobs.features, blobs.noisy_labels))
    final = fit(spec, blobs.features, blobs.noisy_labels)
    assert snapshots[-1].iteration == final.iteration
    assert [s.iteration for s in snapshots] == list(range(1, len(snapshots) + 1))
    np.testing.assert_allclose(
        snapshots[-1].predict_proba(blobs.features), final.predict_proba(blobs.features), atol=1e-12
    )


def test_knn_stages_over_k(blobs: Dataset) -> None:
    spec = BaseModelSpec(family=Family.Knn, hyperparameters={'n_neighbors': 4})
    assert [m.iteration for m in staged_fit(spec, blobs.features, blobs.noisy_labels)] == [1, 2, 3, 4]


def test_gbt_prefix_zero_predicts_priors(blobs: Dataset, small_gbt: BaseModelSpec) -> None:
    # Without a holdout the priors are those of the balanced blobs
    model = fit(small_gbt.with_hyperparameters(early_stopping=False), blobs.features, blobs.noisy_labels)
    assert isinstance(model, BoostedTrees)
    probs = model.prefix(0).predict_proba(blobs.features[:2])
    np.testing.assert_allclose(probs, np.full((2, 3), 1.0 / 3.0))
    with pytest.raises(ModelError):
        model.prefix(model.n_rounds + 1)


def skewed_labels(n: int) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2:] = 1
    labels[4 * n // 5:] = 2
    return labels


@pytest.mark.parametrize("early_stopping", [True, False])
def test_gbt_without_steps_predicts_full_data_priors(blobs: Dataset, early_stopping: bool) -> None:
    labels = skewed_labels(blobs.n_examples)
    spec = BaseModelSpec(
        family=Family.Gbt,
        seed=9,
        hyperparameters={'learning_rate': 0.0, 'max_iter': 6, 'max_depth': 2, 'early_stopping': early_stopping}
    )
    model = fit(spec, blobs.features, labels)
    priors = np.bincount(labels, minlength=3) / len(labels)
    np.testing.assert_allclose(model.predict_proba(blobs.features[:5]), np.tile(priors, (5, 1)), atol=1e-12)


@pytest.mark.parametrize("rounds", [1, 4, 7])
def test_gbt_grows_one_tree_per_class_per_round(blobs: Dataset, small_gbt: BaseModelSpec, rounds: int) -> None:
    spec = small_gbt.with_hyperparameters(max_iter=rounds, early_stopping=False)
    model = fit(spec, blobs.features, blobs.noisy_labels)
    assert isinstance(model, BoostedTrees)
    assert model.n_rounds == rounds
    assert model.n_trees == rounds * 3
    assert all(len(r) == 3 for r in model.trees)


def test_heavy_regularization_gives_near_uniform_predictions(blobs: Dataset, linear_klm: BaseModelSpec) -> None:
    spec = linear_klm.with_hyperparameters(alpha=1e6, learning_rate=0.05)
    probs = fit(spec, blobs.features, blobs.noisy_labels).predict_proba(blobs.features)
    np.testing.assert_allclose(probs, np.full_like(probs, 1.0 / 3.0), atol=0.05)


def test_klm_training_loss_goes_down(blobs: Dataset, linear_klm: BaseModelSpec) -> None:
    spec = linear_klm.with_hyperparameters(early_stopping=False, max_iter=20)
    losses = [
        log_loss(s.predict_proba(blobs.features), blobs.noisy_labels)
        for s in staged_fit(spec, blobs.features, blobs.noisy_labels)
    ]
    assert len(losses) == 20
    assert losses[-1] < losses[0]
    assert np.mean(losses[10:]) < np.mean(losses[:10])



def test_training_data_is_checked(blobs: Dataset, linear_klm: BaseModelSpec) -> None:
    with pytest.raises(ModelError):
        fit(linear_klm, blobs.features, np.zeros(blobs.n_examples, dtype=np.int64), n_classes=3)
    bad = blobs.features.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ModelError):
        fit(linear_klm, bad, blobs.noisy_labels)
    with pytest.raises(ModelError):
        fit(linear_klm, blobs.features[:, :1].T, blobs.noisy_labels)


def random_linear_model(seed: int, kind: FeatureKind) -> LinearModel:
    rng = np.random.default_rng(seed)
    d, k, n_components = 3, 3, 12
    if kind == FeatureKind.RandomFourier:
        fmap = FeatureMap(
            kind=kind,
            input_dim=d,
            seed=seed,
            omega=rng.normal(size=(d, n_components)),
            phase=rng.uniform(0.0, 2.0 * np.pi, size=n_components),
            gamma=0.5,
            n_components=n_components
        )
    else:
        fmap = FeatureMap(kind=kind, input_dim=d, seed=seed)
    return LinearModel(
        feature_map=fmap,
        weights=rng.normal(size=(k, fmap.output_dim)),
        bias=rng.normal(size=k),
        alpha=0.01,
        step_size=0.1,
        iteration=1
    )


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("kind", [FeatureKind.Identity, FeatureKind.RandomFourier])
def test_input_gradients_match_finite_differences(seed: int, kind: FeatureKind) -> None:
    model = random_linear_model(seed, kind)
    rng = np.random.default_rng(100 + seed)
    features = rng.normal(size=(10, 3))
    classes = rng.integers(0, 3, size=10)
    analytic = model.input_gradients(features, classes)
    numeric = FittedModel.input_gradients(model, features, classes)
    for i in range(10):
        assert relative_error(analytic[i], numeric[i]) <= 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_parameter_gradients_match_finite_differences(seed: int) -> None:
    model = random_linear_model(seed, FeatureKind.RandomFourier)
    rng = np.random.default_rng(200 + seed)
    x = rng.normal(size=(1, 3))
    y = np.array([int(rng.integers(0, 3))])
    analytic = model.parameter_gradients(x, y)[0]
    theta = model.flat_parameters()
    numeric = np.zeros_like(theta)
    h = 1e-6
    for j in range(len(theta)):
        up = theta.copy()
        down = theta.copy()
        up[j] += h
        down[j] -= h
        loss_up = model.with_flat_parameters(up).example_losses(x, y)[0]
        loss_down = model.with_flat_parameters(down).example_losses(x, y)[0]
        numeric[j] = (loss_up - loss_down) / (2 * h)
    assert relative_error(analytic, numeric) <= 1e-5


def test_single_row_accessors(blobs: Dataset, linear_klm: BaseModelSpec, small_gbt: BaseModelSpec) -> None:
    klm = fit(linear_klm, blobs.features, blobs.noisy_labels)
    assert input_gradient(klm, blobs.features[0], 1).shape == (2,)
    assert parameter_gradient(klm, blobs.features[0], 1).shape == (3 * 3,)
    gbt = fit(small_gbt, blobs.features, blobs.noisy_labels)
    assert Capability.ParameterGradients not in gbt.capabilities()
    with pytest.raises(ModelError):
        parameter_gradient(gbt, blobs.features[0], 1)


@pytest.mark.parametrize("fixture", ['small_rbf_klm', 'small_gbt'])
def test_json_round_trip(request, blobs: Dataset, fixture: str) -> None:
    model = fit(request.getfixturevalue(fixture), blobs.features, blobs.noisy_labels)
    restored = model_from_json(model_to_json(model))
    np.testing.assert_allclose(restored.predict_proba(blobs.features), model.predict_proba(blobs.features))


def test_knn_json_round_trip(blobs: Dataset) -> None:
    model = fit(BaseModelSpec(family=Family.Knn), blobs.features, blobs.noisy_labels)
    restored = model_from_json(model_to_json(model))
    assert isinstance(restored, NearestNeighbors)
    np.testing.assert_allclose(restored.predict_proba(blobs.features), model.predict_proba(blobs.features))


def test_model_documents_are_versioned() -> None:
    with pytest.raises(ModelError):
        model_from_json({'format': 'trustprobe.model', 'version': 99, 'family': 'klm'})
