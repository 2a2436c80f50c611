from trustprobe.base import DatasetError
from trustprobe.dataset import (
    CsvSchema,
    Dataset,
    Part,
    ValidationKind,
    load_csv,
    recode_categories,
    split,
    target_for_test,
    validation_target
)

import numpy as np
import pytest


def write(tmp_path, text: str) -> str:
    path = tmp_path / 'data.csv'
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_load_csv(tmp_path) -> None:
    path = write(tmp_path, (
        'id,x0,color,label,clean_label,rule_0,rule_1\n'
        'a,0.5,red,0,0,0,-1\n'
        'b,1.5,blue,1,0,-1,1\n'
        'c,-2.0,red,2,2,2,2\n'
    ))
    ds = load_csv(path, CsvSchema(categorical=('color',)))
    assert ds.n_examples == 3
    assert ds.n_classes == 3
    assert ds.example_ids.tolist() == ['a', 'b', 'c']
    # blue sorts before red
    np.testing.assert_array_equal(ds.features, [[0.5, 1.0], [1.5, 0.0], [-2.0, 1.0]])
    assert ds.categorical == (1,)
    assert ds.rules is not None and ds.rules.shape == (3, 2)
    np.testing.assert_array_equal(ds.is_mislabeled(), [False, True, False])


@pytest.mark.parametrize(
    "text, schema",
    [
        ('id,x0,label\na,1.0,0\nb,2.0\n', CsvSchema()),
        ('id,x0,label\na,1.0,0\nb,oops,1\n', CsvSchema()),
        ('id,x0,label\na,1.0,0\nb,2.0,1.5\n', CsvSchema()),
        ('id,x0,label\na,1.0,0\nb,2.0,3\n', CsvSchema(n_classes=2)),
        ('id,x0,target\na,1.0,0\n', CsvSchema()),
        ('id,x0,label\na,1.0,0\na,2.0,1\n', CsvSchema())
    ]
)
def test_load_csv_rejects(tmp_path, text: str, schema: CsvSchema) -> None:
    with pytest.raises(DatasetError):
        load_csv(write(tmp_path, text), schema)


def test_load_csv_missing_file(tmp_path) -> None:
    with pytest.raises(DatasetError):
        load_csv(str(tmp_path / 'nope.csv'))


def test_dataset_is_read_only(blobs: Dataset) -> None:
    with pytest.raises(ValueError):
        blobs.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        blobs.noisy_labels[0] = 1


def test_subset_and_relabel(blobs: Dataset) -> None:
    part = blobs.subset(np.array([3, 1]))
    assert part.example_ids.tolist() == [blobs.example_ids[3], blobs.example_ids[1]]
    flipped = part.with_noisy_labels((part.noisy_labels + 1) % 3)
    assert flipped.is_mislabeled().all()
    assert not part.is_mislabeled().any()


def test_split_sizes_and_stratification(noisy_blobs: Dataset) -> None:
    tags = split(noisy_blobs, (0.6, 0.2, 0.2), seed=5)
    assert tags.sizes() == (90, 30, 30)
    counts = np.bincount(noisy_blobs.noisy_labels, minlength=3)
    for part in (Part.Validation, Part.Test):
        observed = np.bincount(noisy_blobs.noisy_labels[tags.indices(part)], minlength=3)
        expected = counts * 30 / len(noisy_blobs.noisy_labels)
        assert np.all(np.abs(observed - expected) <= 2.0)


def test_split_is_seeded(noisy_blobs: Dataset) -> None:
    a = split(noisy_blobs, (0.6, 0.2, 0.2), seed=5)
    b = split(noisy_blobs, (0.6, 0.2, 0.2), seed=5)
    c = split(noisy_blobs, (0.6, 0.2, 0.2), seed=6)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    assert not np.array_equal(a.assignment, c.assignment)


def test_split_rejects_tiny_classes() -> None:
    ds = Dataset(
        features=np.zeros((6, 1)),
        noisy_labels=np.array([0, 0, 0, 0, 1, 1]),
        n_classes=2,
        example_ids=np.arange(6)
    )
    with pytest.raises(DatasetError):
        split(ds, (0.6, 0.2, 0.2), seed=0)


@pytest.mark.parametrize(
    "fractions",
    [(0.5, 0.5), (0.6, 0.3, 0.3), (1.2, -0.1, -0.1)]
)
def test_split_rejects_fractions(blobs: Dataset, fractions: tuple) -> None:
    with pytest.raises(DatasetError):
        split(blobs, fractions, seed=0)


def test_validation_targets(noisy_blobs: Dataset) -> None:
    noisy = split(noisy_blobs, (0.6, 0.2, 0.2), seed=1, validation_kind=ValidationKind.Noisy)
    idx, labels = validation_target(noisy_blobs, noisy)
    np.testing.assert_array_equal(labels, noisy_blobs.noisy_labels[idx])

    clean = split(noisy_blobs, (0.6, 0.2, 0.2), seed=1, validation_kind=ValidationKind.Clean)
    idx, labels = validation_target(noisy_blobs, clean)
    np.testing.assert_array_equal(labels, noisy_blobs.require_clean_labels()[idx])

    oracle = split(noisy_blobs, (0.6, 0.2, 0.2), seed=1, validation_kind=ValidationKind.Oracle)
    idx, labels = validation_target(noisy_blobs, oracle)
    test_idx, test_labels = target_for_test(noisy_blobs, oracle)
    np.testing.assert_array_equal(idx, test_idx)
    np.testing.assert_array_equal(labels, noisy_blobs.require_clean_labels()[test_idx])


def coded(features: list, categorical: tuple = (1,)) -> Dataset:
    n = len(features)
    return Dataset(
        features=np.array(features, dtype=np.float64),
        noisy_labels=np.zeros(n, dtype=np.int64),
        n_classes=1,
        example_ids=np.arange(n),
        categorical=categorical
    )


@pytest.mark.parametrize(
    "codes, rows, expected",
    [
        ([0.0, 1.0, 2.0, 3.0], [1, 2, 3], [-1.0, 0.0, 1.0, 2.0]),
        ([4.0, 2.0, 4.0, 9.0], [0, 1], [1.0, 0.0, 1.0, -1.0]),
        ([0.0, 1.0], [], [-1.0, -1.0]),
    ]
)
def test_recode_categories_uses_the_given_rows(codes: list, rows: list, expected: list) -> None:
    ds = coded([[0.5, c] for c in codes])
    out = recode_categories(ds, np.array(rows, dtype=np.int64))
    np.testing.assert_array_equal(out.features[:, 1], expected)
    # Numeric columns are untouched
    np.testing.assert_array_equal(out.features[:, 0], ds.features[:, 0])


def test_held_out_categories_do_not_shift_training_codes(tmp_path) -> None:
    header = 'id,x0,color,label\n'
    train_rows = 'a,0.5,red,0\nb,1.5,blue,1\nc,2.5,red,0\n'
    # "amber" only appears after the training rows and sorts first
    full = load_csv(write(tmp_path, header + train_rows + 'd,3.5,amber,1\n'), CsvSchema(categorical=('color',)))
    path = tmp_path / 'train.csv'
    path.write_text(header + train_rows, encoding='utf-8')
    alone = load_csv(str(path), CsvSchema(categorical=('color',)))
    assert full.features[0, 1] != alone.features[0, 1]
    recoded = recode_categories(full, np.arange(3))
    np.testing.assert_array_equal(recoded.features[:3], alone.features)
    assert recoded.features[3, 1] == -1.0
