from dataclasses import dataclass, field, replace
from enum import Enum, unique
from trustprobe import constants
from trustprobe.base import DatasetError, MatchException
from typing import Dict, List, Optional, Sequence, Tuple

import logging
import numpy as np
import pandas as pd


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    A feature matrix with observed (possibly noisy) labels, optional ground truth
    and optional labeling-rule votes. Arrays are copied and stored read-only.
    """

    features: np.ndarray
    noisy_labels: np.ndarray
    n_classes: int
    example_ids: np.ndarray
    clean_labels: Optional[np.ndarray] = None
    # n x m votes, constants.ABSTAIN where a rule did not fire
    rules: Optional[np.ndarray] = None
    # Indices of feature columns holding category codes
    categorical: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise DatasetError(f'features must be a matrix, got shape {features.shape}')
        n = features.shape[0]
        noisy = np.asarray(self.noisy_labels, dtype=np.int64)
        if noisy.shape != (n,):
            raise DatasetError(f'expected {n} labels, got shape {noisy.shape}')
        if self.n_classes < 1:
            raise DatasetError(f'n_classes must be positive, got {self.n_classes}')
        _check_label_range(noisy, self.n_classes, 'noisy label')
        ids = np.asarray(self.example_ids)
        if ids.shape != (n,):
            raise DatasetError(f'expected {n} example ids, got shape {ids.shape}')
        if len(set(ids.tolist())) != n:
            raise DatasetError('example ids are not unique')
        object.__setattr__(self, 'features', _frozen(features))
        object.__setattr__(self, 'noisy_labels', _frozen(noisy))
        object.__setattr__(self, 'example_ids', _frozen(ids))
        if self.clean_labels is not None:
            clean = np.asarray(self.clean_labels, dtype=np.int64)
            if clean.shape != (n,):
                raise DatasetError(f'clean labels have shape {clean.shape}, expected ({n},)')
            _check_label_range(clean, self.n_classes, 'clean label')
            object.__setattr__(self, 'clean_labels', _frozen(clean))
        if self.rules is not None:
            rules = np.asarray(self.rules, dtype=np.int64)
            if rules.ndim != 2 or rules.shape[0] != n:
                raise DatasetError(f'rule matrix has shape {rules.shape}, expected ({n}, m)')
            bad = (rules != constants.ABSTAIN) & ((rules < 0) | (rules >= self.n_classes))
            if bad.any():
                row = int(np.argwhere(bad)[0][0])
                raise DatasetError(f'rule vote outside [0, {self.n_classes}) at row {row}')
            object.__setattr__(self, 'rules', _frozen(rules))
        object.__setattr__(self, 'categorical', tuple(int(c) for c in self.categorical))

    @property
    def n_examples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def has_clean_labels(self) -> bool:
        return self.clean_labels is not None

    def require_clean_labels(self) -> np.ndarray:
        if self.clean_labels is None:
            raise DatasetError('this operation needs clean labels but the dataset has none')
        return self.clean_labels

    def is_mislabeled(self) -> np.ndarray:
        return self.noisy_labels != self.require_clean_labels()

    def subset(self, indices: np.ndarray) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[indices],
            noisy_labels=self.noisy_labels[indices],
            n_classes=self.n_classes,
            example_ids=self.example_ids[indices],
            clean_labels=None if self.clean_labels is None else self.clean_labels[indices],
            rules=None if self.rules is None else self.rules[indices],
            categorical=self.categorical
        )

    def with_noisy_labels(self, labels: np.ndarray) -> 'Dataset':
        return replace(self, noisy_labels=labels)

    def with_features(self, features: np.ndarray) -> 'Dataset':
        return replace(self, features=features, categorical=())


def _check_label_range(labels: np.ndarray, n_classes: int, what: str) -> None:
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        row = int(np.argmax(bad))
        raise DatasetError(f'{what} {int(labels[row])} at row {row} is outside [0, {n_classes})')


@unique
class Part(Enum):
    Train = 'train'
    Validation = 'validation'
    Test = 'test'


@unique
class ValidationKind(Enum):
    # Validation rows keep their noisy labels
    Noisy = 'noisy'
    # Validation rows are scored against their clean labels
    Clean = 'clean'
    # The test split doubles as validation
    Oracle = 'oracle'


PART_CODES: Dict[Part, int] = {Part.Train: 0, Part.Validation: 1, Part.Test: 2}


@dataclass(frozen=True, eq=False)
class SplitTags:
    # One code per example, see PART_CODES
    assignment: np.ndarray
    validation_kind: ValidationKind

    def indices(self, part: Part) -> np.ndarray:
        return np.flatnonzero(self.assignment == PART_CODES[part])

    def sizes(self) -> Tuple[int, int, int]:
        return (
            len(self.indices(Part.Train)),
            len(self.indices(Part.Validation)),
            len(self.indices(Part.Test))
        )

    def parts(self) -> List[str]:
        names = {code: part.value for part, code in PART_CODES.items()}
        return [names[int(c)] for c in self.assignment]


@dataclass(frozen=True)
class CsvSchema:
    label: str = 'label'
    clean_label: Optional[str] = 'clean_label'
    id_column: Optional[str] = 'id'
    rule_prefix: str = 'rule_'
    categorical: Tuple[str, ...] = ()
    # Declared class count; inferred from the labels when absent
    n_classes: Optional[int] = None


def _file_row(index: int) -> int:
    # Header is line 1, so the first data row is line 2
    return index + 2


def _parse_int_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors='coerce')
    bad = values.isna() | (values != values.round())
    if bad.any():
        index = int(np.argmax(bad.to_numpy()))
        raise DatasetError(
            f'column {column!r} has non-integer value {frame[column].iloc[index]!r} at row {_file_row(index)}'
        )
    return values.to_numpy().astype(np.int64)


def load_csv(path: str, schema: CsvSchema = CsvSchema()) -> Dataset:
    """
    Read a comma-separated UTF-8 file with a mandatory header row:
    `id,<feature columns...>,label[,clean_label][,rule_0..rule_{m-1}]`.
    Rows are numbered as lines of the file, the header being row 1.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, index_col=False, encoding='utf-8')
    except pd.errors.ParserError as e:
        raise DatasetError(f'ragged rows in {path}: {e}') from e
    except FileNotFoundError as e:
        raise DatasetError(f'no such file: {path}') from e
    ragged = frame.isna().any(axis=1).to_numpy()
    if ragged.any():
        raise DatasetError(f'ragged row {_file_row(int(np.argmax(ragged)))} in {path}')
    if schema.label not in frame.columns:
        raise DatasetError(f'label column {schema.label!r} missing from {path}')

    noisy = _parse_int_column(frame, schema.label)
    clean: Optional[np.ndarray] = None
    if schema.clean_label is not None and schema.clean_label in frame.columns:
        clean = _parse_int_column(frame, schema.clean_label)
    rule_columns = [c for c in frame.columns if c.startswith(schema.rule_prefix)]
    rules: Optional[np.ndarray] = None
    if len(rule_columns) > 0:
        rules = np.stack([_parse_int_column(frame, c) for c in rule_columns], axis=1)

    if schema.n_classes is not None:
        n_classes = schema.n_classes
    else:
        observed = [noisy] + ([clean] if clean is not None else [])
        n_classes = int(max(int(a.max()) for a in observed)) + 1 if len(noisy) > 0 else 1
    for name, labels in [(schema.label, noisy), (schema.clean_label, clean)]:
        if labels is not None:
            bad = (labels < 0) | (labels >= n_classes)
            if bad.any():
                index = int(np.argmax(bad))
                raise DatasetError(
                    f'{name} value {int(labels[index])} at row {_file_row(index)} '
                    f'is outside the declared classes [0, {n_classes})'
                )

    reserved = {schema.label, schema.clean_label, schema.id_column}
    feature_columns = [c for c in frame.columns if c not in reserved and c not in rule_columns]
    columns: List[np.ndarray] = []
    categorical: List[int] = []
    for position, column in enumerate(feature_columns):
        if column in schema.categorical:
            # Categories are coded by sorted order of their string values; pipelines
            # renumber them on the training rows before fitting anything
            codes, _ = pd.factorize(frame[column], sort=True)
            columns.append(codes.astype(np.float64))
            categorical.append(position)
        else:
            values = pd.to_numeric(frame[column], errors='coerce').to_numpy(dtype=np.float64)
            bad = ~np.isfinite(values)
            if bad.any():
                index = int(np.argmax(bad))
                raise DatasetError(
                    f'unparseable value {frame[column].iloc[index]!r} in column {column!r} at row {_file_row(index)}'
                )
            columns.append(values)
    n = len(frame)
    features = np.stack(columns, axis=1) if len(columns) > 0 else np.zeros((n, 0))

    if schema.id_column is not None and schema.id_column in frame.columns:
        ids = frame[schema.id_column].to_numpy(dtype=str)
    else:
        ids = np.array([str(i) for i in range(n)])
    try:
        dataset = Dataset(
            features=features,
            noisy_labels=noisy,
            n_classes=n_classes,
            example_ids=ids,
            clean_labels=clean,
            rules=rules,
            categorical=tuple(categorical)
        )
    except DatasetError as e:
        raise DatasetError(f'{path}: {e}') from e
    logging.info('loaded %d rows, %d features, %d classes from %s', n, features.shape[1], n_classes, path)
    return dataset


def recode_categories(ds: Dataset, rows: np.ndarray) -> Dataset:
    """
    Renumber every categorical column 0..c-1 by the sorted codes present on
    `rows`, so codes depend on those rows alone. Codes absent from `rows` become
    -1, which no encoding fitted on `rows` recognizes.
    """
    if len(ds.categorical) == 0:
        return ds
    rows = np.asarray(rows, dtype=np.int64)
    features = np.array(ds.features, copy=True)
    for column in ds.categorical:
        values = features[:, column]
        seen = np.unique(values[rows])
        if len(seen) == 0:
            features[:, column] = -1.0
            continue
        position = np.searchsorted(seen, values)
        known = seen[np.minimum(position, len(seen) - 1)] == values
        features[:, column] = np.where(known, position, -1).astype(np.float64)
    return replace(ds, features=features)



def split(
    ds: Dataset,
    fractions: Sequence[float],
    seed: int,
    validation_kind: ValidationKind = ValidationKind.Noisy
) -> SplitTags:
    """
    Stratified, seeded train/validation/test assignment. Validation and test
    sizes are floor(fraction * n); the train split takes the remainder.
    """
    if len(fractions) != 3:
        raise DatasetError(f'expected 3 fractions (train, validation, test), got {len(fractions)}')
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f'fractions must be non-negative and sum to 1, got {list(fractions)}')
    n = ds.n_examples
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    n_parts = sum(1 for f in fractions if f > 0)
    counts = np.bincount(ds.noisy_labels, minlength=ds.n_classes)
    for c in range(ds.n_classes):
        if 0 < counts[c] < n_parts:
            raise DatasetError(f'class {c} has {counts[c]} examples, fewer than the {n_parts} splits')
    if validation_kind == ValidationKind.Clean and ds.clean_labels is None:
        raise DatasetError('clean validation requires clean labels')

    rng = np.random.default_rng(seed)
    # Spread each class evenly along [0, 1) in shuffled order, then interleave
    # the classes; any prefix of that order is stratified to within one example.
    position = np.zeros(n)
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.noisy_labels == c)
        shuffled = members[rng.permutation(len(members))]
        position[shuffled] = (np.arange(len(members)) + 0.5) / max(len(members), 1)
    order = np.lexsort((ds.noisy_labels, position))

    assignment = np.full(n, PART_CODES[Part.Train], dtype=np.int8)
    assignment[order[:n_val]] = PART_CODES[Part.Validation]
    assignment[order[n_val:n_val + n_test]] = PART_CODES[Part.Test]
    assignment.flags.writeable = False
    return SplitTags(assignment=assignment, validation_kind=validation_kind)


def validation_target(ds: Dataset, tags: SplitTags) -> Tuple[np.ndarray, np.ndarray]:
    """ Indices and labels used to compute the validation loss under the tags' validation kind. """
    if tags.validation_kind == ValidationKind.Noisy:
        indices = tags.indices(Part.Validation)
        return indices, ds.noisy_labels[indices]
    elif tags.validation_kind == ValidationKind.Clean:
        indices = tags.indices(Part.Validation)
        return indices, ds.require_clean_labels()[indices]
    elif tags.validation_kind == ValidationKind.Oracle:
        return target_for_test(ds, tags)
    else:
        raise MatchException(tags.validation_kind)


def target_for_test(ds: Dataset, tags: SplitTags) -> Tuple[np.ndarray, np.ndarray]:
    indices = tags.indices(Part.Test)
    labels = ds.clean_labels if ds.clean_labels is not None else ds.noisy_labels
    return indices, labels[indices]
