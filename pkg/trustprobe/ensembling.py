from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum, unique
from trustprobe import constants
from trustprobe.base import EnsembleError, MatchException, derive_seed
from trustprobe.models import BaseModelSpec, fit, staged_fit
from trustprobe.probing import Probe, ProbeMatrix
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import logging
import numpy as np


@unique
class StrategyKind(Enum):
    None_ = 'none'
    Bootstrap = 'bootstrap'
    Kfold = 'kfold'
    Loo = 'loo'
    Progressive = 'progressive'


STRATEGY_KIND_LOOKUP: Dict[str, StrategyKind] = {k.value: k for k in StrategyKind}

# Strategies whose members see different rows, so out-of-bag rows exist
INDEPENDENT_KINDS = frozenset({StrategyKind.Bootstrap, StrategyKind.Kfold, StrategyKind.Loo})


@dataclass(frozen=True)
class EnsembleStrategy:
    kind: StrategyKind
    n_models: int = 1
    n_folds: int = 5
    loo_cap: int = constants.DEFAULT_LOO_CAP
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind == StrategyKind.Bootstrap and self.n_models < 1:
            raise EnsembleError(f'bootstrap needs at least 1 model, got {self.n_models}')
        if self.kind == StrategyKind.Kfold and self.n_folds < 2:
            raise EnsembleError(f'kfold needs at least 2 folds, got {self.n_folds}')

    @property
    def independent(self) -> bool:
        return self.kind in INDEPENDENT_KINDS

    @property
    def ordered(self) -> bool:
        return self.kind == StrategyKind.Progressive

    def label(self) -> str:
        if self.kind == StrategyKind.Bootstrap:
            return f'bootstrap:{self.n_models}'
        elif self.kind == StrategyKind.Kfold:
            return f'kfold:{self.n_folds}'
        else:
            return self.kind.value

    def with_seed(self, seed: int) -> 'EnsembleStrategy':
        return replace(self, seed=seed)


def parse_strategy(text: str, seed: int = 0, loo_cap: int = constants.DEFAULT_LOO_CAP) -> EnsembleStrategy:
    """ Parse `none`, `bootstrap:<n>`, `kfold:<k>`, `loo` or `progressive`. """
    name, _, arg = text.strip().partition(':')
    kind = STRATEGY_KIND_LOOKUP.get(name)
    if kind is None:
        raise EnsembleError(f'unknown ensemble strategy {text!r}, expected one of {sorted(STRATEGY_KIND_LOOKUP)}')
    needs_arg = kind in (StrategyKind.Bootstrap, StrategyKind.Kfold)
    if needs_arg != (arg != ''):
        raise EnsembleError(f'malformed ensemble strategy {text!r}')
    count = 0
    if needs_arg:
        try:
            count = int(arg)
        except ValueError:
            raise EnsembleError(f'malformed ensemble strategy {text!r}: {arg!r} is not an integer')
    if kind == StrategyKind.Bootstrap:
        return EnsembleStrategy(kind=kind, n_models=count, loo_cap=loo_cap, seed=seed)
    elif kind == StrategyKind.Kfold:
        return EnsembleStrategy(kind=kind, n_folds=count, loo_cap=loo_cap, seed=seed)
    else:
        return EnsembleStrategy(kind=kind, loo_cap=loo_cap, seed=seed)


# (probe matrix, in-bag mask)
Member = Tuple[ProbeMatrix, Optional[np.ndarray]]


class ProbeStream:
    """
    Lazy sequence of per-member probe matrices with in-bag masks. Each
    iteration recomputes the members from scratch; progressive streams keep a
    single live model at a time.
    """

    def __init__(
        self,
        members: Callable[[], Iterator[Member]],
        n_rows: int,
        probe_name: str,
        n_members: Optional[int] = None,
        ordered: bool = False,
        binary: bool = False
    ) -> None:
        self._members = members
        self.n_rows = n_rows
        self.probe_name = probe_name
        # Unknown until consumed for progressive streams
        self.n_members = n_members
        self.ordered = ordered
        self.binary = binary

    def __iter__(self) -> Iterator[Member]:
        count = 0
        for matrix, mask in self._members():
            if matrix.n_rows != self.n_rows:
                raise EnsembleError(f'member {count} has {matrix.n_rows} rows, expected {self.n_rows}')
            if mask is not None and mask.shape != (self.n_rows,):
                raise EnsembleError(f'member {count} mask has shape {mask.shape}, expected ({self.n_rows},)')
            count += 1
            yield matrix, mask
        self.n_members = count

    @classmethod
    def from_members(cls, members: List[Member], ordered: bool = False, binary: bool = False) -> 'ProbeStream':
        """ Wrap precomputed members; mostly useful for feeding aggregators directly. """
        if len(members) == 0:
            raise EnsembleError('a probe stream needs at least one member')
        first = members[0][0]
        return cls(
            members=lambda: iter(members),
            n_rows=first.n_rows,
            probe_name=first.probe_name,
            n_members=len(members),
            ordered=ordered,
            binary=binary
        )


def _mask(n: int, rows: np.ndarray) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[rows] = True
    return mask


def _independent_rows(strategy: EnsembleStrategy, pool: np.ndarray) -> List[np.ndarray]:
    """ Training rows of each member of an independent (or single-model) strategy. """
    if strategy.kind == StrategyKind.None_:
        return [pool]
    elif strategy.kind == StrategyKind.Bootstrap:
        draws = []
        for i in range(strategy.n_models):
            rng = np.random.default_rng(derive_seed(strategy.seed, 'bootstrap', i))
            draws.append(pool[rng.integers(0, len(pool), size=len(pool))])
        return draws
    elif strategy.kind == StrategyKind.Kfold:
        if len(pool) < strategy.n_folds:
            raise EnsembleError(f'kfold:{strategy.n_folds} needs at least {strategy.n_folds} rows, got {len(pool)}')
        rng = np.random.default_rng(derive_seed(strategy.seed, 'kfold'))
        folds = np.array_split(pool[rng.permutation(len(pool))], strategy.n_folds)
        return [np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i])) for i in range(len(folds))]
    elif strategy.kind == StrategyKind.Loo:
        if len(pool) > strategy.loo_cap:
            raise EnsembleError(
                f'leave-one-out over {len(pool)} rows exceeds the cap of {strategy.loo_cap}; use kfold instead'
            )
        return [np.delete(pool, i) for i in range(len(pool))]
    else:
        raise EnsembleError(f'{strategy.kind.value} is not an independent strategy')


def _member_spec(strategy: EnsembleStrategy, spec: BaseModelSpec, index: int) -> BaseModelSpec:
    if strategy.kind == StrategyKind.None_:
        return spec
    return spec.with_seed(derive_seed(spec.seed, strategy.kind.value, index))


def probe_model(
    strategy: EnsembleStrategy,
    spec: BaseModelSpec,
    features: np.ndarray,
    labels: np.ndarray,
    probe: Probe,
    n_classes: Optional[int] = None,
    train_indices: Optional[np.ndarray] = None,
    workers: int = 1
) -> ProbeStream:
    """
    Train the ensemble members on `train_indices` (all rows by default) and
    probe every row with each of them. Masks mark the rows each member trained on.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    pool = np.arange(n) if train_indices is None else np.sort(np.asarray(train_indices, dtype=np.int64))
    if len(pool) == 0:
        raise EnsembleError('no training rows to fit ensemble members on')
    k = n_classes

    if strategy.kind == StrategyKind.Progressive:
        def progressive() -> Iterator[Member]:
            mask = _mask(n, pool)
            for t, snapshot in enumerate(staged_fit(spec, features[pool], labels[pool], k)):
                logging.debug('probing snapshot %d with %s', t + 1, probe.name)
                yield probe(snapshot, features, labels, t, train_rows=pool), mask
        return ProbeStream(
            members=progressive,
            n_rows=n,
            probe_name=probe.name,
            ordered=True,
            binary=probe.binary
        )

    plans = _independent_rows(strategy, pool)

    def run_member(index: int) -> Member:
        rows = plans[index]
        model = fit(_member_spec(strategy, spec, index), features[rows], labels[rows], k)
        logging.debug('probing %s member %d of %d', strategy.label(), index + 1, len(plans))
        return probe(model, features, labels, index, train_rows=rows), _mask(n, rows)

    def independent() -> Iterator[Member]:
        if workers <= 1 or len(plans) == 1:
            for i in range(len(plans)):
                yield run_member(i)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool_executor:
                # map delivers results in member order
                yield from pool_executor.map(run_member, range(len(plans)))

    return ProbeStream(
        members=independent,
        n_rows=n,
        probe_name=probe.name,
        n_members=len(plans),
        ordered=False,
        binary=probe.binary
    )


def member_count(
    strategy: EnsembleStrategy,
    n: int,
    spec: BaseModelSpec,
    features: Optional[np.ndarray] = None,
    labels: Optional[np.ndarray] = None
) -> int:
    """ Members a stream will hold; progressive counts need the data to run the training. """
    if strategy.kind == StrategyKind.None_:
        return 1
    elif strategy.kind == StrategyKind.Bootstrap:
        return strategy.n_models
    elif strategy.kind == StrategyKind.Kfold:
        return strategy.n_folds
    elif strategy.kind == StrategyKind.Loo:
        return n
    elif strategy.kind == StrategyKind.Progressive:
        if features is None or labels is None:
            raise EnsembleError('progressive member count depends on training; pass the features and labels')
        return sum(1 for _ in staged_fit(spec, features, labels))
    else:
        raise MatchException(strategy.kind)
