from dataclasses import dataclass, field, replace
from enum import Enum, unique
from trustprobe import constants
from trustprobe.base import ConfigError, TrustProbeError, stable_hash
from trustprobe.dataset import CsvSchema, ValidationKind
from trustprobe.detector import PRESET_LOOKUP, build_detector
from trustprobe.features import FeatureKind, parse_feature_kind
from trustprobe.models import Family, parse_family
from trustprobe.noise import NoiseKind, NoiseSpec
from trustprobe.pipeline import HANDLER_LOOKUP, SPLIT_MODE_LOOKUP, Handler, SplitConfig, SplitMode
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, TypeVar

import os
import toml

E = TypeVar('E', bound=Enum)


@unique
class DataSource(Enum):
    Csv = 'csv'
    Blobs = 'blobs'


DATA_SOURCE_LOOKUP: Dict[str, DataSource] = {s.value: s for s in DataSource}
NOISE_KIND_LOOKUP: Dict[str, NoiseKind] = {k.value: k for k in NoiseKind}
VALIDATION_KIND_LOOKUP: Dict[str, ValidationKind] = {k.value: k for k in ValidationKind}


@dataclass(frozen=True)
class DatasetConfig:
    source: DataSource = DataSource.Blobs
    path: Optional[str] = None
    schema: CsvSchema = field(default_factory=CsvSchema)
    # Synthetic blobs with labeling rules
    n: int = 600
    n_classes: int = 3
    separation: float = 3.0
    priors: Optional[Tuple[float, ...]] = None
    n_rules: int = 5
    feature_map: FeatureKind = FeatureKind.Standardize
    fractions: Tuple[float, float, float] = constants.DEFAULT_FRACTIONS


@dataclass(frozen=True)
class NoiseConfig:
    kind: NoiseKind = NoiseKind.Ncar
    rate: float = constants.DEFAULT_NOISE_RATE
    allow_self_flips: bool = False

    def spec(self, seed: int) -> NoiseSpec:
        return NoiseSpec(kind=self.kind, seed=seed, rate=self.rate, allow_self_flips=self.allow_self_flips)


@dataclass(frozen=True)
class PipelineConfig:
    handler: Handler = Handler.Filter
    estimator: Family = Family.Klm
    validation: ValidationKind = ValidationKind.Noisy
    # Search the quantile grid and hyperparameters; otherwise use [split] as given
    search: bool = True
    budget: Tuple[int, int] = constants.DEFAULT_SEARCH_BUDGET
    grid: Tuple[float, ...] = tuple(constants.QUANTILE_GRID)
    refine_rounds: int = 1
    keep_fraction: float = 0.9


@dataclass(frozen=True)
class BenchmarkConfig:
    detectors: Tuple[str, ...] = ('small_loss',)
    noise: Tuple[NoiseKind, ...] = (NoiseKind.Ncar, NoiseKind.Rules)
    validation: Tuple[ValidationKind, ...] = (ValidationKind.Noisy,)
    handlers: Tuple[Handler, ...] = (Handler.Filter,)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out: str = 'out'
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    # No noise section means the labels are used as they are
    noise: Optional[NoiseConfig] = None
    detector: Mapping[str, Any] = field(default_factory=lambda: {'preset': 'small_loss'})
    split: SplitConfig = field(default_factory=lambda: SplitConfig(0.1))
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    workers: int = 1

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None, workers: Optional[int] = None) -> 'ExperimentConfig':
        return replace(
            self,
            seed=self.seed if seed is None else seed,
            out=self.out if out is None else out,
            workers=self.workers if workers is None else workers
        )


def default_workers() -> int:
    raw = os.environ.get(constants.WORKERS_ENV_VAR)
    if raw is None or raw.strip() == '':
        return 1
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f'{constants.WORKERS_ENV_VAR} must be an integer, got {raw!r}')
    if workers < 1:
        raise ConfigError(f'{constants.WORKERS_ENV_VAR} must be positive, got {workers}')
    return workers


def _lookup(section: str, key: str, value: Any, parse: Callable[[str], E]) -> E:
    try:
        return parse(str(value))
    except TrustProbeError as e:
        raise ConfigError(f'[{section}] {key}: {e}') from e


def _choice(table: Mapping[str, Any], name: str) -> Callable[[str], Any]:
    def parse(value: str) -> Any:
        found = table.get(value)
        if found is None:
            raise ConfigError(f'unknown {name} {value!r}, expected one of {sorted(table)}')
        return found
    return parse


def _table(doc: Mapping[str, Any], name: str, allowed: List[str]) -> Dict[str, Any]:
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f'[{name}] must be a table')
    unknown = set(section) - set(allowed)
    if len(unknown) > 0:
        raise ConfigError(f'[{name}] has unknown keys {sorted(unknown)}')
    return dict(section)


def _parse_dataset(doc: Mapping[str, Any]) -> DatasetConfig:
    section = _table(doc, 'dataset', [
        'source', 'path', 'label', 'clean_label', 'id_column', 'rule_prefix', 'categorical',
        'n_classes', 'n', 'separation', 'priors', 'n_rules', 'feature_map', 'fractions'
    ])
    source = _lookup('dataset', 'source', section.get('source', 'blobs'), _choice(DATA_SOURCE_LOOKUP, 'data source'))
    path = section.get('path')
    if source == DataSource.Csv and path is None:
        raise ConfigError('[dataset] source = "csv" needs a path')
    defaults = CsvSchema()
    schema = CsvSchema(
        label=section.get('label', defaults.label),
        clean_label=section.get('clean_label', defaults.clean_label),
        id_column=section.get('id_column', defaults.id_column),
        rule_prefix=section.get('rule_prefix', defaults.rule_prefix),
        categorical=tuple(section.get('categorical', ())),
        n_classes=section.get('n_classes') if source == DataSource.Csv else None
    )
    fractions = tuple(float(f) for f in section.get('fractions', constants.DEFAULT_FRACTIONS))
    if len(fractions) != 3:
        raise ConfigError(f'[dataset] fractions needs 3 entries, got {len(fractions)}')
    priors = section.get('priors')
    return DatasetConfig(
        source=source,
        path=path,
        schema=schema,
        n=int(section.get('n', 600)),
        n_classes=int(section.get('n_classes', 3)),
        separation=float(section.get('separation', 3.0)),
        priors=None if priors is None else tuple(float(p) for p in priors),
        n_rules=int(section.get('n_rules', 5)),
        feature_map=_lookup('dataset', 'feature_map', section.get('feature_map', 'standardize'), parse_feature_kind),
        fractions=(fractions[0], fractions[1], fractions[2])
    )


def _parse_noise(doc: Mapping[str, Any]) -> Optional[NoiseConfig]:
    if 'noise' not in doc:
        return None
    section = _table(doc, 'noise', ['kind', 'rate', 'allow_self_flips'])
    rate = float(section.get('rate', constants.DEFAULT_NOISE_RATE))
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f'[noise] rate must lie in [0, 1], got {rate}')
    return NoiseConfig(
        kind=_lookup('noise', 'kind', section.get('kind', 'ncar'), _choice(NOISE_KIND_LOOKUP, 'noise kind')),
        rate=rate,
        allow_self_flips=bool(section.get('allow_self_flips', False))
    )


def _parse_split(doc: Mapping[str, Any]) -> SplitConfig:
    section = _table(doc, 'split', ['quantile', 'mode'])
    mode: SplitMode = _lookup('split', 'mode', section.get('mode', 'global'), _choice(SPLIT_MODE_LOOKUP, 'split mode'))
    try:
        return SplitConfig(quantile=float(section.get('quantile', 0.1)), mode=mode)
    except TrustProbeError as e:
        raise ConfigError(f'[split] {e}') from e


def _parse_pipeline(doc: Mapping[str, Any]) -> PipelineConfig:
    section = _table(doc, 'pipeline', [
        'handler', 'estimator', 'validation', 'search', 'budget', 'grid', 'refine_rounds', 'keep_fraction'
    ])
    budget = [int(b) for b in section.get('budget', constants.DEFAULT_SEARCH_BUDGET)]
    if len(budget) != 2 or min(budget) < 1:
        raise ConfigError(f'[pipeline] budget must be two positive integers, got {budget}')
    grid = tuple(float(q) for q in section.get('grid', constants.QUANTILE_GRID))
    for q in grid:
        if not any(abs(q - g) < 1e-12 for g in constants.QUANTILE_GRID):
            raise ConfigError(f'[pipeline] grid value {q} is not on {constants.QUANTILE_GRID}')
    return PipelineConfig(
        handler=_lookup('pipeline', 'handler', section.get('handler', 'filter'), _choice(HANDLER_LOOKUP, 'handler')),
        estimator=_lookup('pipeline', 'estimator', section.get('estimator', 'klm'), parse_family),
        validation=_lookup('pipeline', 'validation', section.get('validation', 'noisy'), _choice(VALIDATION_KIND_LOOKUP, 'validation kind')),
        search=bool(section.get('search', True)),
        budget=(budget[0], budget[1]),
        grid=grid,
        refine_rounds=int(section.get('refine_rounds', 1)),
        keep_fraction=float(section.get('keep_fraction', 0.9))
    )


def _parse_benchmark(doc: Mapping[str, Any]) -> BenchmarkConfig:
    section = _table(doc, 'benchmark', ['detectors', 'noise', 'validation', 'handlers'])
    detectors = tuple(str(d) for d in section.get('detectors', ('small_loss',)))
    for name in detectors:
        if name not in PRESET_LOOKUP:
            raise ConfigError(f'[benchmark] unknown preset {name!r}, expected one of {sorted(PRESET_LOOKUP)}')
    noise_parser = _choice(NOISE_KIND_LOOKUP, 'noise kind')
    validation_parser = _choice(VALIDATION_KIND_LOOKUP, 'validation kind')
    handler_parser = _choice(HANDLER_LOOKUP, 'handler')
    return BenchmarkConfig(
        detectors=detectors,
        noise=tuple(_lookup('benchmark', 'noise', n, noise_parser) for n in section.get('noise', ('ncar', 'rules'))),
        validation=tuple(_lookup('benchmark', 'validation', v, validation_parser) for v in section.get('validation', ('noisy',))),
        handlers=tuple(_lookup('benchmark', 'handlers', h, handler_parser) for h in section.get('handlers', ('filter',)))
    )


TOP_LEVEL_KEYS = frozenset({'seed', 'out', 'workers', 'dataset', 'noise', 'detector', 'split', 'pipeline', 'benchmark'})


def parse_config(doc: Mapping[str, Any]) -> ExperimentConfig:
    unknown = set(doc) - TOP_LEVEL_KEYS
    if len(unknown) > 0:
        raise ConfigError(f'unknown top-level keys {sorted(unknown)}')
    if 'seed' not in doc:
        raise ConfigError('the master seed is mandatory: add `seed = <int>` at the top level')
    seed = int(doc['seed'])
    detector = dict(doc.get('detector', {'preset': 'small_loss'}))
    try:
        # Resolve once so bad blocks fail at load time
        build_detector(detector, seed)
    except TrustProbeError as e:
        raise ConfigError(f'[detector] {e}') from e
    return ExperimentConfig(
        seed=seed,
        out=str(doc.get('out', 'out')),
        dataset=_parse_dataset(doc),
        noise=_parse_noise(doc),
        detector=detector,
        split=_parse_split(doc),
        pipeline=_parse_pipeline(doc),
        benchmark=_parse_benchmark(doc),
        workers=int(doc.get('workers', default_workers()))
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        doc = toml.load(path)
    except FileNotFoundError:
        raise ConfigError(f'config file {path} does not exist')
    except toml.TomlDecodeError as e:
        raise ConfigError(f'{path}: {e}') from e
    try:
        return parse_config(doc)
    except ConfigError as e:
        raise ConfigError(f'{path}: {e}') from e


def config_to_json(cfg: ExperimentConfig) -> Dict[str, Any]:
    """ Canonical rendering of everything that can change results; `out` and `workers` cannot. """
    ds = cfg.dataset
    return {
        'seed': cfg.seed,
        'dataset': {
            'source': ds.source.value,
            'path': ds.path,
            'schema': {
                'label': ds.schema.label,
                'clean_label': ds.schema.clean_label,
                'id_column': ds.schema.id_column,
                'rule_prefix': ds.schema.rule_prefix,
                'categorical': list(ds.schema.categorical),
                'n_classes': ds.schema.n_classes
            },
            'n': ds.n,
            'n_classes': ds.n_classes,
            'separation': ds.separation,
            'priors': None if ds.priors is None else list(ds.priors),
            'n_rules': ds.n_rules,
            'feature_map': ds.feature_map.value,
            'fractions': list(ds.fractions)
        },
        'noise': None if cfg.noise is None else {
            'kind': cfg.noise.kind.value,
            'rate': cfg.noise.rate,
            'allow_self_flips': cfg.noise.allow_self_flips
        },
        'detector': dict(cfg.detector),
        'split': {'quantile': cfg.split.quantile, 'mode': cfg.split.mode.value},
        'pipeline': {
            'handler': cfg.pipeline.handler.value,
            'estimator': cfg.pipeline.estimator.value,
            'validation': cfg.pipeline.validation.value,
            'search': cfg.pipeline.search,
            'budget': list(cfg.pipeline.budget),
            'grid': list(cfg.pipeline.grid),
            'refine_rounds': cfg.pipeline.refine_rounds,
            'keep_fraction': cfg.pipeline.keep_fraction
        },
        'benchmark': {
            'detectors': list(cfg.benchmark.detectors),
            'noise': [n.value for n in cfg.benchmark.noise],
            'validation': [v.value for v in cfg.benchmark.validation],
            'handlers': [h.value for h in cfg.benchmark.handlers]
        }
    }


def config_hash(cfg: ExperimentConfig) -> str:
    return stable_hash(config_to_json(cfg))


def init_config(seed: int) -> ExperimentConfig:
    """ Small blobs experiment with 30% uniform noise, used when no file is given. """
    return ExperimentConfig(seed=seed, noise=NoiseConfig(), workers=default_workers())

