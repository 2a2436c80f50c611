from trustprobe import constants
from trustprobe.base import ConfigError
from trustprobe.config import DataSource, config_hash, default_workers, init_config, load_config, parse_config
from trustprobe.dataset import ValidationKind
from trustprobe.models import Family
from trustprobe.noise import NoiseKind
from trustprobe.pipeline import Handler, SplitMode
from typing import Any, Dict

import pytest


def test_minimal_config() -> None:
    cfg = parse_config({'seed': 5})
    assert cfg.seed == 5
    assert cfg.out == 'out'
    assert cfg.noise is None
    assert cfg.dataset.source == DataSource.Blobs
    assert cfg.dataset.fractions == constants.DEFAULT_FRACTIONS
    assert cfg.pipeline.estimator == Family.Klm
    assert cfg.pipeline.budget == constants.DEFAULT_SEARCH_BUDGET
    assert cfg.detector == {'preset': 'small_loss'}


def test_full_config() -> None:
    cfg = parse_config({
        'seed': 9,
        'out': 'runs/a',
        'dataset': {'n': 200, 'n_classes': 2, 'priors': [0.8, 0.2], 'feature_map': 'random-fourier'},
        'noise': {'kind': 'rules', 'rate': 0.2},
        'detector': {'preset': 'aum'},
        'split': {'quantile': 0.3, 'mode': 'per_class'},
        'pipeline': {'handler': 'relabel', 'estimator': 'gbt', 'validation': 'clean', 'budget': [2, 3], 'grid': [0.0, 0.5]},
        'benchmark': {'detectors': ['aum', 'knn_edit'], 'noise': ['ncar'], 'handlers': ['filter', 'relabel']}
    })
    assert cfg.dataset.priors == (0.8, 0.2)
    assert cfg.noise is not None and cfg.noise.kind == NoiseKind.Rules and cfg.noise.rate == 0.2
    assert cfg.split.quantile == 0.3 and cfg.split.mode == SplitMode.PerClass
    assert cfg.pipeline.handler == Handler.Relabel
    assert cfg.pipeline.validation == ValidationKind.Clean
    assert cfg.pipeline.budget == (2, 3)
    assert cfg.pipeline.grid == (0.0, 0.5)
    assert cfg.benchmark.detectors == ('aum', 'knn_edit')
    assert cfg.benchmark.handlers == (Handler.Filter, Handler.Relabel)


def test_noise_rate_defaults() -> None:
    cfg = parse_config({'seed': 1, 'noise': {'kind': 'rules'}})
    assert cfg.noise is not None
    assert cfg.noise.rate == constants.DEFAULT_NOISE_RATE


@pytest.mark.parametrize(
    "doc",
    [
        {},
        {'seed': 1, 'colour': 'red'},
        {'seed': 1, 'dataset': {'size': 3}},
        {'seed': 1, 'dataset': {'source': 'parquet'}},
        {'seed': 1, 'dataset': {'source': 'csv'}},
        {'seed': 1, 'dataset': {'fractions': [0.5, 0.5]}},
        {'seed': 1, 'noise': {'rate': 1.5}},
        {'seed': 1, 'noise': {'kind': 'adversarial'}},
        {'seed': 1, 'detector': {'preset': 'nope'}},
        {'seed': 1, 'detector': {'model': 'klm', 'probe': 'margin'}},
        {'seed': 1, 'split': {'quantile': 1.5}},
        {'seed': 1, 'split': {'mode': 'diagonal'}},
        {'seed': 1, 'pipeline': {'budget': [0, 3]}},
        {'seed': 1, 'pipeline': {'grid': [0.15]}},
        {'seed': 1, 'pipeline': {'estimator': 'svm'}},
        {'seed': 1, 'benchmark': {'detectors': ['nope']}},
        {'seed': 1, 'benchmark': {'handlers': ['ignore']}}
    ]
)
def test_rejects_bad_config(doc: Dict[str, Any]) -> None:
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_load_config(tmp_path: Any) -> None:
    path = tmp_path / 'experiment.toml'
    path.write_text('seed = 42\nout = "elsewhere"\n\n[noise]\nkind = "ncar"\nrate = 0.25\n\n[detector]\npreset = "cleanlab"\n')
    cfg = load_config(str(path))
    assert cfg.seed == 42
    assert cfg.out == 'elsewhere'
    assert cfg.noise is not None and cfg.noise.rate == 0.25
    assert cfg.detector == {'preset': 'cleanlab'}


def test_load_config_errors(tmp_path: Any) -> None:
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'missing.toml'))
    broken = tmp_path / 'broken.toml'
    broken.write_text('seed = = 3\n')
    with pytest.raises(ConfigError):
        load_config(str(broken))


def test_config_hash() -> None:
    a = parse_config({'seed': 1, 'noise': {'rate': 0.2}})
    assert config_hash(a) == config_hash(parse_config({'seed': 1, 'noise': {'rate': 0.2}}))
    assert config_hash(a) != config_hash(parse_config({'seed': 2, 'noise': {'rate': 0.2}}))
    assert config_hash(a) != config_hash(parse_config({'seed': 1, 'noise': {'rate': 0.3}}))
    # Output location and parallelism do not change results
    assert config_hash(a) == config_hash(a.with_overrides(out='other', workers=4))


def test_with_overrides() -> None:
    cfg = parse_config({'seed': 1, 'out': 'a', 'workers': 2})
    same = cfg.with_overrides()
    assert same == cfg
    changed = cfg.with_overrides(seed=7, out='b')
    assert (changed.seed, changed.out, changed.workers) == (7, 'b', 2)


def test_default_workers(monkeypatch: Any) -> None:
    monkeypatch.delenv(constants.WORKERS_ENV_VAR, raising=False)
    assert default_workers() == 1
    monkeypatch.setenv(constants.WORKERS_ENV_VAR, '3')
    assert default_workers() == 3
    assert init_config(0).workers == 3
    for bad in ['0', 'many']:
        monkeypatch.setenv(constants.WORKERS_ENV_VAR, bad)
        with pytest.raises(ConfigError):
            default_workers()


def test_init_config_has_noise() -> None:
    cfg = init_config(11)
    assert cfg.seed == 11
    assert cfg.noise is not None and cfg.noise.kind == NoiseKind.Ncar
