from trustprobe import benchmark
from trustprobe.base import PipelineError
from trustprobe.benchmark import Cell, cells, run_benchmark
from trustprobe.config import ExperimentConfig, parse_config
from typing import Any, Dict, List

import pandas as pd
import pytest


def two_cell_config(tmp_path: Any) -> ExperimentConfig:
    return parse_config({
        'seed': 5,
        'out': str(tmp_path),
        'workers': 1,
        'benchmark': {'detectors': ['small_loss', 'knn_edit'], 'noise': ['ncar']}
    })


def test_cells_nest_detectors_outermost(tmp_path: Any) -> None:
    labels = [c.label() for c in cells(two_cell_config(tmp_path))]
    assert labels == ['small_loss/ncar/noisy/filter', 'knn_edit/ncar/noisy/filter']


@pytest.mark.parametrize("error", [ValueError('bad shape'), PipelineError('empty train split'), ZeroDivisionError()])
def test_a_failing_cell_does_not_stop_the_rest(tmp_path: Any, monkeypatch: Any, error: Exception) -> None:
    def fake_run_cell(cfg: ExperimentConfig, cell: Cell) -> List[Dict[str, Any]]:
        if cell.detector == 'small_loss':
            raise error
        return [{'row_kind': 'detector', 'detector': cell.detector, 'seed': cfg.seed}]

    monkeypatch.setattr(benchmark, 'run_cell', fake_run_cell)
    outcome = run_benchmark(two_cell_config(tmp_path))
    assert not outcome.ok
    assert [cell.detector for cell, _ in outcome.failures] == ['small_loss']
    assert [row['detector'] for row in outcome.rows] == ['knn_edit']
    frame = pd.read_csv(outcome.path)
    assert frame['detector'].tolist() == ['knn_edit']


def test_unexpected_errors_name_their_type(tmp_path: Any, monkeypatch: Any) -> None:
    def fake_run_cell(cfg: ExperimentConfig, cell: Cell) -> List[Dict[str, Any]]:
        raise KeyError('missing column')

    monkeypatch.setattr(benchmark, 'run_cell', fake_run_cell)
    outcome = run_benchmark(two_cell_config(tmp_path))
    assert len(outcome.failures) == 2
    assert all(message.startswith('KeyError') for _, message in outcome.failures)
    assert outcome.rows == []
