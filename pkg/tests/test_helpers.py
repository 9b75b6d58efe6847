import json
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from scripts.utils.helpers import (
    ecdf_frame,
    path_frame,
    qq_frame,
    read_csv_with_provenance,
    to_builtin,
    write_csv_with_provenance,
    write_json,
    write_meta,
)
from scripts.utils.utils import LOG_DIR_ENV_VAR, config_hash, resolve_log_dir, resolve_seed, setup_logging


class TestToBuiltin:

    def test_numpy_values(self):
        out = to_builtin({'a': np.float64(1.5), 'b': np.arange(3), 'c': np.bool_(True), 'd': (np.int64(2),)})
        assert out == {'a': 1.5, 'b': [0, 1, 2], 'c': True, 'd': [2]}
        assert type(out['b'][0]) is int

    def test_non_finite_becomes_none(self):
        assert to_builtin([math.nan, math.inf, 1.0]) == [None, None, 1.0]


class TestTables:

    def test_ecdf(self):
        frame = ecdf_frame(np.array([3.0, 1.0, 2.0, np.nan]), cdf=stats.uniform(0, 4).cdf)
        assert frame['x'].tolist() == [1.0, 2.0, 3.0]
        assert frame['ecdf'].tolist() == pytest.approx([1 / 3, 2 / 3, 1.0])
        assert frame['model_cdf'].tolist() == pytest.approx([0.25, 0.5, 0.75])

    def test_ecdf_thinned(self):
        frame = ecdf_frame(np.arange(10_000, dtype=float), points=100)
        assert len(frame) <= 100
        assert frame['ecdf'].iloc[-1] == 1.0

    def test_qq_against_ppf_and_sample(self):
        samples = np.random.default_rng(1).standard_normal(1000)
        against_law = qq_frame(samples, stats.norm.ppf, points=50)
        against_sample = qq_frame(samples, samples, points=50)
        assert list(against_law.columns) == ['probability', 'reference', 'empirical']
        np.testing.assert_allclose(against_sample['reference'], against_sample['empirical'])

    def test_path_frame(self):
        frame = path_frame(np.array([0.0, 0.5]), np.array([[1.0, 2.0], [0.5, 1.5]]), 'X', replica=3)
        assert list(frame.columns) == ['u_or_t', 'vertex', 'value', 'series', 'replica']
        assert frame['vertex'].tolist() == [0, 1, 0, 1]
        assert frame['value'].tolist() == [1.0, 2.0, 0.5, 1.5]
        assert set(frame['series']) == {'X'}
        assert set(frame['replica']) == {3}


class TestWriters:

    def test_csv_round_trip(self, tmp_path):
        frame = pd.DataFrame({'replica': [0, 1], 'T0': [0.1, 1 / 3]})
        path = write_csv_with_provenance(frame, str(tmp_path / 'sub' / 'table.csv'), 'hash', 42)
        with open(path) as handle:
            assert handle.readline() == '# config_hash=hash,seed=42\n'
        again = read_csv_with_provenance(path)
        assert again['T0'].tolist() == [0.1, 1 / 3]

    def test_missing_csv(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_csv_with_provenance(str(tmp_path / 'nope.csv'))

    def test_json_document(self, tmp_path):
        path = write_json({'b': np.float64(2.0), 'a': [np.nan]}, str(tmp_path / 'out.json'), 'hash', 7)
        document = json.loads(open(path).read())
        assert document == {'config_hash': 'hash', 'seed': 7, 'data': {'a': [None], 'b': 2.0}}

    def test_meta_sidecar(self, tmp_path):
        meta = write_meta(str(tmp_path / 'reports.json'), 'hash', 7, {'runtime_s': 1.5})
        assert meta.endswith('reports.meta.json')
        document = json.loads(open(meta).read())
        assert document['runtime_s'] == 1.5
        assert 'timestamp' in document


class TestProvenance:

    def test_config_hash_ignores_key_order(self):
        assert config_hash({'a': 1, 'b': [1, 2]}) == config_hash({'b': [1, 2], 'a': 1})
        assert config_hash({'a': 1}) != config_hash({'a': 2})

    def test_seed_precedence(self, monkeypatch):
        assert resolve_seed(None, 4) == 4
        monkeypatch.setenv('INTERACTING_BRIDGES_SEED', '9')
        assert resolve_seed(None, 4) == 9
        assert resolve_seed(1, 4) == 1
        monkeypatch.setenv('INTERACTING_BRIDGES_SEED', 'abc')
        with pytest.raises(ValueError):
            resolve_seed(None, 4)


class TestLogging:

    def test_log_dir_from_environment(self, tmp_path):
        assert resolve_log_dir() == str(tmp_path / 'log')
        logger = setup_logging('bridges.env_dir', log_filename='env_dir.log')
        logger.info("written")
        logger.handlers[0].flush()
        assert 'written' in (tmp_path / 'log' / 'env_dir.log').read_text()

    def test_explicit_dir_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv(LOG_DIR_ENV_VAR, str(tmp_path / 'ignored'))
        logger = setup_logging('bridges.explicit_dir', log_filename='explicit.log', log_dir=str(tmp_path / 'mine'))
        assert (tmp_path / 'mine' / 'explicit.log').exists()
        assert not (tmp_path / 'ignored').exists()
        setup_logging('bridges.explicit_dir', log_filename='explicit.log', log_dir=str(tmp_path / 'mine'))
        assert len(logger.handlers) == 1

    def test_project_default(self, monkeypatch):
        monkeypatch.delenv(LOG_DIR_ENV_VAR)
        assert resolve_log_dir().endswith('log')
