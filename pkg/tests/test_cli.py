import json
import math
import os

import pandas as pd
import pytest

from interacting_bridges.beta_potential import nu_log_density
from interacting_bridges.cli import (
    DEFAULT_REPLICAS,
    EXIT_OK,
    EXIT_USAGE,
    dispatch,
    parse_config,
    read_beta_samples,
    read_x_paths,
)
from interacting_bridges.errors import ConfigError
from interacting_bridges.rand_dist import ig_density
from interacting_bridges.sde_engine import default_dt
from scripts.utils.helpers import read_csv_with_provenance

ONE_VERTEX = {'n': 1, 'edges': [], 'theta': [1.0], 'eta': [1.0]}


@pytest.fixture
def write_config(tmp_path):
    def write(document, name='experiment.json'):
        path = tmp_path / name
        path.write_text(json.dumps(document))
        return str(path)
    return write


def first_line(path):
    with open(path) as handle:
        return handle.readline()


class TestParseConfig:

    def test_defaults(self):
        config = parse_config(None)
        assert config.model.n == 2
        assert config.steps.dt == pytest.approx(default_dt(config.model))
        assert config.replicas == DEFAULT_REPLICAS
        assert config.seed is None

    def test_negative_step_names_key(self, write_config):
        with pytest.raises(ConfigError) as info:
            parse_config(write_config({'steps': {'dt': -1e-3}}))
        assert info.value.key == 'steps.dt'
        assert 'steps.dt' in str(info.value)

    def test_asymmetric_conductances(self, write_config):
        document = {'model': {'W': [[0.0, 1.0], [0.5, 0.0]], 'theta': [1.0, 1.0], 'eta': [1.0, 1.0]}}
        with pytest.raises(ConfigError, match="W must be symmetric"):
            parse_config(write_config(document))

    def test_unknown_keys(self, write_config):
        with pytest.raises(ConfigError) as info:
            parse_config(write_config({'stepz': {}}))
        assert info.value.key == 'stepz'
        with pytest.raises(ConfigError) as info:
            parse_config(write_config({'steps': {'dtt': 1.0}}))
        assert info.value.key == 'steps.dtt'

    def test_seed_range(self, write_config):
        with pytest.raises(ConfigError):
            parse_config(write_config({'seed': -1}))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(str(tmp_path / 'missing.json'))

    def test_yaml_document(self, tmp_path):
        path = tmp_path / 'experiment.yaml'
        path.write_text("model:\n  n: 1\n  edges: []\n  theta: [2.0]\n  eta: [0.5]\nseed: 3\n")
        config = parse_config(str(path))
        assert config.model.theta[0] == 2.0
        assert config.seed == 3


class TestDispatch:

    def test_unknown_subcommand(self):
        assert dispatch(['frobnicate']) == EXIT_USAGE

    def test_density_ig(self, capsys):
        assert dispatch(['density', 'ig', '--t', '0.5', '--theta', '1', '--eta', '1']) == EXIT_OK
        assert json.loads(capsys.readouterr().out) == pytest.approx(ig_density(0.5, 1.0, 1.0), rel=1e-15)

    def test_density_nu(self, capsys):
        assert dispatch(['density', 'nu', '--beta', '1.0,1.5']) == EXIT_OK
        expected = math.exp(nu_log_density(parse_config(None).model, [1.0, 1.5]))
        assert json.loads(capsys.readouterr().out) == pytest.approx(expected, rel=1e-15)

    def test_density_missing_parameter(self):
        assert dispatch(['density', 'gig', '--t', '1.0', '--a', '1.0', '--b', '1.0']) == EXIT_USAGE

    def test_nonpositive_replicas(self, tmp_path):
        assert dispatch(['simulate-x', '--replicas', '0', '--out', str(tmp_path / 'out')]) == EXIT_USAGE


class TestSimulate:

    def test_simulate_x_writes_provenance(self, tmp_path, write_config):
        config = write_config({'model': ONE_VERTEX, 'steps': {'dt': 1e-3, 't_max': 20.0}, 'replicas': 50,
                               'seed': 3})
        out = tmp_path / 'run'
        code = dispatch(['simulate-x', '--config', config, '--out', str(out), '--format', 'csv',
                         '--dump-paths', '2'])
        assert code == EXIT_OK
        assert first_line(out / 'hitting_times.csv').startswith('# config_hash=')
        assert first_line(out / 'hitting_times.csv').rstrip().endswith(',seed=3')
        frame = read_csv_with_provenance(str(out / 'hitting_times.csv'))
        assert list(frame.columns) == ['replica', 'vertex', 'T0']
        assert len(frame) == 50
        assert (out / 'hitting_times.meta.json').exists()
        paths = read_csv_with_provenance(str(out / 'paths.csv'))
        assert list(paths.columns) == ['u_or_t', 'vertex', 'value', 'series', 'replica']
        assert set(paths['series']) == {'X'}
        assert set(paths['replica']) == {0, 1}
        hitting = read_csv_with_provenance(str(out / 'paths_hitting_times.csv'))
        assert list(hitting.columns) == ['replica', 'vertex', 'T0']
        for replica, rows in paths.groupby('replica'):
            T0 = float(hitting.loc[hitting['replica'] == replica, 'T0'].iloc[0])
            assert rows['u_or_t'].iloc[-1] >= T0
            assert rows['value'].iloc[-1] == 0.0
            assert (rows['value'].iloc[:-1] > 0).all()

    def test_transform_of_dumped_paths(self, tmp_path, write_config):
        config = write_config({'model': ONE_VERTEX, 'steps': {'dt': 1e-3, 't_max': 20.0, 'du': 1e-2,
                                                              'u_max': 1.0}, 'replicas': 10, 'seed': 4})
        dump = tmp_path / 'dump'
        assert dispatch(['simulate-x', '--config', config, '--out', str(dump), '--dump-paths', '3']) == EXIT_OK
        out = tmp_path / 'run'
        assert dispatch(['transform', '--config', config, '--out', str(out),
                         '--input', str(dump / 'paths.csv')]) == EXIT_OK
        frame = read_csv_with_provenance(str(out / 'lamperti_paths.csv'))
        assert set(frame['series']) == {'rho', 'T', 'Bhat'}
        assert set(frame['replica']) == {0, 1, 2}
        start = frame[frame['u_or_t'] == 0.0]
        assert start.loc[start['series'] == 'Bhat', 'value'].abs().max() == 0.0
        assert start.loc[start['series'] == 'T', 'value'].abs().max() == 0.0
        with open(out / 'lamperti_paths.json') as handle:
            assert json.load(handle)['seed'] == 4
        meta = json.loads((out / 'lamperti_paths.meta.json').read_text())
        assert meta['input'] == str(dump / 'paths.csv')

    def test_transform_uses_stored_paths(self, tmp_path, write_config):
        config = write_config({'model': ONE_VERTEX, 'steps': {'dt': 1e-3, 't_max': 20.0, 'du': 1e-2,
                                                              'u_max': 0.5}, 'replicas': 5})
        dump = tmp_path / 'dump'
        dispatch(['simulate-x', '--config', config, '--out', str(dump), '--dump-paths', '2', '--seed', '1'])
        for seed in ('2', '3'):
            assert dispatch(['transform', '--config', config, '--out', str(tmp_path / seed), '--seed', seed,
                             '--input', str(dump / 'paths.csv'), '--format', 'csv']) == EXIT_OK
        first = read_csv_with_provenance(str(tmp_path / '2' / 'lamperti_paths.csv'))
        second = read_csv_with_provenance(str(tmp_path / '3' / 'lamperti_paths.csv'))
        pd.testing.assert_frame_equal(first, second)

    def test_read_paths_json_and_inferred_absorption(self, tmp_path, write_config):
        config = write_config({'model': ONE_VERTEX, 'steps': {'dt': 1e-3, 't_max': 20.0}, 'replicas': 5,
                               'seed': 6})
        dump = tmp_path / 'dump'
        dispatch(['simulate-x', '--config', config, '--out', str(dump), '--dump-paths', '2'])
        stored = read_x_paths(str(dump / 'paths.json'))
        assert sorted(stored) == [0, 1]
        for path in stored.values():
            assert path.is_absorbed
            assert path.values[0, 0] == 1.0
            assert path.grid[-1] >= path.absorption[0] > path.grid[-2]

        os.remove(dump / 'paths_hitting_times.csv')
        inferred = read_x_paths(str(dump / 'paths.csv'))
        for replica, path in inferred.items():
            assert path.absorption[0] == path.grid[-1]
            assert path.absorption[0] >= stored[replica].absorption[0]

    def test_transform_needs_input(self, tmp_path):
        assert dispatch(['transform', '--out', str(tmp_path / 'run')]) == EXIT_USAGE
        assert dispatch(['transform', '--out', str(tmp_path / 'run'),
                         '--input', str(tmp_path / 'missing.csv')]) == EXIT_USAGE


    def test_sample_beta_mcmc(self, tmp_path):
        out = tmp_path / 'run'
        code = dispatch(['sample-beta', 'mcmc', '--replicas', '100', '--seed', '8', '--out', str(out),
                         '--threads', '1'])
        assert code == EXIT_OK
        betas = read_beta_samples(str(out / 'beta_mcmc.csv'), 2)
        assert betas.shape == (100, 2)
        assert read_beta_samples(str(out / 'beta_mcmc.json'), 2).tolist() == betas.tolist()


class TestVerify:

    def test_reruns_are_identical(self, tmp_path, write_config):
        config = write_config({'seed': 11, 'verification': {'n_mixture': 30}})
        for name in ('a', 'b'):
            code = dispatch(['verify', 'mixture_identities', '--config', config, '--out', str(tmp_path / name),
                             '--threads', '1'])
            assert code == EXIT_OK
        first = (tmp_path / 'a' / 'reports.json').read_bytes()
        assert first == (tmp_path / 'b' / 'reports.json').read_bytes()
        document = json.loads(first)
        assert document['seed'] == 11
        assert [r['check_id'] for r in document['data']] == ['mixture_identities.random',
                                                             'mixture_identities.decoupled',
                                                             'mixture_identities.perturbed_drift']
        assert {r['reference'] for r in document['data']} == {'lemma2'}
        assert first_line(tmp_path / 'a' / 'statistics.csv').startswith('# config_hash=')
        meta = json.loads((tmp_path / 'a' / 'reports.meta.json').read_text())
        assert 'timestamp' in meta and 'runtime_by_check' in meta

    def test_seed_precedence(self, tmp_path, write_config, monkeypatch):
        config = write_config({'seed': 1, 'verification': {'n_mixture': 10}})
        monkeypatch.setenv('INTERACTING_BRIDGES_SEED', '99')
        dispatch(['verify', 'mixture_identities', '--config', config, '--out', str(tmp_path / 'env')])
        dispatch(['verify', 'mixture_identities', '--config', config, '--out', str(tmp_path / 'flag'),
                  '--seed', '5'])
        assert json.loads((tmp_path / 'env' / 'reports.json').read_text())['seed'] == 99
        assert json.loads((tmp_path / 'flag' / 'reports.json').read_text())['seed'] == 5

    def test_unknown_verification_setting(self, tmp_path, write_config):
        config = write_config({'verification': {'n_unicorns': 3}})
        assert dispatch(['verify', 'mixture_identities', '--config', config,
                         '--out', str(tmp_path / 'out')]) == EXIT_USAGE

    def test_history_from_database(self, tmp_path, write_config, capsys):
        config = write_config({'seed': 12, 'verification': {'n_mixture': 10}})
        url = f"sqlite:///{tmp_path / 'runs.sqlite'}"
        assert dispatch(['verify', 'mixture_identities', '--config', config, '--out', str(tmp_path / 'out'),
                         '--db', url]) == EXIT_OK
        capsys.readouterr()
        assert dispatch(['history', '--db', url]) == EXIT_OK
        runs = json.loads(capsys.readouterr().out)
        assert runs[0]['suite_id'] == 'mixture_identities'
        assert runs[0]['seed'] == '12'
        assert dispatch(['history', '--db', url, '--check', 'mixture_identities.random']) == EXIT_OK
        history = json.loads(capsys.readouterr().out)
        assert history[0]['passed'] is True
        assert 'max_residual' in history[0]['statistics']
        assert os.path.exists(tmp_path / 'runs.sqlite')

    def test_alias_matches_suite(self, tmp_path, write_config):
        config = write_config({'seed': 13, 'verification': {'n_mixture': 20}})
        for suite, name in (('lemma2', 'alias'), ('mixture_identities', 'named')):
            assert dispatch(['verify', suite, '--config', config, '--out', str(tmp_path / name)]) == EXIT_OK
        alias = json.loads((tmp_path / 'alias' / 'reports.json').read_text())
        named = json.loads((tmp_path / 'named' / 'reports.json').read_text())
        assert alias['data'] == named['data']
        meta = json.loads((tmp_path / 'alias' / 'reports.meta.json').read_text())
        assert meta['suite'] == 'mixture_identities'
