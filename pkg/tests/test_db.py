import pytest

from db import (
    create_tables,
    establecer_engine,
    establecer_session,
    inject_verification_run,
    retrieve_check_history,
    retrieve_verification_runs,
    session_scope,
)
from db.connection_db import DB_ENV_VAR, DEFAULT_DATABASE_URL, resolve_database_url
from interacting_bridges.rand_dist import RngStream
from interacting_bridges.verify_harness import Criterion, VerificationReport


@pytest.fixture
def engine(tmp_path):
    engine = establecer_engine(f"sqlite:///{tmp_path / 'store' / 'runs.sqlite'}")
    create_tables(engine)
    return engine


def sample_reports(p_value):
    return [
        VerificationReport('matsumoto_yor.anchored_1_1', "null check", {'min_p': p_value},
                           [Criterion('min_p', '>', 0.01)], [RngStream(7, 3)], runtime_s=0.5, reference='my_prop'),
        VerificationReport('matsumoto_yor.halved_1_1', "negative control", {'min_p': 0.2},
                           [Criterion('min_p', '<', 1e-6)], negative_control=True),
    ]


class TestRunStore:

    def test_creates_sqlite_directory(self, tmp_path, engine):
        assert (tmp_path / 'store' / 'runs.sqlite').exists()

    def test_inject_and_retrieve(self, engine):
        with session_scope(establecer_session(engine)) as session:
            run_id = inject_verification_run(session, 'matsumoto_yor', 'abc', 2 ** 64 - 1, sample_reports(0.3))
        with session_scope(establecer_session(engine)) as session:
            runs = retrieve_verification_runs(session)
        assert runs[0]['id'] == run_id
        assert runs[0]['seed'] == str(2 ** 64 - 1)
        assert runs[0]['n_checks'] == 2
        # the failing negative control does not count
        assert runs[0]['all_passed'] is True

    def test_newest_first_and_suite_filter(self, engine):
        with session_scope(establecer_session(engine)) as session:
            inject_verification_run(session, 'matsumoto_yor', 'abc', 1, sample_reports(0.3))
            inject_verification_run(session, 'restart', 'def', 2, sample_reports(0.001))
        with session_scope(establecer_session(engine)) as session:
            runs = retrieve_verification_runs(session)
            filtered = retrieve_verification_runs(session, suite_id='matsumoto_yor')
        assert [r['suite_id'] for r in runs] == ['restart', 'matsumoto_yor']
        assert runs[0]['all_passed'] is False
        assert [r['config_hash'] for r in filtered] == ['abc']

    def test_check_history(self, engine):
        with session_scope(establecer_session(engine)) as session:
            inject_verification_run(session, 'matsumoto_yor', 'abc', 1, sample_reports(0.3))
            inject_verification_run(session, 'matsumoto_yor', 'abc', 2, sample_reports(0.001))
        with session_scope(establecer_session(engine)) as session:
            history = retrieve_check_history(session, 'matsumoto_yor.anchored_1_1')
            missing = retrieve_check_history(session, 'nothing.here')
        assert [row['seed'] for row in history] == ['2', '1']
        assert history[0]['statistics'] == {'min_p': 0.001}
        assert history[0]['tolerances'] == {'min_p >': 0.01}
        assert history[0]['passed'] is False
        assert history[1]['runtime_s'] == 0.5
        assert history[0]['reference'] == 'my_prop'
        assert missing == []


class TestDatabaseUrl:

    def test_precedence(self, monkeypatch):
        assert resolve_database_url() == DEFAULT_DATABASE_URL
        monkeypatch.setenv(DB_ENV_VAR, 'sqlite:///env.sqlite')
        assert resolve_database_url() == 'sqlite:///env.sqlite'
        assert resolve_database_url('sqlite:///flag.sqlite') == 'sqlite:///flag.sqlite'
