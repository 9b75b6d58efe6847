"""
Módulo para establecer la conexión al almacén de corridas de verificación.
"""
import os

from contextlib import contextmanager
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine, make_url
from sqlalchemy.orm import sessionmaker, Session

from scripts.utils.utils import ensure_dir_exists, get_logger

DB_ENV_VAR = "INTERACTING_BRIDGES_DB"
DEFAULT_DATABASE_URL = "sqlite:///runs/verification.sqlite"

# Configurar logger
logger = get_logger('connection_db', filename='connection_db.log')


def resolve_database_url(database_url=None):
    """URL explícita, luego INTERACTING_BRIDGES_DB, luego el sqlite por defecto."""
    return database_url or os.getenv(DB_ENV_VAR) or DEFAULT_DATABASE_URL


def establecer_engine(database_url=None) -> Engine:
    """
    Establece y retorna un engine de SQLAlchemy.

    Args:
        database_url (str): URL de conexión. Si es None se usa la variable de
                            entorno INTERACTING_BRIDGES_DB o el sqlite por defecto.

    Returns:
        Engine: Engine de SQLAlchemy
    """
    database_url = resolve_database_url(database_url)
    try:
        url = make_url(database_url)
        # sqlite necesita que exista el directorio del archivo
        if url.get_backend_name() == 'sqlite' and url.database not in (None, '', ':memory:'):
            ensure_dir_exists(os.path.dirname(os.path.abspath(url.database)))

        engine = create_engine(database_url)
        logger.info(f"Engine established: {url.render_as_string(hide_password=True)}")
        return engine

    except Exception as e:
        logger.error(f"Error establishing engine: {e}")
        raise


def establecer_session(engine: Engine) -> Session:
    """
    Establece y retorna una sesión de SQLAlchemy.

    Args:
        engine (Engine): Engine de SQLAlchemy

    Returns:
        Session: Sesión de SQLAlchemy
    """
    try:
        SessionMaker = sessionmaker(bind=engine)
        session = SessionMaker()
        logger.info("Session established")
        return session

    except Exception as e:
        logger.error(f"Error establishing session: {e}")
        raise


@contextmanager
def session_scope(session: Session):
    """
    Context manager to provide a transactional scope around a series of operations.
    Accepts an existing session and ensures proper close/rollback semantics.
    """
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()
