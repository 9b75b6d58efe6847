"""
Módulo para el almacén de corridas de verificación.
Facilita la conexión, la inserción y la consulta del historial.
"""

# Importar modelos ORM
from .models_orm import (
    Base,
    VerificationRun,
    CheckResult,
    create_tables
)

# Importar funciones de operaciones de base de datos
from .operaciones_db import (
    inject_verification_run,
    retrieve_verification_runs,
    retrieve_check_history
)

# Importar conexión a base de datos
from .connection_db import (
    DB_ENV_VAR,
    establecer_engine,
    establecer_session,
    session_scope
)

__all__ = [
    # Modelos ORM
    'Base',
    'VerificationRun',
    'CheckResult',
    'create_tables',

    # Operaciones de base de datos
    'inject_verification_run',
    'retrieve_verification_runs',
    'retrieve_check_history',

    # Conexión a base de datos
    'DB_ENV_VAR',
    'establecer_engine',
    'establecer_session',
    'session_scope'
]
