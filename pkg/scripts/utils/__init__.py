"""
Módulo para utilidades y funciones comunes.
Contiene configuración, logging, procedencia y emisión de tablas.
"""

# Utils imports are optional to avoid hard failures when dependencies (e.g., yaml)
# are missing in lightweight environments.
try:
    from .utils import (
        load_config,
        setup_logging,
        resolve_log_dir,
        get_logger,
        get_section,
        config_hash,
        resolve_seed,
        get_current_timestamp,
        ensure_dir_exists
    )
    from .helpers import (
        to_builtin,
        ecdf_frame,
        qq_frame,
        path_frame,
        write_csv_with_provenance,
        write_json,
        write_meta
    )

    __all__ = [
        'load_config',
        'setup_logging',
        'resolve_log_dir',
        'get_logger',
        'get_section',
        'config_hash',
        'resolve_seed',
        'get_current_timestamp',
        'ensure_dir_exists',
        'to_builtin',
        'ecdf_frame',
        'qq_frame',
        'path_frame',
        'write_csv_with_provenance',
        'write_json',
        'write_meta'
    ]
except ImportError:
    __all__ = []
