"""
Utilidades comunes del proyecto: configuración, logging y procedencia de resultados.
"""
import os
import json
import hashlib
import logging
from typing import Any, Dict, Optional
import yaml
from pathlib import Path
from dotenv import load_dotenv
from datetime import datetime
import pytz

load_dotenv()

SEED_ENV_VAR = "INTERACTING_BRIDGES_SEED"
LOG_DIR_ENV_VAR = "INTERACTING_BRIDGES_LOG_DIR"


########################################################################################
######################### Funciones de setting #########################################
########################################################################################


def load_config(file_path: str = "config.yaml") -> Dict[str, Any]:
    """
    Carga un archivo de configuración YAML y devuelve un diccionario.

    Args:
    - file_path (str): Ruta del archivo (absoluta, o relativa a la raíz del proyecto).

    Returns:
    - dict: Diccionario con la configuración cargada, vacío si no se encuentra.
    """
    current_dir = os.path.dirname(os.path.abspath(__file__))
    project_root = os.path.abspath(os.path.join(current_dir, '../..'))

    candidates = [
        file_path,
        os.path.join(project_root, file_path),
        os.path.join(project_root, 'scripts', file_path),
        os.path.join(current_dir, '..', file_path),
    ]
    if not os.path.isabs(file_path):
        candidates = candidates[1:]

    try:
        for file_route in candidates:
            if os.path.exists(file_route):
                with open(file_route, 'r') as file:
                    return yaml.safe_load(file) or {}

        logging.error(f"Configuration file {file_path} not found.")
        logging.error(f"Checked: {', '.join(candidates)}")

    except yaml.YAMLError as exc:
        logging.error(f"Error parsing configuration file {file_path}. Detail: {exc}")
    return {}


def resolve_log_dir(log_dir: Optional[str] = None, depth: int = 2) -> str:
    """
    Directorio de logs: el argumento, luego INTERACTING_BRIDGES_LOG_DIR y por último
    <raíz del proyecto>/log.
    """
    if log_dir:
        return str(log_dir)
    if os.getenv(LOG_DIR_ENV_VAR):
        return os.environ[LOG_DIR_ENV_VAR]
    root = Path(__file__).resolve().parents[depth]
    return str(root / 'log')


def setup_logging(log_name: str = 'interacting_bridges', log_level: int = logging.INFO,
                  log_filename: str = 'interacting_bridges.log', log_dir: Optional[str] = None) -> logging.Logger:
    """
    Logger con un único FileHandler por archivo, escrito en resolve_log_dir(log_dir).

    Args:
    - log_name (str): Nombre del logger.
    - log_level (int): Nivel de log.
    - log_filename (str): Archivo dentro del directorio de logs.
    - log_dir (str): Directorio explícito; si falta se usa la variable de entorno.

    Returns:
    - logger: Objeto logger configurado.
    """
    directory = resolve_log_dir(log_dir)
    os.makedirs(directory, exist_ok=True)
    log_path = os.path.abspath(os.path.join(directory, log_filename))

    logger = logging.getLogger(log_name)
    logger.setLevel(log_level)
    logger.propagate = False

    if not any(getattr(h, 'baseFilename', None) == log_path for h in logger.handlers):
        handler = logging.FileHandler(log_path)
        handler.setLevel(log_level)
        handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s - %(lineno)d'))
        logger.addHandler(handler)
    return logger


################################ settings #########################################################

config = load_config()
if 'logging' not in config:
    config['logging'] = {'utils': 'INFO'}


def _resolve_level(name: str) -> int:
    level = config['logging'].get(name, config['logging'].get('default', 'INFO'))
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    return level


_LOGGER_CACHE: Dict[tuple, logging.Logger] = {}


def get_logger(name: str = 'utils', level: Optional[int] = None, filename: Optional[str] = None,
               log_dir: Optional[str] = None) -> logging.Logger:
    """
    Obtener logger singleton por nombre para evitar handlers duplicados.
    El nivel por defecto sale de la sección 'logging' de config.yaml.
    """
    filename = filename or f"{name}.log"
    key = (name, filename, log_dir)
    if key in _LOGGER_CACHE:
        return _LOGGER_CACHE[key]

    resolved_level = level if level is not None else _resolve_level(name)
    logger_obj = setup_logging(log_name=name, log_level=resolved_level, log_filename=filename, log_dir=log_dir)
    _LOGGER_CACHE[key] = logger_obj
    return logger_obj


logger = get_logger('utils')


def get_section(name: str) -> Dict[str, Any]:
    """Devuelve una sección de config.yaml (dict vacío si no existe)."""
    section = config.get(name) or {}
    if not isinstance(section, dict):
        logger.error(f"Section '{name}' in config.yaml is not a mapping")
        return {}
    return dict(section)


####################################################################################################
################################        procedencia         ########################################
####################################################################################################


def canonical_json(obj: Any) -> str:
    """JSON canónico (claves ordenadas, sin espacios) para hashing."""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), default=str)


def config_hash(obj: Any) -> str:
    """SHA-256 del JSON canónico de una configuración ya resuelta."""
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()


def resolve_seed(flag_seed: Optional[int], config_seed: Optional[int]) -> int:
    """
    Resuelve la semilla con precedencia flag > variable de entorno > configuración.

    Raises:
        ValueError: si la variable de entorno no es un entero.
    """
    if flag_seed is not None:
        return int(flag_seed)

    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed not in (None, ""):
        try:
            return int(env_seed)
        except ValueError:
            logger.error(f"{SEED_ENV_VAR}={env_seed!r} is not an integer")
            raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")

    if config_seed is not None:
        return int(config_seed)
    return int(get_section('verification').get('seed', 0))


def get_current_timestamp() -> str:
    """
    Obtiene el timestamp actual (UTC) en formato ISO.
    """
    return datetime.now(pytz.utc).isoformat()


####################################################################################################
#################################          funciones sys           #################################
####################################################################################################


def ensure_dir_exists(directory) -> Path:
    """
    Asegura que un directorio exista, creándolo si es necesario.

    Raises:
        OSError: si el directorio no se puede crear.
    """
    path = Path(directory)
    try:
        if not path.exists():
            path.mkdir(parents=True, exist_ok=True)
            logger.info(f"Directory created: {path}")
        return path
    except OSError as e:
        logger.error(f"Error creating directory {path}: {e}")
        raise
