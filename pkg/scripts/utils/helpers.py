"""
Funciones auxiliares para emitir resultados como datos: tablas ECDF / QQ /
trayectorias (DataFrames de pandas) y escritura de CSV y JSON con una línea de
procedencia (config_hash, seed).
"""
import json
import math
import os
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd

from .utils import ensure_dir_exists, get_current_timestamp, get_logger

logger = get_logger('helpers')

# number of points kept in ECDF / QQ tables
TABLE_POINTS = 512


########################################################################################
######################### Conversión a tipos nativos ###################################
########################################################################################


def to_builtin(obj: Any) -> Any:
    """
    Convierte recursivamente tipos numpy/pandas a tipos nativos de Python, apto para json.

    Los valores no finitos se vuelven None para que el JSON sea estándar.
    """
    if isinstance(obj, Mapping):
        return {str(k): to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_builtin(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if hasattr(obj, 'as_dict'):
        return to_builtin(obj.as_dict())
    return obj


########################################################################################
######################### Tablas (solo datos) ##########################################
########################################################################################


def _thin(values: np.ndarray, points: int) -> np.ndarray:
    if values.size <= points:
        return np.arange(values.size)
    return np.unique(np.linspace(0, values.size - 1, points).round().astype(int))


def ecdf_frame(samples: Iterable[float], cdf: Optional[Callable] = None, points: int = TABLE_POINTS) -> pd.DataFrame:
    """
    Tabla ECDF de una muestra.

    Args:
        samples: Valores observados (se ignoran los no finitos).
        cdf: Función de distribución de referencia (opcional).
        points: Número máximo de filas.

    Returns:
        DataFrame con columnas x, ecdf y, si hay referencia, model_cdf.
    """
    values = np.sort(np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=float))
    values = values[np.isfinite(values)]
    index = _thin(values, points)
    frame = pd.DataFrame({'x': values[index], 'ecdf': (index + 1) / max(values.size, 1)})
    if cdf is not None:
        frame['model_cdf'] = np.asarray(cdf(frame['x'].to_numpy()), dtype=float)
    return frame


def qq_frame(samples: Iterable[float], reference: Union[Callable, Iterable[float]],
             points: int = TABLE_POINTS) -> pd.DataFrame:
    """
    Tabla QQ: cuantiles empíricos contra una función cuantil (ppf) o contra otra muestra.

    Returns:
        DataFrame con columnas probability, reference, empirical.
    """
    values = np.asarray(samples, dtype=float)
    values = values[np.isfinite(values)]
    probabilities = (np.arange(1, points + 1) - 0.5) / points
    empirical = np.quantile(values, probabilities)
    if callable(reference):
        expected = np.asarray(reference(probabilities), dtype=float)
    else:
        other = np.asarray(reference, dtype=float)
        expected = np.quantile(other[np.isfinite(other)], probabilities)
    return pd.DataFrame({'probability': probabilities, 'reference': expected, 'empirical': empirical})


def path_frame(grid: np.ndarray, values: np.ndarray, series: str, replica: int = 0) -> pd.DataFrame:
    """
    Trayectoria en formato largo.

    Args:
        grid: Malla (t o u) de largo K.
        values: Matriz (K, n) de valores por vértice.
        series: Etiqueta de la serie ('X', 'rho', 'T' o 'Bhat').
        replica: Índice de la réplica a la que pertenece la trayectoria.

    Returns:
        DataFrame con columnas u_or_t, vertex, value, series, replica.
    """
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[1]
    return pd.DataFrame({
        'u_or_t': np.repeat(grid, n),
        'vertex': np.tile(np.arange(n), grid.size),
        'value': values.reshape(-1),
        'series': series,
        'replica': int(replica),
    })


########################################################################################
######################### Escritura con procedencia ####################################
########################################################################################


def provenance_line(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash},seed={int(seed)}\n"


def write_csv_with_provenance(frame: pd.DataFrame, path: str, config_hash: str, seed: int,
                              float_format: str = '%.17g') -> str:
    """
    Escribe un CSV cuya primera línea es '# config_hash=...,seed=...'.

    Returns:
        str: Ruta escrita.
    """
    ensure_dir_exists(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', newline='') as handle:
        handle.write(provenance_line(config_hash, seed))
        frame.to_csv(handle, index=False, float_format=float_format, lineterminator='\n')
    logger.info(f"CSV written: {path} ({len(frame)} rows)")
    return path


def write_json(payload: Any, path: str, config_hash: str, seed: int) -> str:
    """Escribe JSON determinista (claves ordenadas) con config_hash y seed."""
    ensure_dir_exists(os.path.dirname(os.path.abspath(path)))
    document = {'config_hash': config_hash, 'seed': int(seed), 'data': to_builtin(payload)}
    with open(path, 'w') as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write('\n')
    logger.info(f"JSON written: {path}")
    return path


def write_meta(path: str, config_hash: str, seed: int, extra: Optional[Dict[str, Any]] = None) -> str:
    """
    Sidecar '<name>.meta.json' con timestamp y tiempos de ejecución; es el único
    archivo de salida que cambia entre corridas idénticas.
    """
    root, _ = os.path.splitext(path)
    meta_path = f"{root}.meta.json"
    document = {'config_hash': config_hash, 'seed': int(seed), 'timestamp': get_current_timestamp()}
    document.update(to_builtin(extra or {}))
    with open(meta_path, 'w') as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write('\n')
    return meta_path


def read_csv_with_provenance(path: str) -> pd.DataFrame:
    """Lee un CSV escrito por write_csv_with_provenance (ignora la línea de procedencia)."""
    if not os.path.exists(path):
        logger.error(f"File not found: {path}")
        raise FileNotFoundError(path)
    return pd.read_csv(path, comment='#')
