"""
Módulo para operaciones de base de datos: inserción de corridas de verificación
y consultas del historial.
"""
import json

from sqlalchemy import desc, select
from sqlalchemy.orm import Session

from db.models_orm import CheckResult, VerificationRun
from scripts.utils.helpers import to_builtin
from scripts.utils.utils import get_current_timestamp, get_logger

logger = get_logger('operaciones_db', filename='operaciones_db.log')


def _dumps(payload):
    return json.dumps(to_builtin(payload), sort_keys=True)


def inject_verification_run(session: Session, suite_id, config_hash, seed, reports):
    """
    Registra una corrida y un CheckResult por reporte.

    Args:
        session: Sesión SQLAlchemy activa
        suite_id: Suite ejecutada ('all', 'restart', ...)
        config_hash: Hash de la configuración resuelta
        seed: Semilla de la corrida
        reports: Lista de VerificationReport

    Returns:
        int: id de la corrida insertada
    """
    non_control = [r for r in reports if not r.negative_control]
    run = VerificationRun(
        suite_id=suite_id,
        config_hash=config_hash,
        seed=str(int(seed)),
        created_at=get_current_timestamp(),
        all_passed=all(r.passed for r in non_control),
        n_checks=len(reports),
    )
    for report in reports:
        run.checks.append(CheckResult(
            check_id=report.check_id,
            reference=report.reference,
            claim=report.claim,
            passed=report.passed,
            negative_control=report.negative_control,
            statistics_json=_dumps(report.statistics),
            tolerances_json=_dumps(report.tolerances),
            diagnostic=report.diagnostic,
            runtime_s=float(report.runtime_s),
        ))
    session.add(run)
    session.flush()
    logger.info(f"Stored run {run.id}: suite={suite_id}, {len(reports)} checks, all_passed={run.all_passed}")
    return run.id


def retrieve_verification_runs(session: Session, suite_id=None, limit=20):
    """
    Recupera las últimas corridas (más recientes primero).

    Returns:
        list: Diccionarios con las columnas de verification_run.
    """
    query = select(VerificationRun).order_by(desc(VerificationRun.id)).limit(int(limit))
    if suite_id is not None:
        query = query.where(VerificationRun.suite_id == suite_id)
    return [run.as_dict() for run in session.scalars(query)]


def retrieve_check_history(session: Session, check_id, limit=20):
    """
    Recupera el historial de un check (más reciente primero) con los
    estadísticos decodificados y la semilla / hash de su corrida.
    """
    query = (
        select(CheckResult, VerificationRun)
        .join(VerificationRun, CheckResult.run_id == VerificationRun.id)
        .where(CheckResult.check_id == check_id)
        .order_by(desc(CheckResult.id))
        .limit(int(limit))
    )
    history = []
    for check, run in session.execute(query):
        row = check.as_dict()
        row['statistics'] = json.loads(row.pop('statistics_json'))
        row['tolerances'] = json.loads(row.pop('tolerances_json'))
        row.update({'suite_id': run.suite_id, 'config_hash': run.config_hash, 'seed': run.seed,
                    'created_at': run.created_at})
        history.append(row)
    if not history:
        logger.warning(f"No stored results for check '{check_id}'")
    return history
