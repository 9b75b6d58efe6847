"""
Módulo que define los modelos ORM del almacén de corridas de verificación.
"""
from sqlalchemy import Boolean, Column, Float, ForeignKey, Integer, String, Text
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, relationship

from scripts.utils.utils import get_logger

#########################################################################
##############                Classes                 ###################
#########################################################################

# Configurar logger
logger = get_logger('models_orm', filename='models_orm.log')

Base = declarative_base()


class VerificationRun(Base):
    """
    Representa una ejecución de `verify <suite>`.
    """
    __tablename__ = 'verification_run'

    id = Column(Integer, primary_key=True, autoincrement=True)
    suite_id = Column(String(64), nullable=False, index=True)
    config_hash = Column(String(64), nullable=False)
    seed = Column(String(20), nullable=False)  # u64 does not fit a signed BIGINT
    created_at = Column(String(40), nullable=False)
    all_passed = Column(Boolean, nullable=False)
    n_checks = Column(Integer, nullable=False)

    checks = relationship('CheckResult', back_populates='run', cascade='all, delete-orphan',
                          order_by='CheckResult.id')

    def as_dict(self):
        return {c.name: getattr(self, c.name) for c in self.__table__.columns}


class CheckResult(Base):
    """
    Representa el reporte de un check dentro de una corrida.
    """
    __tablename__ = 'check_result'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey('verification_run.id'), nullable=False, index=True)
    check_id = Column(String(128), nullable=False, index=True)
    reference = Column(String(32), nullable=False, default='')
    claim = Column(Text, nullable=False)
    passed = Column(Boolean, nullable=False)
    negative_control = Column(Boolean, nullable=False, default=False)
    statistics_json = Column(Text, nullable=False)
    tolerances_json = Column(Text, nullable=False)
    diagnostic = Column(Text, nullable=True)
    runtime_s = Column(Float, nullable=True)

    run = relationship('VerificationRun', back_populates='checks')

    def as_dict(self):
        return {c.name: getattr(self, c.name) for c in self.__table__.columns}


def create_tables(engine: Engine) -> None:
    """Crea las tablas que falten (idempotente)."""
    Base.metadata.create_all(engine)
    logger.info("Tables verified: verification_run, check_result")
