"""Run registry: pipeline runs and completed stages, stored in SQLite via SQLAlchemy."""
import hashlib
import logging
import os
from enum import Enum
from typing import Optional

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import Session, declarative_base, relationship, sessionmaker
from sqlalchemy.sql import func

from src.config import Config

logger = logging.getLogger(__name__)

Base = declarative_base()


# ============================================================================
# Enums
# ============================================================================

class RunMode(str, Enum):
    """What a run computes."""
    CORPUS = "corpus"
    UNSUPERVISED = "unsupervised"
    SUPERVISED = "supervised"
    COMPARE = "compare"
    GRID = "grid"
    EVAL = "eval"


class RunStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


# ============================================================================
# Models
# ============================================================================

class Run(Base):
    """
    Pipeline run.

    Fields:
        id: Primary key
        config_digest: sha256 of the validated config plus mode (unique)
        mode: RunMode value
        status: RunStatus value
        out_dir: run directory
        report_path: report.json once the run completed
        error: last failure message
    """
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    config_digest = Column(String(64), unique=True, nullable=False, index=True)
    mode = Column(String(20), nullable=False)
    status = Column(String(20), nullable=False, default=RunStatus.RUNNING.value)
    out_dir = Column(Text, nullable=False)
    report_path = Column(Text, nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, nullable=False, server_default=func.now())
    updated_at = Column(DateTime, nullable=False, server_default=func.now(), onupdate=func.now())

    stages = relationship("StageRecord", back_populates="run", cascade="all, delete-orphan")


class StageRecord(Base):
    """
    Completed (or failed) pipeline stage; the artifact digest validates cache hits.

    Fields:
        stage: stage name (corpus, feats, gan, hmm, ctc, tts, ...)
        cache_key: digest of the stage inputs (config sections + upstream artifacts)
        artifact_dir: directory holding the stage outputs
        artifact_digest: content digest of artifact_dir at completion
        wall_clock_s: stage duration
    """
    __tablename__ = "stages"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    stage = Column(String(50), nullable=False)
    cache_key = Column(String(64), nullable=False, index=True)
    artifact_dir = Column(Text, nullable=False)
    artifact_digest = Column(String(64), nullable=True)
    status = Column(String(20), nullable=False, default=RunStatus.COMPLETED.value)
    wall_clock_s = Column(Float, nullable=True)
    created_at = Column(DateTime, nullable=False, server_default=func.now())

    run = relationship("Run", back_populates="stages")


# ============================================================================
# Engine / session
# ============================================================================

_engine = None
_SessionLocal = None


def get_db_engine():
    """Create and return database engine."""
    os.makedirs(os.path.dirname(Config.DB_PATH) or ".", exist_ok=True)
    return create_engine(
        f"sqlite:///{Config.DB_PATH}",
        echo=Config.DEV_MODE,  # SQL в лог только в режиме разработки
        connect_args={"check_same_thread": False},
    )


def get_session() -> Session:
    """Get database session."""
    global _engine, _SessionLocal
    if _engine is None:
        _engine = get_db_engine()
        Base.metadata.create_all(_engine)
        _SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=_engine)
    return _SessionLocal()


def init_db():
    """Create all tables."""
    session = get_session()
    session.close()
    return _engine


def reset_engine() -> None:
    """Drop the cached engine (after Config.DB_PATH changed)."""
    global _engine, _SessionLocal
    if _engine is not None:
        _engine.dispose()
    _engine = None
    _SessionLocal = None


# ============================================================================
# Artifact digests
# ============================================================================

def directory_digest(path: str) -> Optional[str]:
    """sha256 over relative paths and contents of every file below path (None if missing)."""
    if not os.path.isdir(path):
        return None
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).replace(os.sep, "/").encode("utf-8"))
            with open(full, "rb") as f:
                h.update(hashlib.sha256(f.read()).digest())
    return h.hexdigest()


# ============================================================================
# DAO functions for Run
# ============================================================================

def create_run(config_digest: str, mode: str, out_dir: str) -> Run:
    """Create a run, or mark an existing run with the same digest as running again."""
    session = get_session()
    try:
        run = session.query(Run).filter(Run.config_digest == config_digest).first()
        if run is None:
            run = Run(config_digest=config_digest, mode=mode, out_dir=out_dir)
            session.add(run)
        else:
            run.status = RunStatus.RUNNING.value
            run.out_dir = out_dir
            run.error = None
        session.commit()
        session.refresh(run)
        return run
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def get_run_by_digest(config_digest: str) -> Optional[Run]:
    session = get_session()
    try:
        return session.query(Run).filter(Run.config_digest == config_digest).first()
    finally:
        session.close()


def get_run_by_id(run_id: int) -> Optional[Run]:
    session = get_session()
    try:
        return session.query(Run).filter(Run.id == run_id).first()
    finally:
        session.close()


def update_run(run_id: int, status: Optional[str] = None, report_path: Optional[str] = None,
               error: Optional[str] = None) -> Optional[Run]:
    """Update run status / report path / error."""
    session = get_session()
    try:
        run = session.query(Run).filter(Run.id == run_id).first()
        if not run:
            return None
        if status is not None:
            run.status = status
        if report_path is not None:
            run.report_path = report_path
        if error is not None:
            run.error = error[:2000]
        session.commit()
        session.refresh(run)
        return run
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def list_runs(mode: Optional[str] = None, status: Optional[str] = None) -> list[Run]:
    session = get_session()
    try:
        query = session.query(Run)
        if mode:
            query = query.filter(Run.mode == mode)
        if status:
            query = query.filter(Run.status == status)
        return query.order_by(Run.id).all()
    finally:
        session.close()


def delete_run_records(run_id: int) -> bool:
    """Delete a run and its stage records."""
    session = get_session()
    try:
        run = session.query(Run).filter(Run.id == run_id).first()
        if not run:
            return False
        session.delete(run)
        session.commit()
        return True
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


# ============================================================================
# DAO functions for StageRecord
# ============================================================================

def record_stage(run_id: int, stage: str, cache_key: str, artifact_dir: str,
                 wall_clock_s: Optional[float] = None, status: str = RunStatus.COMPLETED.value) -> StageRecord:
    """Store a stage result together with the digest of its artifact directory."""
    session = get_session()
    try:
        record = StageRecord(
            run_id=run_id,
            stage=stage,
            cache_key=cache_key,
            artifact_dir=artifact_dir,
            artifact_digest=directory_digest(artifact_dir) if status == RunStatus.COMPLETED.value else None,
            status=status,
            wall_clock_s=wall_clock_s,
        )
        session.add(record)
        session.commit()
        session.refresh(record)
        return record
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def find_completed_stage(stage: str, cache_key: str) -> Optional[StageRecord]:
    """Latest completed record for (stage, cache_key) whose artifacts are still intact."""
    session = get_session()
    try:
        records = (
            session.query(StageRecord)
            .filter(StageRecord.stage == stage, StageRecord.cache_key == cache_key,
                    StageRecord.status == RunStatus.COMPLETED.value)
            .order_by(StageRecord.id.desc())
            .all()
        )
        for record in records:
            if record.artifact_digest and directory_digest(record.artifact_dir) == record.artifact_digest:
                return record
            logger.warning("Stage %s cache entry %d is stale (artifacts changed or missing)", stage, record.id)
        return None
    finally:
        session.close()


def list_stages(run_id: int) -> list[StageRecord]:
    session = get_session()
    try:
        return session.query(StageRecord).filter(StageRecord.run_id == run_id).order_by(StageRecord.id).all()
    finally:
        session.close()
