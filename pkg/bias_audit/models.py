"""
This module defines the SQLAlchemy ORM models of the artifact registry.

Classes:
    AuditRun: One executed audit grid cell.
    CachedArtifact: A reusable file (embedding bank, bias subspace, model weights).
"""

from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Integer, String, Text

from database import Base


def utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(tzinfo=None)


class AuditRun(Base):
    """
    Represents an audit run in the registry.

    Attributes:
        id (int): The unique identifier of the run.
        config_hash (str): Hash of the canonical config of the grid cell.
        cell (str): ``<mitigation>/<intervention>`` of the grid cell.
        status (str): ``running``, ``ok`` or ``failed``.
        started_at (datetime): When the run started.
        finished_at (datetime): When the run ended (optional).
        report_path (str): Where the structured report was written (optional).
        error (str): Failure detail of a failed run (optional).
    """
    __tablename__ = "audit_runs"

    id = Column(Integer, primary_key=True, index=True)
    config_hash = Column(String(64), index=True, nullable=False)
    cell = Column(String, nullable=False)
    status = Column(String, default="running", nullable=False)
    started_at = Column(DateTime, default=utcnow, nullable=False)
    finished_at = Column(DateTime, nullable=True)
    report_path = Column(String, nullable=True)
    error = Column(Text, nullable=True)


class CachedArtifact(Base):
    """
    Represents a cached artifact file.

    Attributes:
        id (int): The unique identifier of the artifact.
        kind (str): ``bank``, ``subspace`` or ``weights``.
        key (str): Content key derived from everything the artifact depends on (unique).
        path (str): Base path of the artifact files.
        created_at (datetime): When the artifact was built.
        last_used_at (datetime): When the artifact was last reused.
    """
    __tablename__ = "cached_artifacts"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, index=True, nullable=False)
    key = Column(String(64), unique=True, index=True, nullable=False)
    path = Column(String, nullable=False)
    created_at = Column(DateTime, default=utcnow, nullable=False)
    last_used_at = Column(DateTime, default=utcnow, nullable=False)
