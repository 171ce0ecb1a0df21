from contextlib import contextmanager
from pathlib import Path

from decouple import config
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine, make_url
from sqlalchemy.orm import declarative_base, sessionmaker

CACHE_DIR = Path(config("BIAS_AUDIT_CACHE_DIR", default=str(Path.home() / ".cache" / "bias_audit")))
REGISTRY_FILE = "registry.db"

SQLALCHEMY_DATABASE_URL = config("DATABASE_URL", default=f"sqlite:///{CACHE_DIR / REGISTRY_FILE}")


def make_engine(url: str) -> Engine:
    """
    Creates an engine for the artifact registry.

    SQLite files get their parent directory created and may be shared by the
    worker threads of a grid run.
    """
    parsed = make_url(url)
    if parsed.get_backend_name() != "sqlite":
        return create_engine(url)
    if parsed.database and parsed.database != ":memory:":
        Path(parsed.database).parent.mkdir(parents=True, exist_ok=True)
    return create_engine(url, connect_args={"check_same_thread": False})


engine = make_engine(SQLALCHEMY_DATABASE_URL)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


def configure_database(url: str) -> Engine:
    """
    Rebinds the session factory to another database.

    Args:
        url (str): SQLAlchemy database URL.

    Returns:
        Engine: The new engine.
    """
    global engine
    engine = make_engine(url)
    SessionLocal.configure(bind=engine)
    return engine


def get_db():
    """
    Provides a database session for registry lookups and updates.

    This function creates a new database session using the ``SessionLocal``
    factory and ensures that the session is properly closed after use.

    Yields:
        Session: A SQLAlchemy session object for interacting with the database.

    Example:
        with session_scope() as db:
            db.query(...)
    """
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


session_scope = contextmanager(get_db)
