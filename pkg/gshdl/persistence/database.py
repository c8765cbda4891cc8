"""Database session management for the run registry."""

import logging
import os
from contextlib import contextmanager
from dataclasses import asdict, is_dataclass
from typing import Any, Dict, Iterator, Optional, Union

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker
from sqlalchemy.pool import NullPool, QueuePool, StaticPool

from ..config import DatabaseSection
from ..errors import ConfigError

logger = logging.getLogger("gshdl.persistence")

# Global engine variable to be initialized
_engine: Optional[Engine] = None
DBSession: Optional[sessionmaker] = None


def connection_url(db_config: Dict[str, Any]) -> str:
    """SQLAlchemy URL for a ``[database]`` section.

    Raises:
        ConfigError: Unsupported database type
    """
    db_type = db_config.get("type", "sqlite")
    if db_type in ("postgres", "postgresql"):
        return (f"postgresql://{db_config.get('user', 'postgres')}:{db_config.get('password', '')}"
                f"@{db_config.get('host', 'localhost')}:{db_config.get('port', 5432)}"
                f"/{db_config.get('dbname', 'gshdl')}")
    if db_type == "sqlite":
        path = db_config.get("path", "runs/gshdl.db")
        return "sqlite://" if path == ":memory:" else f"sqlite:///{path}"
    raise ConfigError(f"Unsupported database type: {db_type}")


def initialize_db(config: Union[DatabaseSection, Dict[str, Any]]) -> Engine:
    """Initialize the database engine and session factory.

    Args:
        config: The ``[database]`` section, or a dict of its options

    Returns:
        Engine: The SQLAlchemy engine
    """
    global _engine, DBSession

    db_config = asdict(config) if is_dataclass(config) else dict(config)
    db_type = db_config.get("type", "sqlite")
    url = connection_url(db_config)

    engine_kwargs: Dict[str, Any] = {"echo": db_config.get("echo", False)}
    if db_type.startswith("postgres"):
        engine_kwargs.update({
            "poolclass": QueuePool,
            "pool_size": db_config.get("pool_size", 5),
            "max_overflow": db_config.get("max_overflow", 10),
            "pool_timeout": db_config.get("pool_timeout", 30),
            "pool_pre_ping": True,
        })
    elif db_config.get("path") == ":memory:":
        # a single shared connection keeps the in-memory database alive
        engine_kwargs.update({"poolclass": StaticPool, "connect_args": {"check_same_thread": False}})
    else:
        engine_kwargs["poolclass"] = NullPool
        path = db_config.get("path", "runs/gshdl.db")
        if os.path.dirname(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)

    logger.info(f"Initializing database connection to {db_type}...")
    _engine = create_engine(url, **engine_kwargs)
    DBSession = sessionmaker(bind=_engine)
    return _engine


def get_session() -> Session:
    """Get a new database session.

    Raises:
        RuntimeError: If the database has not been initialized
    """
    if DBSession is None:
        raise RuntimeError("Database not initialized. Call initialize_db first.")
    return DBSession()


@contextmanager
def session_scope() -> Iterator[Session]:
    """Session that is committed on success and rolled back on error.

    Raises:
        RuntimeError: If the database has not been initialized
    """
    session = get_session()
    try:
        yield session
        session.commit()
    except Exception as e:
        session.rollback()
        logger.exception("Database error: %s", str(e))
        raise
    finally:
        session.close()
