"""
SQLAlchemy tables for the artifact registry and training telemetry
"""
import logging

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.pool import StaticPool

logger = logging.getLogger(__name__)

Base = declarative_base()


def make_session_factory(database_url: str):
    """Engine + session factory; tables are created on first use"""
    if database_url.startswith("sqlite"):
        kwargs = {"connect_args": {"check_same_thread": False}}
        if database_url in ("sqlite://", "sqlite:///:memory:"):
            kwargs["poolclass"] = StaticPool
        engine = create_engine(database_url, **kwargs)
    else:
        engine = create_engine(database_url, pool_pre_ping=True)

    # Import for table registration on Base.metadata
    from app.models import registry, telemetry  # noqa: F401

    Base.metadata.create_all(bind=engine)
    logger.debug(f"[DATABASE] engine ready ({database_url[:20]}...)")
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)
