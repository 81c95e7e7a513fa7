from contextlib import contextmanager

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.pool import StaticPool

from .config import settings


def make_engine(url: str = None):
    """SQLite engine; in-memory URLs share one connection across threads."""
    url = url or settings.DATABASE_URL
    if url in ("sqlite://", "sqlite:///:memory:"):
        return create_engine(url, connect_args={"check_same_thread": False}, poolclass=StaticPool)
    return create_engine(url, connect_args={"check_same_thread": False})


engine = make_engine()
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


def init_db(bind=None):
    Base.metadata.create_all(bind=bind or engine)


@contextmanager
def get_db(session_factory=None):
    db = (session_factory or SessionLocal)()
    try:
        yield db
    finally:
        db.close()
