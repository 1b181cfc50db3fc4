"""SQLAlchemy engine, session factory, and init for the experiment record store."""

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

from planevio.config import DATABASE_URL, DB_PATH

_engines: dict[str, Engine] = {}


def get_engine(url: str = DATABASE_URL) -> Engine:
    if url not in _engines:
        if url == DATABASE_URL:
            DB_PATH.parent.mkdir(parents=True, exist_ok=True)
        _engines[url] = create_engine(url, echo=False, connect_args={"check_same_thread": False})
    return _engines[url]


def get_session(url: str = DATABASE_URL) -> Session:
    return sessionmaker(bind=get_engine(url))()


def init_db(url: str = DATABASE_URL):
    from planevio.models import Base
    Base.metadata.create_all(get_engine(url))
