import os

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

# Load environment variables (VOLTLAB_DB_URL may live in .env)
load_dotenv()

DEFAULT_DATABASE_URL = "sqlite:///./voltlab_runs.db"

# Create declarative base
Base = declarative_base()


def database_url(explicit: str = None) -> str:
    """Explicit URL, else VOLTLAB_DB_URL, else a SQLite file in the working directory."""
    return explicit or os.getenv("VOLTLAB_DB_URL") or DEFAULT_DATABASE_URL


def make_engine(url: str = None) -> Engine:
    url = database_url(url)
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, echo=False, connect_args=connect_args)


def create_db_and_tables(engine: Engine) -> None:
    """Create the run ledger tables if they do not exist yet."""
    import models  # noqa: F401  registers the tables on Base

    Base.metadata.create_all(bind=engine)


def session_factory(url: str = None) -> sessionmaker:
    engine = make_engine(url)
    create_db_and_tables(engine)
    return sessionmaker(bind=engine, autoflush=False, expire_on_commit=False)
