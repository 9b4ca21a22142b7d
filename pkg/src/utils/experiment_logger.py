"""
Utility for logging runs (training, fine-tuning, probes) to an SQLite database.
The database path comes from MELES_EXPERIMENTS_DB (see utils.settings).
"""
import json
import logging
import sqlite3

from utils import settings
from utils.custom_logger import log


def connect() -> sqlite3.Connection:
    return sqlite3.connect(settings.EXPERIMENTS_DB)


def init():
    """Set up the run table."""
    db = connect()
    statement = """
    -- sql
    CREATE TABLE IF NOT EXISTS runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        kind TEXT NOT NULL,
        config_digest TEXT NOT NULL,
        source TEXT NOT NULL,
        metrics TEXT NOT NULL,
        created_at TIMESTAMP NOT NULL DEFAULT CURRENT_TIMESTAMP
    );
    """
    db.execute(statement)
    db.commit()


def log_run(kind: str, config_digest: str, source: str, metrics: dict):
    """Append one run; metrics are stored as a JSON object."""
    init()
    db = connect()
    statement = """
    -- sql
    INSERT INTO runs (kind, config_digest, source, metrics)
    VALUES (:kind, :config_digest, :source, :metrics);
    """
    row = {
        "kind": kind,
        "config_digest": config_digest,
        "source": source,
        "metrics": json.dumps(metrics, sort_keys=True),
    }
    db.execute(statement, row)
    db.commit()
    log.debug(f"Logged run: {row}")


def count_runs() -> int:
    init()
    return connect().execute("SELECT COUNT(*) FROM runs;").fetchone()[0]


def get_runs() -> list[tuple[int, str, str, str, str, str]]:
    init()
    query = """
    -- sql
    SELECT id, kind, config_digest, source, metrics, created_at
    FROM runs
    ORDER BY id;
    """
    return connect().execute(query).fetchall()


def summarize_runs() -> list[tuple[str, int, str]]:
    """Number of runs and the latest run time per kind."""
    init()
    query = """
    -- sql
    SELECT kind, COUNT(*) AS count, MAX(created_at) AS latest
    FROM runs
    GROUP BY kind
    ORDER BY kind;
    """
    return connect().execute(query).fetchall()


if __name__ == "__main__":
    log.setLevel(logging.DEBUG)
    init()
