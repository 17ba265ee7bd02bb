import os
import json
import hashlib
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .errors import DependencyError, DataError

logger = logging.getLogger(__name__)

LOCK_NAME = ".pipeline.lock"


def canonical_json(payload: Any) -> str:
    """Stable JSON text: sorted keys, no whitespace variance."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def hash_payload(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def hash_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_json(payload: Any, path: str | Path) -> Path:
    """Write JSON with sorted keys so identical payloads give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    logger.info(f"Saved JSON to: {path}")
    return path


def load_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing artifact: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}")


def utc_timestamp() -> str:
    """Wall-clock UTC time, or SOURCE_DATE_EPOCH when set for reproducible runs."""
    fixed = os.getenv("SOURCE_DATE_EPOCH")
    if fixed:
        moment = datetime.fromtimestamp(int(fixed), tz=timezone.utc)
    else:
        moment = datetime.now(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


class OutputLock:
    """Exclusive lock file guarding one output directory."""

    def __init__(self, out_dir: str | Path):
        self.path = Path(out_dir) / LOCK_NAME
        self._fd: int | None = None

    def __enter__(self) -> "OutputLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DependencyError(
                f"output directory is locked by another stage: {self.path} (remove it if stale)"
            )
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        if self.path.exists():
            os.remove(self.path)
