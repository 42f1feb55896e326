"""Deterministic file plumbing: structured configs, digests, archives, locks.

Everything written here must be byte-stable across runs: JSON is dumped with
sorted keys and fixed separators, zip archives carry a constant timestamp and
no compression, and digests are plain SHA-256 over file bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterable
from zipfile import ZIP_STORED, ZipFile, ZipInfo

import yaml

from .errors import InvalidInputError

# Constant timestamp for archive members so identical content yields
# identical archive bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def load_structured(path: str | Path) -> Any:
    """Load a JSON or YAML document, dispatching on the file suffix."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        return yaml.safe_load(text)
    return json.loads(text)


def dump_json(obj: Any, path: str | Path) -> None:
    """Write ``obj`` as deterministic JSON (sorted keys, fixed separators)."""
    Path(path).write_text(json_bytes(obj).decode("utf-8"), encoding="utf-8")


def json_bytes(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1) + "\n").encode("utf-8")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_files(paths: Iterable[str | Path]) -> str:
    """Digest several files as one stream, in the given order."""
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        h.update(p.name.encode("utf-8"))
        h.update(b"\x00")
        h.update(p.read_bytes())
        h.update(b"\x00")
    return h.hexdigest()


def write_archive(path: str | Path, entries: dict[str, bytes]) -> None:
    """Write a deterministic uncompressed zip with the given name->bytes map."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with ZipFile(path, "w", ZIP_STORED) as zf:
        for name in sorted(entries):
            info = ZipInfo(name, date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])


def read_archive(path: str | Path) -> dict[str, bytes]:
    path = Path(path)
    with ZipFile(path, "r") as zf:
        return {name: zf.read(name) for name in zf.namelist()}


@contextmanager
def output_lock(directory: str | Path):
    """Reject concurrent invocations on the same output directory.

    Creates ``.domexperts.lock`` with O_EXCL; a live lock means another
    process owns the directory.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / ".domexperts.lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InvalidInputError(
            f"output directory {directory} is locked by another invocation "
            f"(stale? remove {lock_path})"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def resolve_workers() -> int:
    """Worker cap from DOMEXPERTS_THREADS (default 1, i.e. sequential)."""
    raw = os.environ.get("DOMEXPERTS_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise InvalidInputError(f"DOMEXPERTS_THREADS must be an integer, got {raw!r}")
    return max(1, value)
