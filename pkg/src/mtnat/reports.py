"""Checksums and deterministic JSON report files."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

SCHEMA_VERSION = 1


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(lines):
    return sha256_bytes("\n".join(lines).encode("utf-8"))


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_report(path, kind, payload, inputs=None):
    """Write ``payload`` as a versioned JSON report naming its inputs by checksum."""
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "inputs": dict(inputs or {}), **payload}
    return atomic_write(path, dumps(doc))


def read_report(path, kind=None):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported report schema {doc.get('schema_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} report, found {doc.get('kind')!r}")
    return doc
