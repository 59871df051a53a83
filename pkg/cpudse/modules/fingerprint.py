"""Text normalization and canonical fingerprints of artifacts."""

import hashlib
import json
from pathlib import Path
from typing import Any, Optional


def normalize_text(text: Optional[str]) -> str:
    """
    Normalize text for hashing.
    - Drop comment-only and blank lines
    - Collapse runs of whitespace
    - Strip trailing whitespace
    """
    if not text:
        return ""

    lines = []
    for line in text.splitlines():
        line = " ".join(line.split())
        if line and not line.startswith("#"):
            lines.append(line)
    return "\n".join(lines)


def sha1_text(text: str) -> str:
    return hashlib.sha1(text.encode("utf-8")).hexdigest()


def canonical_json(payload: Any) -> str:
    """Deterministic JSON (sorted keys, no spaces) used for digests."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def fingerprint(payload: Any) -> str:
    """
    Compute a canonical fingerprint.

    Strings are normalized first so formatting-only edits do not change the id;
    anything else is hashed through its canonical JSON form.

    Args:
        payload: Text or JSON-serializable object

    Returns:
        sha1 hex digest
    """
    if isinstance(payload, str):
        return sha1_text(normalize_text(payload))
    return sha1_text(canonical_json(payload))


def file_digest(path: Path) -> str:
    """sha1 of the raw bytes of a file (directories hash their sorted file list)."""
    path = Path(path)
    h = hashlib.sha1()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(child.relative_to(path)).encode("utf-8"))
            h.update(child.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()
