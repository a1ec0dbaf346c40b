"""Atomic file output with ordinary permissions."""

from __future__ import annotations

import os
import tempfile


def publish(tmp: str, path: str) -> None:
    """Give a ``mkstemp`` file umask permissions and move it into place."""
    mask = os.umask(0)
    os.umask(mask)
    os.chmod(tmp, 0o666 & ~mask)
    os.replace(tmp, path)


def write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    publish(tmp, path)
