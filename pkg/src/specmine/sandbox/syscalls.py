"""Syscall membership tables and the normalized record both tracer backends emit.

Arguments are kept in ``strace -y`` rendering (quoted strings, ``3</path>``
descriptors, symbolic open flags) so that records coming from the in-process
ptrace recorder and from parsed strace output compare equal.
"""

from __future__ import annotations

import json
import posixpath
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

CLASSIFICATIONS = ("read", "write", "probe", "other")

_WRITE_OPEN_FLAGS = ("O_WRONLY", "O_RDWR", "O_CREAT", "O_TRUNC", "O_APPEND")
_FD_RE = re.compile(r"^(-?\d+)(?:<(.*)>)?$")


@dataclass(frozen=True)
class SyscallRecord:
    name: str
    args: tuple[str, ...]
    return_value: int
    classification: str
    touched_path: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "args": list(self.args),
            "ret": self.return_value,
            "class": self.classification,
            "path": self.touched_path,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SyscallRecord:
        return cls(d["name"], tuple(d["args"]), int(d["ret"]), d["class"], d.get("path"))


@dataclass(frozen=True)
class SyscallTable:
    entries: dict[str, dict[str, Any]]
    traced: frozenset[str]

    def numbers(self) -> dict[int, str]:
        return {e["nr"]: name for name, e in self.entries.items() if name in self.traced}

    def entry(self, name: str) -> dict[str, Any] | None:
        return self.entries.get(name)


@lru_cache(maxsize=1)
def _bundled() -> dict[str, Any]:
    text = resources.files("specmine").joinpath("data/syscalls.json").read_text()
    return json.loads(text)


def default_table() -> SyscallTable:
    data = _bundled()
    return SyscallTable(data["syscalls"], frozenset(data["default_set"]))


def load_syscall_set(path: str | Path) -> SyscallTable:
    """Read a traced-set file: a JSON list of names, or one name per line."""
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("["):
        names = json.loads(stripped)
    else:
        names = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    entries = _bundled()["syscalls"]
    unknown = sorted(set(names) - set(entries))
    if unknown:
        raise ValueError(f"no table entry for syscalls: {', '.join(unknown)}")
    return SyscallTable(entries, frozenset(names))


# -- rendering -------------------------------------------------------------

def quote(raw: bytes) -> str:
    out = ['"']
    for b in raw:
        c = chr(b)
        if c == '"':
            out.append('\\"')
        elif c == "\\":
            out.append("\\\\")
        elif c == "\n":
            out.append("\\n")
        elif c == "\t":
            out.append("\\t")
        elif c == "\r":
            out.append("\\r")
        elif 0x20 <= b < 0x7F:
            out.append(c)
        else:
            out.append(f"\\x{b:02x}")
    out.append('"')
    return "".join(out)


_ESCAPES = {"n": b"\n", "t": b"\t", "r": b"\r", '"': b'"', "\\": b"\\", "v": b"\v", "f": b"\f"}


def unquote(text: str) -> str:
    """Inverse of :func:`quote`; also tolerates strace's trailing ``...``."""
    s = text
    if s.endswith("..."):
        s = s[:-3]
    if len(s) < 2 or s[0] != '"' or s[-1] != '"':
        raise ValueError(f"not a quoted string: {text!r}")
    body = s[1:-1]
    out = bytearray()
    i = 0
    while i < len(body):
        ch = body[i]
        if ch != "\\":
            out += ch.encode("utf-8", "surrogateescape")
            i += 1
            continue
        nxt = body[i + 1] if i + 1 < len(body) else ""
        if nxt == "x":
            out.append(int(body[i + 2:i + 4], 16))
            i += 4
        elif nxt.isdigit():
            j = i + 1
            while j < len(body) and j < i + 4 and body[j] in "01234567":
                j += 1
            out.append(int(body[i + 1:j], 8))
            i = j
        else:
            out += _ESCAPES.get(nxt, nxt.encode())
            i += 2
    return out.decode("utf-8", "surrogateescape")


def describe_link(link: str) -> str:
    """Stable description of a /proc/<pid>/fd target (drops inode numbers)."""
    for kind in ("pipe", "socket"):
        if link.startswith(kind + ":["):
            return kind + ":"
    return link


def render_fd(fd: int, link: str | None) -> str:
    if fd == -100:
        return "AT_FDCWD"
    return f"{fd}<{link}>" if link else str(fd)


def parse_fd(arg: str) -> tuple[int | None, str | None]:
    """``'3</scratch/p0>'`` -> ``(3, '/scratch/p0')``; ``AT_FDCWD`` -> ``(-100, None)``."""
    arg = arg.strip()
    if arg.startswith("AT_FDCWD"):
        m = re.match(r"AT_FDCWD(?:<(.*)>)?$", arg)
        return -100, (m.group(1) if m else None)
    m = _FD_RE.match(arg)
    if not m:
        return None, None
    return int(m.group(1)), m.group(2)


def fd_number(arg: str) -> int | None:
    return parse_fd(arg)[0]


def is_write_open(flags: str) -> bool:
    return any(f in flags for f in _WRITE_OPEN_FLAGS)


# -- normalization ---------------------------------------------------------

def _resolve(path: str, base: str | None) -> str:
    if path.startswith("/") or base is None:
        return posixpath.normpath(path) if path else path
    return posixpath.normpath(posixpath.join(base, path))


def classify(name: str, args: tuple[str, ...], table: SyscallTable | None = None) -> str:
    entry = (table or default_table()).entry(name)
    if entry is None:
        return "other"
    cls = entry["class"]
    if cls == "open":
        idx = entry.get("flags")
        flags = args[idx] if idx is not None and idx < len(args) else ""
        return "write" if is_write_open(flags) else "read"
    return cls


def touched_path(name: str, args: tuple[str, ...], cwd: str | None,
                 table: SyscallTable | None = None) -> str | None:
    entry = (table or default_table()).entry(name)
    if entry is None:
        return None
    if "path" in entry and entry["path"] < len(args):
        try:
            raw = unquote(args[entry["path"]])
        except ValueError:
            return None
        base = cwd
        if "dirfd" in entry and entry["dirfd"] < len(args):
            fd, link = parse_fd(args[entry["dirfd"]])
            if fd != -100:
                base = link
            elif link:
                base = link
        return _resolve(raw, base)
    if "fd" in entry and entry["fd"] < len(args):
        _, link = parse_fd(args[entry["fd"]])
        if link and link.startswith("/"):
            return link
    return None


def source_path(record: SyscallRecord, table: SyscallTable | None = None) -> str | None:
    """Input side of a copy-style call (sendfile, splice, copy_file_range)."""
    entry = (table or default_table()).entry(record.name)
    if not entry or "source_fd" not in entry or entry["source_fd"] >= len(record.args):
        return None
    _, link = parse_fd(record.args[entry["source_fd"]])
    return link if link and link.startswith("/") else None


def is_mutation(record: SyscallRecord, table: SyscallTable | None = None) -> bool:
    entry = (table or default_table()).entry(record.name)
    return bool(entry and entry.get("mutation"))


def make_record(name: str, args: Iterable[str], ret: int, cwd: str | None = None,
                table: SyscallTable | None = None) -> SyscallRecord:
    args = tuple(args)
    return SyscallRecord(name, args, ret, classify(name, args, table),
                         touched_path(name, args, cwd, table))
