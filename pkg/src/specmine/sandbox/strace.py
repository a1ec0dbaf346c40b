"""Parse ``strace -f -y`` text output into :class:`SyscallRecord` values.

Also offers a recorder that shells out to an installed ``strace`` binary, for
hosts where the in-process ptrace recorder is unavailable.
"""

from __future__ import annotations

import os
import posixpath
import re
import shutil
import subprocess
import tempfile
import time
from typing import Callable, Iterable

from .ptrace import RawTrace, TracerUnavailable
from .syscalls import (SyscallRecord, SyscallTable, describe_link, make_record, parse_fd, quote,
                       unquote)

_PID_RE = re.compile(r"^(?:\[pid\s+(\d+)\]|(\d+))\s+(.*)$")
_CALL_RE = re.compile(r"^([a-z_0-9]+)\((.*)$")
_RESUMED_RE = re.compile(r"^<\.\.\. ([a-z_0-9]+) resumed>\s?(.*)$")
_RET_RE = re.compile(r"^(.*)\)\s+=\s+(-?\d+|\?|0x[0-9a-f]+)(?:<(.*?)>)?(?:\s+(\w+)\s*(?:\(.*\))?)?\s*$")
_EXIT_RE = re.compile(r"^\+\+\+ (?:exited with (\d+)|killed by (\w+)).*\+\+\+$")

_OPEN_ORDER = ["O_RDONLY", "O_WRONLY", "O_RDWR", "O_CREAT", "O_EXCL", "O_NOCTTY", "O_TRUNC",
               "O_APPEND", "O_NONBLOCK", "O_DSYNC", "O_DIRECT", "O_LARGEFILE", "O_DIRECTORY",
               "O_NOFOLLOW", "O_NOATIME", "O_CLOEXEC", "O_PATH"]
_AT_ORDER = ["AT_SYMLINK_NOFOLLOW", "AT_REMOVEDIR", "AT_SYMLINK_FOLLOW", "AT_NO_AUTOMOUNT",
             "AT_EMPTY_PATH"]
_AMODE_ORDER = ["R_OK", "W_OK", "X_OK"]


def _canon_bits(text: str, order: list[str]) -> str:
    parts = [p.strip() for p in text.split("|") if p.strip()]
    rank = {name: i for i, name in enumerate(order)}
    parts.sort(key=lambda p: (rank.get(p, len(order)), p))
    if len(parts) > 1 and "0" in parts:
        parts.remove("0")
    return "|".join(parts) if parts else "0"


def split_args(text: str) -> list[str]:
    """Split on top-level commas, respecting quotes, brackets and braces."""
    out: list[str] = []
    depth = 0
    cur: list[str] = []
    in_str = False
    i = 0
    while i < len(text):
        ch = text[i]
        if in_str:
            cur.append(ch)
            if ch == "\\" and i + 1 < len(text):
                cur.append(text[i + 1])
                i += 2
                continue
            if ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
            cur.append(ch)
        elif ch in "([{<":
            depth += 1
            cur.append(ch)
        elif ch in ")]}>":
            depth -= 1
            cur.append(ch)
        elif ch == "," and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
        i += 1
    tail = "".join(cur).strip()
    if tail or out:
        out.append(tail)
    return out


class StraceParser:
    """Stateful parser; feed it lines in order with :meth:`parse`."""

    def __init__(self, table: SyscallTable, *, cwd: str = "/",
                 path_map: Callable[[str], str] = lambda p: p) -> None:
        self.table = table
        self.path_map = path_map
        self.initial_cwd = cwd
        self.exit_status: int | None = None

    def _map_quoted(self, arg: str) -> str:
        try:
            raw = unquote(arg)
        except ValueError:
            return arg
        return quote(self.path_map(raw).encode("utf-8", "surrogateescape"))

    def _map_fd(self, arg: str) -> str:
        fd, link = parse_fd(arg)
        if fd is None:
            return arg
        if fd == -100:
            return "AT_FDCWD"
        if link is None:
            return str(fd)
        return f"{fd}<{describe_link(self.path_map(link))}>"

    def _normalize(self, name: str, args: list[str]) -> list[str]:
        sig = self.table.entries[name]["sig"]
        out: list[str] = []
        for i, kind in enumerate(sig):
            if i >= len(args):
                break
            a = args[i]
            if kind == "path":
                out.append(self._map_quoted(a))
            elif kind in ("fd", "dirfd"):
                out.append(self._map_fd(a))
            elif kind == "oflags":
                out.append(_canon_bits(a, _OPEN_ORDER))
            elif kind == "how":
                m = re.search(r"flags=([A-Z_|0-9x]+)", a)
                out.append("{flags=%s}" % _canon_bits(m.group(1) if m else "0", _OPEN_ORDER))
            elif kind == "atflags":
                out.append(_canon_bits(a, _AT_ORDER))
            elif kind == "amode":
                out.append(a if a == "F_OK" else _canon_bits(a, _AMODE_ORDER))
            elif kind in ("mode", "mode?"):
                out.append(a)
            elif kind == "outstr":
                out.append(self._map_quoted(a) if a.startswith('"') else "_")
            elif kind == "argv":
                items = split_args(a.strip()[1:-1]) if a.startswith("[") else []
                out.append("[" + ", ".join(self._map_quoted(x) for x in items) + "]")
            elif kind == "buf":
                out.append("_")
            else:
                out.append(a)
        return out

    def parse(self, lines: Iterable[str]) -> list[SyscallRecord]:
        records: list[SyscallRecord] = []
        pending: dict[int, tuple[str, str]] = {}
        cwds: dict[int, str] = {}
        root: int | None = None
        recording = False
        for raw_line in lines:
            line = raw_line.rstrip("\n")
            if not line.strip():
                continue
            m = _PID_RE.match(line)
            if m:
                pid, body = int(m.group(1) or m.group(2)), m.group(3)
            else:
                pid, body = (root if root is not None else 0), line
            if root is None:
                root = pid
            body = body.strip()
            em = _EXIT_RE.match(body)
            if em:
                if pid == root:
                    self.exit_status = (int(em.group(1)) if em.group(1) is not None else
                                        -_signal_number(em.group(2)))
                continue
            if body.startswith("---"):
                continue
            rm = _RESUMED_RE.match(body)
            if rm:
                name, first = pending.pop(pid, (rm.group(1), ""))
                body = f"{name}({first}{rm.group(2)}"
            elif body.endswith("<unfinished ...>"):
                cm = _CALL_RE.match(body)
                if cm:
                    pending[pid] = (cm.group(1), cm.group(2)[: -len("<unfinished ...>")].rstrip())
                continue
            cm = _CALL_RE.match(body)
            if not cm:
                continue
            name, rest = cm.group(1), cm.group(2)
            retm = _RET_RE.match(rest)
            if not retm:
                continue
            argtext, retstr = retm.group(1), retm.group(2)
            ret = int(retstr, 0) if retstr not in ("?",) else 0
            if retm.group(4) and ret == -1:
                ret = -_errno_number(retm.group(4))
            cwd = cwds.get(pid, cwds.get(root, self.initial_cwd))
            if name not in self.table.entries or (name not in self.table.traced and name != "execve"):
                continue
            args = self._normalize(name, split_args(argtext))
            if name == "execve" and not recording:
                if ret != 0:
                    continue
                recording = True
            if not recording or name not in self.table.traced:
                continue
            rec = make_record(name, args, ret, cwd, self.table)
            records.append(rec)
            if name in ("chdir", "fchdir") and ret == 0 and rec.touched_path:
                cwds[pid] = rec.touched_path
            if name in ("chdir",) and ret == 0 and rec.touched_path is None:
                cwds[pid] = posixpath.normpath(posixpath.join(cwd, unquote(args[0])))
        return records


def _errno_number(name: str) -> int:
    import errno as _errno

    return getattr(_errno, name, 1)


def _signal_number(name: str) -> int:
    import signal as _signal

    try:
        return int(getattr(_signal, name))
    except AttributeError:
        return 9


def parse_strace_text(text: str, table: SyscallTable, *, cwd: str = "/",
                      path_map: Callable[[str], str] = lambda p: p) -> list[SyscallRecord]:
    return StraceParser(table, cwd=cwd, path_map=path_map).parse(text.splitlines())


class StraceRecorder:
    """Recorder backed by an external ``strace`` binary."""

    def __init__(self, table: SyscallTable, *, timeout: float = 10.0, max_records: int = 50_000,
                 path_map: Callable[[str], str] = lambda p: p) -> None:
        self.binary = shutil.which("strace")
        if self.binary is None:
            raise TracerUnavailable("strace binary not found on PATH")
        self.table = table
        self.timeout = timeout
        self.max_records = max_records
        self.path_map = path_map

    def run(self, argv: list[str], *, cwd: str, env: dict[str, str], stdin_fd: int,
            stdout_fd: int, stderr_fd: int, child_setup: Callable[[], None] | None = None,
            new_process_group: bool = True) -> RawTrace:
        trace = RawTrace()
        names = ",".join(sorted(self.table.traced | {"execve"}))
        with tempfile.NamedTemporaryFile("r", suffix=".strace") as out:
            cmd = [self.binary, "-f", "-y", "-s", "4096", "-e", f"trace={names}", "-o", out.name,
                   "--", *argv]
            start = time.monotonic()
            try:
                proc = subprocess.run(cmd, cwd=cwd, env=env, stdin=stdin_fd, stdout=stdout_fd,
                                      stderr=stderr_fd, timeout=self.timeout,
                                      preexec_fn=child_setup, start_new_session=new_process_group)
                trace.exit_status = proc.returncode
            except subprocess.TimeoutExpired:
                trace.timed_out = True
                trace.truncated = True
            trace.duration_ms = (time.monotonic() - start) * 1000.0
            parser = StraceParser(self.table, cwd=self.path_map(os.path.realpath(cwd)),
                                  path_map=self.path_map)
            records = parser.parse(out.read().splitlines())
        if len(records) > self.max_records:
            records = records[: self.max_records]
            trace.truncated = True
        trace.records = records
        return trace
