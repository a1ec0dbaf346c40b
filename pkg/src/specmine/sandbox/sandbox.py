"""Isolated execution of one command against one materialized filesystem tree.

Every run happens in a short-lived helper process so that ptrace bookkeeping,
namespaces and mounts never touch the calling process:

* ``copy`` mode materializes the tree in a temporary directory and runs the
  command with its working directory pinned there.  Portable, unprivileged.
* ``overlay`` mode enters fresh user, mount and pid namespaces, overlays every
  top-level host directory on a tmpfs upperdir, mounts the tree at
  ``/scratch``, chroots, and diffs only the upperdirs afterwards.
"""

from __future__ import annotations

import ctypes
import os
import pickle
import posixpath
import resource
import select
import shutil
import signal
import stat
import tempfile
import time
import traceback
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

from .fsdiff import FsDiffEntry, diff_manifests, diff_overlay, manifest
from .ptrace import PtraceRecorder, RawTrace, TracerUnavailable, host_path_mapper
from .syscalls import SyscallRecord, SyscallTable, default_table

SCRATCH = "/scratch"
ROOT_PLACEHOLDER = "@ROOT@"
MODES = ("overlay", "copy")
DEVICES = ("tty", "null", "zero", "full", "random", "urandom")
SKIP_TOP = {"proc", "sys", "dev", "scratch"}
STD_PATH = "/usr/local/bin:/usr/bin:/bin:/usr/local/sbin:/usr/sbin:/sbin"

CLONE_NEWNS = 0x00020000
CLONE_NEWUSER = 0x10000000
CLONE_NEWPID = 0x20000000
MS_RDONLY = 1
MS_NOSUID = 2
MS_NODEV = 4
MS_REMOUNT = 32
MS_BIND = 4096
MS_REC = 16384
MS_PRIVATE = 1 << 18

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mount.argtypes = [ctypes.c_char_p, ctypes.c_char_p, ctypes.c_char_p, ctypes.c_ulong,
                        ctypes.c_char_p]


class SandboxUnavailable(RuntimeError):
    """Raised when the requested isolation mode cannot be set up here."""


class ExecFailure(RuntimeError):
    """The command could not be started inside the sandbox."""


@dataclass(frozen=True)
class TreeEntry:
    path: str            # relative to the scratch root
    kind: str            # "f" or "d"
    content: bytes = b""


@dataclass(frozen=True)
class TraceLimits:
    timeout: float = 10.0
    max_records: int = 50_000
    max_output: int = 1 << 20
    max_file_size: int = 64 << 20
    backend: str = "ptrace"


@dataclass
class ExecutionTrace:
    config_id: str
    exit_status: int | None
    syscalls: list[SyscallRecord] = field(default_factory=list)
    fs_diff: list[FsDiffEntry] = field(default_factory=list)
    stdout: bytes = b""
    stderr: bytes = b""
    duration_ms: float = 0.0
    truncated: bool = False
    timed_out: bool = False
    output_truncated: bool = False
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SandboxHandle:
    root: str
    mode: str
    base: str
    scratch_host: str
    result: ExecutionTrace | None = None
    before: dict[str, Any] | None = None
    closed: bool = False


def _mount(source: str | None, target: str, fstype: str | None, flags: int,
           data: str | None = None) -> None:
    enc = (lambda s: s.encode() if s is not None else None)
    if _libc.mount(enc(source), enc(target), enc(fstype), flags, enc(data)) != 0:
        err = ctypes.get_errno()
        raise OSError(err, f"mount {source} -> {target}: {os.strerror(err)}")


def materialize(tree: list[TreeEntry], root: str) -> None:
    os.makedirs(root, exist_ok=True)
    for e in sorted(tree, key=lambda e: e.path):
        full = os.path.join(root, e.path)
        if posixpath.isabs(e.path) or ".." in e.path.split("/"):
            raise ValueError(f"tree path escapes the scratch root: {e.path!r}")
        if e.kind == "d":
            os.makedirs(full, exist_ok=True)
        else:
            os.makedirs(os.path.dirname(full), exist_ok=True)
            with open(full, "wb") as fh:
                fh.write(e.content)


@lru_cache(maxsize=1)
def overlay_support() -> str | None:
    """None when overlay mode works here, otherwise the reason it does not."""
    if not hasattr(os, "fork") or os.uname().sysname != "Linux":
        return "overlay mode needs Linux"
    r, w = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(r)
        msg = b""
        try:
            _enter_namespaces()
            base = tempfile.mkdtemp(prefix="specmine-probe-")
            try:
                lower, upper, work, tgt = (os.path.join(base, x) for x in "luwt")
                for d in (lower, upper, work, tgt):
                    os.mkdir(d)
                _mount("overlay", tgt, "overlay", 0, f"lowerdir={lower},upperdir={upper},workdir={work}")
            finally:
                shutil.rmtree(base, ignore_errors=True)
        except BaseException as exc:  # noqa: BLE001
            msg = str(exc).encode()[:2000] or b"error"
        os.write(w, msg)
        os._exit(0)
    os.close(w)
    out = b""
    while chunk := os.read(r, 4096):
        out += chunk
    os.close(r)
    os.waitpid(pid, 0)
    return out.decode() or None


def _enter_namespaces() -> None:
    uid, gid = os.getuid(), os.getgid()
    if _libc.unshare(CLONE_NEWUSER | CLONE_NEWNS | CLONE_NEWPID) != 0:
        err = ctypes.get_errno()
        raise SandboxUnavailable(f"unshare failed: {os.strerror(err)}")
    with open("/proc/self/setgroups", "w") as fh:
        fh.write("deny")
    with open("/proc/self/uid_map", "w") as fh:
        fh.write(f"0 {uid} 1")
    with open("/proc/self/gid_map", "w") as fh:
        fh.write(f"0 {gid} 1")
    _mount(None, "/", None, MS_REC | MS_PRIVATE)


def setup_sandbox(tree: list[TreeEntry], mode: str = "copy") -> SandboxHandle:
    if mode not in MODES:
        raise ValueError(f"unknown sandbox mode {mode!r}")
    if mode == "overlay":
        reason = overlay_support()
        if reason:
            raise SandboxUnavailable(f"overlay sandbox unavailable ({reason}); rerun with --mode copy")
    base = tempfile.mkdtemp(prefix="specmine-")
    if mode == "copy":
        scratch = os.path.join(base, "scratch")
        materialize(tree, scratch)
        h = SandboxHandle(SCRATCH, mode, base, scratch)
        h.before = manifest(scratch)
        return h
    lower = os.path.join(base, "lower")
    materialize(tree, lower)
    return SandboxHandle(SCRATCH, mode, base, lower)


def resolve_argv(argv: list[str], handle: SandboxHandle) -> list[str]:
    root = handle.scratch_host if handle.mode == "copy" else SCRATCH
    return [a.replace(ROOT_PLACEHOLDER, root) for a in argv]


def _recorder(table: SyscallTable, limits: TraceLimits, path_map):
    if limits.backend == "strace":
        from .strace import StraceRecorder

        return StraceRecorder(table, timeout=limits.timeout, max_records=limits.max_records,
                              path_map=path_map)
    return PtraceRecorder(table, timeout=limits.timeout, max_records=limits.max_records,
                          path_map=path_map)


@dataclass
class _Streams:
    """Child-side descriptors for one run."""
    stdin: int
    stdout: int
    stderr: int


def _pump(res_r: int, in_w: int, out_r: int, err_r: int, stdin: bytes, cap: int,
          deadline: float, grace: float = 2.0) -> tuple[bytes, bytes, bool, bytes | None]:
    """Parent-side loop: feed stdin, drain both outputs, collect the helper's result."""
    pending = memoryview(stdin)
    os.set_blocking(in_w, False)
    if not pending:
        os.close(in_w)
        in_w = -1
    bufs = {out_r: bytearray(), err_r: bytearray()}
    overflow = False
    result = bytearray()
    open_reads = {res_r, out_r, err_r}
    result_done_at: float | None = None
    while open_reads:
        now = time.monotonic()
        if now > deadline:
            return bytes(bufs[out_r]), bytes(bufs[err_r]), overflow, None
        if result_done_at is not None and now - result_done_at > grace:
            break
        writers = [in_w] if in_w >= 0 else []
        rl, wl, _ = select.select(list(open_reads), writers, [], 0.5)
        for fd in wl:
            try:
                n = os.write(fd, pending[:65536])
                pending = pending[n:]
            except (BrokenPipeError, BlockingIOError) as exc:
                if isinstance(exc, BrokenPipeError):
                    pending = pending[:0]
            if not pending:
                os.close(in_w)
                in_w = -1
        for fd in rl:
            chunk = os.read(fd, 1 << 16)
            if not chunk:
                open_reads.discard(fd)
                if fd == res_r:
                    result_done_at = time.monotonic()
                continue
            if fd == res_r:
                result += chunk
                continue
            room = cap - len(bufs[fd])
            if room < len(chunk):
                overflow = True
            if room > 0:
                bufs[fd] += chunk[:room]
    if in_w >= 0:
        os.close(in_w)
    return bytes(bufs[out_r]), bytes(bufs[err_r]), overflow, bytes(result) if res_r not in open_reads else None


def _limit_files(limit: int) -> None:
    resource.setrlimit(resource.RLIMIT_FSIZE, (limit, limit))
    resource.setrlimit(resource.RLIMIT_CORE, (0, 0))


def _child_env(home: str) -> dict[str, str]:
    return {"PATH": STD_PATH, "LC_ALL": "C", "LANG": "C", "TZ": "UTC", "HOME": home}


def _finish(raw: RawTrace, config_id: str) -> ExecutionTrace:
    tr = ExecutionTrace(config_id, raw.exit_status, list(raw.records), [], b"", b"",
                        raw.duration_ms, raw.truncated, raw.timed_out)
    if raw.exec_error:
        tr.error = f"exec: {raw.exec_error}"
    return tr


def _run_copy(handle: SandboxHandle, argv: list[str], io: _Streams, limits: TraceLimits,
              table: SyscallTable, config_id: str) -> ExecutionTrace:
    scratch = handle.scratch_host
    mapper = host_path_mapper([(scratch, SCRATCH), (os.path.realpath(scratch), SCRATCH)])
    rec = _recorder(table, limits, mapper)
    raw = rec.run(argv, cwd=scratch, env=_child_env(scratch), stdin_fd=io.stdin,
                  stdout_fd=io.stdout, stderr_fd=io.stderr,
                  child_setup=lambda: _limit_files(limits.max_file_size))
    return _finish(raw, config_id)


def _build_root(base: str, lower: str) -> tuple[str, list[tuple[str, str]]]:
    """Inside fresh namespaces: assemble the overlay root; return it and its upperdirs."""
    t = os.path.join(base, "t")
    os.mkdir(t)
    _mount("tmpfs", t, "tmpfs", MS_NOSUID, "mode=0755")
    root, upper, work = (os.path.join(t, x) for x in ("root", "upper", "work"))
    for d in (root, upper, work):
        os.mkdir(d)
    uppers: list[tuple[str, str]] = []
    for name in sorted(os.listdir("/")):
        if name in SKIP_TOP:
            continue
        src = "/" + name
        st = os.lstat(src)
        dst = os.path.join(root, name)
        if stat.S_ISLNK(st.st_mode):
            os.symlink(os.readlink(src), dst)
        elif stat.S_ISDIR(st.st_mode):
            os.mkdir(dst)
            up, wk = os.path.join(upper, name), os.path.join(work, name)
            os.mkdir(up)
            os.mkdir(wk)
            try:
                _mount("overlay", dst, "overlay", 0, f"lowerdir={src},upperdir={up},workdir={wk},userxattr")
                uppers.append((up, src))
            except OSError:
                _mount(src, dst, None, MS_BIND | MS_REC)
                try:
                    _mount(None, dst, None, MS_REMOUNT | MS_BIND | MS_RDONLY)
                except OSError:
                    pass
        elif stat.S_ISREG(st.st_mode):
            shutil.copy2(src, dst)
    dev = os.path.join(root, "dev")
    os.mkdir(dev)
    for d in DEVICES:
        node = os.path.join(dev, d)
        if os.path.exists("/dev/" + d):
            open(node, "w").close()
            try:
                _mount("/dev/" + d, node, None, MS_BIND)
            except OSError:
                os.unlink(node)
    for name, target in (("fd", "/proc/self/fd"), ("stdin", "/proc/self/fd/0"),
                         ("stdout", "/proc/self/fd/1"), ("stderr", "/proc/self/fd/2")):
        os.symlink(target, os.path.join(dev, name))
    os.mkdir(os.path.join(dev, "shm"))
    os.mkdir(os.path.join(root, "proc"))
    os.mkdir(os.path.join(root, "sys"))
    sroot = os.path.join(root, "scratch")
    os.mkdir(sroot)
    sup, swk = os.path.join(upper, "scratch"), os.path.join(work, "scratch")
    os.mkdir(sup)
    os.mkdir(swk)
    _mount("overlay", sroot, "overlay", 0, f"lowerdir={lower},upperdir={sup},workdir={swk},userxattr")
    uppers.insert(0, (sup, lower))
    return root, uppers


def _run_overlay(handle: SandboxHandle, argv: list[str], io: _Streams, limits: TraceLimits,
                 table: SyscallTable, config_id: str) -> ExecutionTrace:
    _enter_namespaces()
    root, uppers = _build_root(handle.base, handle.scratch_host)
    mapper = host_path_mapper([(root, "")])

    def enter() -> None:
        _mount("proc", os.path.join(root, "proc"), "proc", MS_NOSUID | MS_NODEV)
        os.chroot(root)
        _limit_files(limits.max_file_size)

    rec = _recorder(table, limits, mapper)
    raw = rec.run(argv, cwd=SCRATCH, env=_child_env(SCRATCH), stdin_fd=io.stdin,
                  stdout_fd=io.stdout, stderr_fd=io.stderr, child_setup=enter)
    tr = _finish(raw, config_id)
    diff = diff_overlay(uppers[0][0], uppers[0][1], SCRATCH)
    for up, src in uppers[1:]:
        diff.extend(diff_overlay(up, src, src))
    tr.fs_diff = sorted(set(diff))
    return tr


def trace_execution(handle: SandboxHandle, argv: list[str], stdin: bytes | None = None,
                    limits: TraceLimits = TraceLimits(), *, table: SyscallTable | None = None,
                    config_id: str = "") -> ExecutionTrace:
    """Run ``argv`` once inside ``handle``; each handle supports a single run."""
    if handle.result is not None:
        raise RuntimeError("sandbox handle already used; set up a fresh one per run")
    table = table or default_table()
    argv = resolve_argv(argv, handle)
    runner = _run_copy if handle.mode == "copy" else _run_overlay
    in_r, in_w = os.pipe()
    out_r, out_w = os.pipe()
    err_r, err_w = os.pipe()
    r, w = os.pipe()
    pid = os.fork()
    if pid == 0:
        for fd in (r, in_w, out_r, err_r):
            os.close(fd)
        try:
            os.setsid()
            res: Any = runner(handle, argv, _Streams(in_r, out_w, err_w), limits, table, config_id)
        except BaseException as exc:  # noqa: BLE001 - shipped back to the parent
            res = ("error", type(exc).__name__, str(exc), traceback.format_exc())
        try:
            for fd in (in_r, out_w, err_w):
                os.close(fd)
            data = pickle.dumps(res)
            view = memoryview(data)
            while view:
                n = os.write(w, view)
                view = view[n:]
        finally:
            os._exit(0)
    for fd in (w, in_r, out_w, err_w):
        os.close(fd)
    deadline = time.monotonic() + limits.timeout + 60
    stdout, stderr, overflow, payload = _pump(r, in_w, out_r, err_r, stdin or b"",
                                              limits.max_output, deadline)
    for fd in (r, out_r, err_r):
        os.close(fd)
    if payload is None:
        try:
            os.kill(pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
    os.waitpid(pid, 0)
    try:
        res = pickle.loads(payload) if payload else ("error", "HelperDied", "helper exited without result", "")
    except Exception as exc:  # noqa: BLE001
        res = ("error", "HelperDied", f"unreadable helper result: {exc}", "")
    if isinstance(res, tuple):
        _, kind, msg, _tb = res
        if kind in ("SandboxUnavailable",):
            raise SandboxUnavailable(msg)
        if kind == "TracerUnavailable":
            raise TracerUnavailable(msg)
        res = ExecutionTrace(config_id, None, error=f"{kind}: {msg}")
    if handle.mode == "copy":
        # hide the per-run temp location so outputs are comparable across runs
        stdout = stdout.replace(handle.scratch_host.encode(), SCRATCH.encode())
        stderr = stderr.replace(handle.scratch_host.encode(), SCRATCH.encode())
    res.stdout, res.stderr, res.output_truncated = stdout, stderr, overflow
    handle.result = res
    return res


def diff_filesystem(handle: SandboxHandle) -> list[FsDiffEntry]:
    if handle.result is None:
        raise RuntimeError("nothing ran in this sandbox yet")
    if handle.mode == "copy":
        return diff_manifests(handle.before or {}, manifest(handle.scratch_host), SCRATCH)
    return list(handle.result.fs_diff)


def teardown(handle: SandboxHandle) -> None:
    if not handle.closed:
        shutil.rmtree(handle.base, ignore_errors=True)
        handle.closed = True


def execute(tree: list[TreeEntry], argv: list[str], stdin: bytes | None = None, *,
            mode: str = "copy", limits: TraceLimits = TraceLimits(),
            table: SyscallTable | None = None, config_id: str = "") -> ExecutionTrace:
    """Set up, run, diff and tear down in one call."""
    handle = setup_sandbox(tree, mode)
    try:
        tr = trace_execution(handle, argv, stdin, limits, table=table, config_id=config_id)
        if tr.error is None or tr.error.startswith("exec:"):
            tr.fs_diff = diff_filesystem(handle)
        return tr
    finally:
        teardown(handle)
