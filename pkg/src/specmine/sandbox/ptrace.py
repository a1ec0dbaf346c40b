"""In-process syscall recorder built on ptrace(2) and a seccomp-BPF filter.

The tracee installs a filter that returns ``SECCOMP_RET_TRACE`` only for the
configured syscall numbers, so unlisted calls never stop the tracee.  Each
seccomp stop is followed by one syscall-exit stop to collect the return value.

x86_64 only.
"""

from __future__ import annotations

import ctypes
import errno
import os
import platform
import posixpath
import shutil
import signal
import time
from dataclasses import dataclass, field
from typing import Callable

from .syscalls import SyscallRecord, SyscallTable, describe_link, make_record, quote, render_fd

libc = ctypes.CDLL(None, use_errno=True)
libc.ptrace.restype = ctypes.c_long
libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_int, ctypes.c_void_p, ctypes.c_void_p]

PTRACE_CONT = 7
PTRACE_GETREGS = 12
PTRACE_SYSCALL = 24
PTRACE_SEIZE = 0x4206

PTRACE_O_TRACESYSGOOD = 0x1
PTRACE_O_TRACEFORK = 0x2
PTRACE_O_TRACEVFORK = 0x4
PTRACE_O_TRACECLONE = 0x8
PTRACE_O_TRACEEXEC = 0x10
PTRACE_O_TRACESECCOMP = 0x80
PTRACE_O_EXITKILL = 0x100000

PTRACE_EVENT_SECCOMP = 7

PR_SET_NO_NEW_PRIVS = 38
PR_SET_SECCOMP = 22
SECCOMP_MODE_FILTER = 2
SECCOMP_RET_ALLOW = 0x7FFF0000
SECCOMP_RET_TRACE = 0x7FF00000
AUDIT_ARCH_X86_64 = 0xC000003E
X32_SYSCALL_BIT = 0x40000000

WALL = 0x40000000

AT_FDCWD = -100

_OPEN_BITS = [
    (0o100, "O_CREAT"), (0o200, "O_EXCL"), (0o400, "O_NOCTTY"), (0o1000, "O_TRUNC"),
    (0o2000, "O_APPEND"), (0o4000, "O_NONBLOCK"), (0o10000, "O_DSYNC"), (0o40000, "O_DIRECT"),
    (0o100000, "O_LARGEFILE"), (0o200000, "O_DIRECTORY"), (0o400000, "O_NOFOLLOW"),
    (0o1000000, "O_NOATIME"), (0o2000000, "O_CLOEXEC"), (0o10000000, "O_PATH"),
]
_AT_BITS = [
    (0x100, "AT_SYMLINK_NOFOLLOW"), (0x200, "AT_REMOVEDIR"), (0x400, "AT_SYMLINK_FOLLOW"),
    (0x800, "AT_NO_AUTOMOUNT"), (0x1000, "AT_EMPTY_PATH"),
]


class TracerUnavailable(RuntimeError):
    pass


class user_regs_struct(ctypes.Structure):
    _fields_ = [(name, ctypes.c_ulonglong) for name in (
        "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8", "rax", "rcx",
        "rdx", "rsi", "rdi", "orig_rax", "rip", "cs", "eflags", "rsp", "ss", "fs_base",
        "gs_base", "ds", "es", "fs", "gs")]


class sock_filter(ctypes.Structure):
    _fields_ = [("code", ctypes.c_ushort), ("jt", ctypes.c_ubyte),
                ("jf", ctypes.c_ubyte), ("k", ctypes.c_uint)]


class sock_fprog(ctypes.Structure):
    _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.POINTER(sock_filter))]


def _bits(value: int, table: list[tuple[int, str]]) -> str:
    names = []
    for bit, name in table:
        if value & bit:
            names.append(name)
            value &= ~bit
    if value:
        names.append(hex(value))
    return "|".join(names) if names else "0"


def render_open_flags(value: int) -> str:
    acc = ("O_RDONLY", "O_WRONLY", "O_RDWR", "O_ACCMODE")[value & 3]
    rest = _bits(value & ~3, _OPEN_BITS)
    return acc if rest == "0" else f"{acc}|{rest}"


def render_at_flags(value: int) -> str:
    return _bits(value, _AT_BITS)


def render_access_mode(value: int) -> str:
    if value == 0:
        return "F_OK"
    return _bits(value, [(4, "R_OK"), (2, "W_OK"), (1, "X_OK")])


def _signed(v: int) -> int:
    return v - (1 << 64) if v >= 1 << 63 else v


def check_available() -> None:
    if platform.machine() != "x86_64":
        raise TracerUnavailable(f"ptrace recorder supports x86_64 only, not {platform.machine()}")


def seccomp_program(numbers: list[int]) -> tuple[sock_fprog, ctypes.Array]:
    """Filter: trace the listed numbers, allow everything else."""
    n = len(numbers)
    allow, trace = 4 + n, 5 + n
    ins = [
        (0x20, 0, 0, 4),                                  # ld arch
        (0x15, 0, allow - 2, AUDIT_ARCH_X86_64),          # jeq arch
        (0x20, 0, 0, 0),                                  # ld nr
        (0x35, allow - 4, 0, X32_SYSCALL_BIT),            # jge x32 -> allow
    ]
    for i, nr in enumerate(numbers):
        pc = 4 + i
        ins.append((0x15, trace - pc - 1, 0, nr))
    ins.append((0x06, 0, 0, SECCOMP_RET_ALLOW))
    ins.append((0x06, 0, 0, SECCOMP_RET_TRACE))
    arr = (sock_filter * len(ins))(*[sock_filter(*i) for i in ins])
    return sock_fprog(len(ins), arr), arr


def _install_filter(prog: sock_fprog) -> None:
    if libc.prctl(PR_SET_NO_NEW_PRIVS, ctypes.c_ulong(1), ctypes.c_ulong(0),
                  ctypes.c_ulong(0), ctypes.c_ulong(0)) != 0:
        raise OSError(ctypes.get_errno(), "prctl(NO_NEW_PRIVS)")
    if libc.prctl(PR_SET_SECCOMP, ctypes.c_ulong(SECCOMP_MODE_FILTER),
                  ctypes.byref(prog), ctypes.c_ulong(0), ctypes.c_ulong(0)) != 0:
        raise OSError(ctypes.get_errno(), "prctl(SECCOMP)")


def _ptrace(req: int, pid: int, addr: int = 0, data: int = 0) -> int:
    res = libc.ptrace(req, pid, ctypes.c_void_p(addr), ctypes.c_void_p(data))
    if res == -1:
        err = ctypes.get_errno()
        if err:
            raise OSError(err, os.strerror(err))
    return res


@dataclass
class RawTrace:
    records: list[SyscallRecord] = field(default_factory=list)
    exit_status: int | None = None
    timed_out: bool = False
    truncated: bool = False
    exec_error: str | None = None
    duration_ms: float = 0.0


class PtraceRecorder:
    """Run one command under ptrace and collect normalized syscall records.

    ``path_map`` rewrites host paths into the sandbox view (e.g. the copy-mode
    scratch directory becomes ``/scratch``).  ``child_setup`` runs in the
    forked child before exec (chroot, mounts).
    """

    def __init__(self, table: SyscallTable, *, timeout: float = 10.0,
                 max_records: int = 50_000,
                 path_map: Callable[[str], str] = lambda p: p) -> None:
        check_available()
        self.table = table
        self.timeout = timeout
        self.max_records = max_records
        self.path_map = path_map
        self._names = table.numbers()
        # execve marks where recording starts, so it is intercepted even when untraced
        self._record_exec = "execve" in table.traced
        self._names.setdefault(table.entry("execve")["nr"], "execve")

    # -- tracee memory ------------------------------------------------------

    def _read_bytes(self, pid: int, addr: int, limit: int = 4096) -> bytes:
        if addr == 0:
            return b""
        out = bytearray()
        try:
            fd = os.open(f"/proc/{pid}/mem", os.O_RDONLY)
        except OSError:
            return b""
        try:
            while len(out) < limit:
                chunk = 4096 - (addr % 4096)
                try:
                    data = os.pread(fd, chunk, addr)
                except OSError:
                    break
                if not data:
                    break
                nul = data.find(b"\0")
                if nul >= 0:
                    out += data[:nul]
                    return bytes(out)
                out += data
                addr += len(data)
        finally:
            os.close(fd)
        return bytes(out[:limit])

    def _read_u64(self, pid: int, addr: int) -> int:
        try:
            fd = os.open(f"/proc/{pid}/mem", os.O_RDONLY)
        except OSError:
            return 0
        try:
            data = os.pread(fd, 8, addr)
        except OSError:
            return 0
        finally:
            os.close(fd)
        return int.from_bytes(data.ljust(8, b"\0"), "little")

    def _fd_link(self, pid: int, fd: int) -> str | None:
        try:
            link = os.readlink(f"/proc/{pid}/fd/{fd}")
        except OSError:
            return None
        return describe_link(self.path_map(link))

    def _cwd(self, pid: int) -> str | None:
        try:
            return self.path_map(os.readlink(f"/proc/{pid}/cwd"))
        except OSError:
            return None

    def _path_arg(self, pid: int, addr: int) -> str:
        raw = self._read_bytes(pid, addr)
        mapped = self.path_map(raw.decode("utf-8", "surrogateescape"))
        return quote(mapped.encode("utf-8", "surrogateescape"))

    def _render(self, pid: int, name: str, regs: user_regs_struct) -> list[str]:
        vals = [regs.rdi, regs.rsi, regs.rdx, regs.r10, regs.r8, regs.r9]
        sig = self.table.entries[name]["sig"]
        out: list[str] = []
        for i, kind in enumerate(sig):
            v = vals[i]
            if kind == "path":
                out.append(self._path_arg(pid, v))
            elif kind in ("fd", "dirfd"):
                fd = ctypes.c_int(v & 0xFFFFFFFF).value
                out.append(render_fd(fd, None if fd == AT_FDCWD else self._fd_link(pid, fd)))
            elif kind == "oflags":
                out.append(render_open_flags(v))
            elif kind == "how":
                out.append("{flags=%s}" % render_open_flags(self._read_u64(pid, v)))
            elif kind == "atflags":
                out.append(render_at_flags(v & 0xFFFFFFFF))
            elif kind == "amode":
                out.append(render_access_mode(v & 0xFFFFFFFF))
            elif kind in ("mode", "mode?"):
                if kind == "mode?" and not (vals[i - 1] & 0o100):
                    continue
                out.append("0%o" % (v & 0o7777) if v & 0o7777 else "000")
            elif kind == "argv":
                items = []
                for k in range(64):
                    ptr = self._read_u64(pid, v + 8 * k)
                    if ptr == 0:
                        break
                    raw = self._read_bytes(pid, ptr).decode("utf-8", "surrogateescape")
                    items.append(quote(self.path_map(raw).encode("utf-8", "surrogateescape")))
                out.append("[" + ", ".join(items) + "]")
            elif kind == "outstr":
                out.append("_")  # filled at syscall exit
            elif kind == "buf":
                out.append("_")
            else:
                out.append(str(_signed(v)))
        return out

    # -- main loop ----------------------------------------------------------

    def run(self, argv: list[str], *, cwd: str, env: dict[str, str], stdin_fd: int,
            stdout_fd: int, stderr_fd: int, child_setup: Callable[[], None] | None = None,
            new_process_group: bool = True) -> RawTrace:
        prog, _keep = seccomp_program(sorted(self._names))
        sync_r, sync_w = os.pipe()
        err_r, err_w = os.pipe()
        start = time.monotonic()
        pid = os.fork()
        if pid == 0:  # tracee
            try:
                os.close(sync_w)
                os.close(err_r)
                if new_process_group:
                    os.setpgid(0, 0)
                if child_setup is not None:
                    child_setup()
                os.chdir(cwd)
                os.dup2(stdin_fd, 0)
                os.dup2(stdout_fd, 1)
                os.dup2(stderr_fd, 2)
                os.read(sync_r, 1)
                exe = shutil.which(argv[0], path=env.get("PATH")) or argv[0]
                _install_filter(prog)
                os.execve(exe, argv, env)
            except BaseException as exc:  # noqa: BLE001 - reported to the tracer
                try:
                    os.write(err_w, f"{type(exc).__name__}: {exc}".encode()[:4000])
                finally:
                    os._exit(127)
            os._exit(127)

        os.close(sync_r)
        os.close(err_w)
        trace = RawTrace()
        try:
            _ptrace(PTRACE_SEIZE, pid, 0,
                    PTRACE_O_TRACESYSGOOD | PTRACE_O_TRACEFORK | PTRACE_O_TRACEVFORK
                    | PTRACE_O_TRACECLONE | PTRACE_O_TRACEEXEC | PTRACE_O_TRACESECCOMP
                    | PTRACE_O_EXITKILL)
        except OSError:
            os.kill(pid, signal.SIGKILL)
            os.waitpid(pid, 0)
            os.close(sync_w)
            os.close(err_r)
            raise
        os.write(sync_w, b"x")
        os.close(sync_w)

        def _kill(*_: object) -> None:
            trace.timed_out = True
            try:
                if new_process_group:
                    os.killpg(pid, signal.SIGKILL)
                else:
                    os.kill(pid, signal.SIGKILL)
            except ProcessLookupError:
                pass

        # a signal-driven watchdog: threads may be unavailable (fresh pid namespace)
        previous = signal.signal(signal.SIGALRM, _kill)
        signal.setitimer(signal.ITIMER_REAL, self.timeout)
        try:
            self._loop(pid, trace)
        finally:
            signal.setitimer(signal.ITIMER_REAL, 0)
            signal.signal(signal.SIGALRM, previous)
        err = b""
        while True:
            chunk = os.read(err_r, 4096)
            if not chunk:
                break
            err += chunk
        os.close(err_r)
        if err:
            trace.exec_error = err.decode(errors="replace")
        trace.duration_ms = (time.monotonic() - start) * 1000.0
        if trace.timed_out:
            trace.truncated = True
        return trace

    def _loop(self, root: int, trace: RawTrace) -> None:
        pending: dict[int, tuple[str, list[str], str | None] | None] = {}
        recording = False
        capped = False

        def resume(tid: int, sig: int = 0) -> None:
            try:
                _ptrace(PTRACE_SYSCALL if tid in pending else PTRACE_CONT, tid, 0, sig)
            except ProcessLookupError:
                pass
            except OSError as exc:
                if exc.errno != errno.ESRCH:
                    raise

        while True:
            try:
                tid, status = os.waitpid(-1, WALL)
            except ChildProcessError:
                break
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                pending.pop(tid, None)
                if tid == root:
                    trace.exit_status = (os.WEXITSTATUS(status) if os.WIFEXITED(status)
                                         else -os.WTERMSIG(status))
                continue
            if not os.WIFSTOPPED(status):
                continue
            sig = os.WSTOPSIG(status)
            event = status >> 16
            if event == PTRACE_EVENT_SECCOMP:
                regs = user_regs_struct()
                try:
                    _ptrace(PTRACE_GETREGS, tid, 0, ctypes.addressof(regs))
                except OSError:
                    continue
                name = self._names.get(regs.orig_rax)
                if name is None or capped or (not recording and name != "execve"):
                    pending.pop(tid, None)
                    resume(tid)
                    continue
                if recording and len(trace.records) >= self.max_records:
                    trace.truncated = True
                    recording, capped = False, True
                    resume(tid)
                    continue
                pending[tid] = (name, self._render(tid, name, regs), self._cwd(tid))
                resume(tid)
            elif sig == (signal.SIGTRAP | 0x80):
                entry = pending.pop(tid, None)
                if entry is not None:
                    regs = user_regs_struct()
                    try:
                        _ptrace(PTRACE_GETREGS, tid, 0, ctypes.addressof(regs))
                    except OSError:
                        continue
                    name, args, cwd = entry
                    ret = _signed(regs.rax)
                    if name == "getcwd":
                        args[0] = (quote(self.path_map(self._read_bytes(tid, regs.rdi).decode(
                            "utf-8", "surrogateescape")).encode("utf-8", "surrogateescape"))
                                   if ret > 0 else "_")
                    if name == "execve" and not recording and ret == 0:
                        recording = True
                        cwd = self._cwd(tid)
                    if recording and (name != "execve" or self._record_exec):
                        trace.records.append(make_record(name, args, ret, cwd, self.table))
                resume(tid)
            elif event:
                resume(tid)
            elif sig == signal.SIGTRAP:
                resume(tid)
            else:
                resume(tid, sig)


def host_path_mapper(prefixes: list[tuple[str, str]]) -> Callable[[str], str]:
    """Build a prefix-rewriting function; longest prefix wins."""
    ordered = sorted(prefixes, key=lambda p: len(p[0]), reverse=True)

    def mapper(path: str) -> str:
        for host, view in ordered:
            if path == host:
                return view or "/"
            if path.startswith(host.rstrip("/") + "/"):
                rest = path[len(host.rstrip("/")):]
                return posixpath.normpath((view or "") + rest) if view else rest
        return path

    return mapper
