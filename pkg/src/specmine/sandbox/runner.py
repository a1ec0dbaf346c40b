"""Run many configurations, each in its own sandbox, and archive the traces."""

from __future__ import annotations

import base64
import hashlib
import json
import multiprocessing
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterable, Iterator

from ..atomic import publish
from ..content import ContentStore
from ..generate import InvocationConfig
from .fsdiff import FsDiffEntry
from .ptrace import TracerUnavailable
from .sandbox import ExecutionTrace, SandboxUnavailable, TraceLimits, execute, overlay_support
from .syscalls import SyscallRecord, SyscallTable, default_table

TIMING_FIELDS = ("duration_ms",)


@dataclass(frozen=True)
class BatchOptions:
    mode: str = "copy"
    jobs: int = 1
    limits: TraceLimits = TraceLimits()
    content_dir: str | None = None
    seed: int = 0


def trace_to_json(t: ExecutionTrace) -> dict[str, Any]:
    return {
        "config_id": t.config_id,
        "exit_status": t.exit_status,
        "syscalls": [r.to_dict() for r in t.syscalls],
        "fs_diff": [e.to_dict() for e in t.fs_diff],
        "stdout_b64": base64.b64encode(t.stdout).decode(),
        "stderr_b64": base64.b64encode(t.stderr).decode(),
        "duration_ms": round(t.duration_ms, 3),
        "truncated": t.truncated,
        "timed_out": t.timed_out,
        "output_truncated": t.output_truncated,
        "error": t.error,
    }


def trace_from_json(d: dict[str, Any]) -> ExecutionTrace:
    return ExecutionTrace(
        d["config_id"], d["exit_status"], [SyscallRecord.from_dict(r) for r in d["syscalls"]],
        [FsDiffEntry.from_dict(e) for e in d["fs_diff"]], base64.b64decode(d["stdout_b64"]),
        base64.b64decode(d["stderr_b64"]), d.get("duration_ms", 0.0), d["truncated"],
        d.get("timed_out", False), d.get("output_truncated", False), d.get("error"))


def execute_config(cfg: InvocationConfig, opts: BatchOptions, table: SyscallTable | None = None,
                   store: ContentStore | None = None) -> ExecutionTrace:
    store = store or ContentStore(opts.content_dir, opts.seed)
    try:
        tree = cfg.env.tree(store)
        stdin = store.resolve(cfg.stdin) if cfg.stdin is not None else None
        return execute(tree, list(cfg.argv), stdin, mode=opts.mode, limits=opts.limits,
                       table=table, config_id=cfg.config_id)
    except (SandboxUnavailable, TracerUnavailable):
        raise
    except Exception as exc:  # noqa: BLE001 - isolate per-config failures
        return ExecutionTrace(cfg.config_id, None, error=f"{type(exc).__name__}: {exc}")


_worker_state: dict[str, Any] = {}


def _init_worker(opts: BatchOptions, table: SyscallTable) -> None:
    _worker_state["opts"] = opts
    _worker_state["table"] = table
    _worker_state["store"] = ContentStore(opts.content_dir, opts.seed)


def _work(cfg: InvocationConfig) -> ExecutionTrace:
    return execute_config(cfg, _worker_state["opts"], _worker_state["table"], _worker_state["store"])


def check_mode(mode: str) -> None:
    if mode == "overlay":
        reason = overlay_support()
        if reason:
            raise SandboxUnavailable(f"overlay sandbox unavailable ({reason}); rerun with --mode copy")


def run_batch(configs: Iterable[InvocationConfig], opts: BatchOptions = BatchOptions(),
              table: SyscallTable | None = None) -> list[ExecutionTrace]:
    """Trace every configuration; results come back ordered by ``config_id``."""
    if opts.jobs < 1:
        raise ValueError("jobs must be positive")
    check_mode(opts.mode)
    table = table or default_table()
    configs = list(configs)
    if opts.jobs == 1 or len(configs) <= 1:
        _init_worker(opts, table)
        traces = [_work(c) for c in configs]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=opts.jobs, mp_context=ctx, initializer=_init_worker,
                                 initargs=(opts, table)) as pool:
            traces = list(pool.map(_work, configs, chunksize=max(1, len(configs) // (opts.jobs * 8))))
    return sorted(traces, key=lambda t: t.config_id)


# -- archive -----------------------------------------------------------------

def archive_lines(configs: Iterable[InvocationConfig], traces: Iterable[ExecutionTrace]) -> Iterator[str]:
    by_id = {c.config_id: c for c in configs}
    for t in sorted(traces, key=lambda t: t.config_id):
        cfg = by_id.get(t.config_id)
        rec = {"config": cfg.to_json() if cfg else None, "trace": trace_to_json(t)}
        yield json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_archive(path: str, configs: Iterable[InvocationConfig], traces: Iterable[ExecutionTrace]) -> str:
    """Write ``traces.ndjson`` atomically; returns its timing-insensitive digest."""
    lines = list(archive_lines(configs, traces))
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".traces-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        for ln in lines:
            fh.write(ln + "\n")
    publish(tmp, path)
    return archive_digest(lines)


def read_archive(path: str) -> tuple[list[InvocationConfig], list[ExecutionTrace]]:
    configs, traces = [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: not JSON ({exc.msg})") from None
            if rec.get("config") is not None:
                configs.append(InvocationConfig.from_json(rec["config"]))
            traces.append(trace_from_json(rec["trace"]))
    return configs, traces


def archive_digest(lines: Iterable[str]) -> str:
    """sha256 over records with timing fields removed."""
    h = hashlib.sha256()
    for ln in lines:
        rec = json.loads(ln)
        for f in TIMING_FIELDS:
            rec["trace"].pop(f, None)
        h.update(json.dumps(rec, sort_keys=True, separators=(",", ":")).encode())
        h.update(b"\n")
    return h.hexdigest()


def traces_digest(configs: Iterable[InvocationConfig], traces: Iterable[ExecutionTrace]) -> str:
    return archive_digest(archive_lines(configs, traces))
