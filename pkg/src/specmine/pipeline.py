"""End-to-end orchestration with digest-keyed stage caching.

Each stage writes one artifact atomically and records, in ``run.json``, a cache
key built from its inputs' digests and parameters. A rerun with the same key and
an intact artifact skips the stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .content import ContentStore
from .derive import CommandSpec, assemble_spec, load_cmdspec, serialize_cmdspec
from .export import SUFFIX, TARGETS, export, write_atomic
from .generate import GenerationLimits, InvocationConfig, all_configs, targeted_configs
from .inference import DocSource, InferenceReport, LlmBackend, Prompter, infer_syntax_spec
from .sandbox.runner import BatchOptions, read_archive, run_batch, traces_digest, write_archive
from .sandbox.sandbox import ExecutionTrace, TraceLimits
from .sandbox.syscalls import SyscallTable, default_table
from .syntax import SyntaxSpec, load_spec, serialize_spec, spec_digest


class InferenceFailed(RuntimeError):
    def __init__(self, report: InferenceReport) -> None:
        why = report.transport_error or (report.attempts[-1].violations[:3] if report.attempts else "no attempts")
        super().__init__(f"could not infer a valid syntax spec for {report.command} "
                         f"after {len(report.attempts)} attempt(s): {why}")
        self.report = report


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(*parts: Any) -> str:
    return sha256_text(json.dumps(parts, sort_keys=True, default=str))


@dataclass
class PipelineOptions:
    out_dir: str
    limits: GenerationLimits = GenerationLimits()
    trace_limits: TraceLimits = TraceLimits()
    mode: str = "copy"
    jobs: int = 1
    backend: LlmBackend | None = None
    retry_limit: int = 3
    targets: tuple[str, ...] = ()
    force: bool = False
    table: SyscallTable | None = None
    prompter: Prompter | None = None


@dataclass
class StageRecord:
    name: str
    key: str
    artifact: str
    digest: str
    seconds: float
    skipped: bool = False

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class PipelineRun:
    command: str
    out_dir: str
    seed: int
    limits: dict[str, Any]
    stages: list[StageRecord] = field(default_factory=list)
    cmdspec: CommandSpec | None = None
    inference: InferenceReport | None = None

    @property
    def completed(self) -> list[str]:
        return [s.name for s in self.stages]

    @property
    def artifacts(self) -> dict[str, str]:
        return {s.name: s.artifact for s in self.stages}

    def to_json(self) -> dict[str, Any]:
        return {"tool_version": __version__, "command": self.command, "seed": self.seed, "limits": self.limits,
                "stages": [s.to_json() for s in self.stages]}


class _Cache:
    """The previous ``run.json`` of an output directory."""

    def __init__(self, out_dir: Path, force: bool) -> None:
        self.path = out_dir / "run.json"
        self.prev: dict[str, dict[str, Any]] = {}
        if self.path.is_file() and not force:
            try:
                self.prev = {s["name"]: s for s in json.loads(self.path.read_text())["stages"]}
            except (ValueError, KeyError, TypeError):
                self.prev = {}

    def hit(self, name: str, key: str, artifact: Path) -> str | None:
        s = self.prev.get(name)
        if s and s["key"] == key and artifact.is_file() and file_digest(artifact) == s["digest"]:
            return s["digest"]
        return None


def _stage(run: PipelineRun, cache: _Cache, name: str, key: str, artifact: Path,
           produce: Callable[[], None]) -> bool:
    """Run ``produce`` unless cached; returns True when the stage actually ran."""
    t0 = time.monotonic()
    digest = cache.hit(name, key, artifact)
    ran = digest is None
    if ran:
        produce()
        digest = file_digest(artifact)
    run.stages.append(StageRecord(name, key, str(artifact), digest, round(time.monotonic() - t0, 3), not ran))
    return ran


def write_configs(path: str | os.PathLike, configs: Sequence[InvocationConfig]) -> None:
    write_atomic(str(path), "".join(json.dumps(c.to_json(), sort_keys=True, separators=(",", ":")) + "\n"
                                    for c in configs))


def read_configs(path: str | os.PathLike) -> list[InvocationConfig]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(InvocationConfig.from_json(json.loads(line)))
    return out


def provenance(configs: Sequence[InvocationConfig], traces: Sequence[ExecutionTrace], syntax: SyntaxSpec,
               limits: GenerationLimits, trace_limits: TraceLimits) -> dict[str, Any]:
    return {"tool_version": __version__, "traces_digest": traces_digest(configs, traces),
            "syntax_digest": spec_digest(syntax), "limits": limits.to_json(),
            "trace_limits": {"timeout": trace_limits.timeout, "max_records": trace_limits.max_records,
                             "max_output": trace_limits.max_output}}


def require_on_path(command: str) -> None:
    if shutil.which(command) is None:
        raise ValueError(f"command {command!r} is not executable on PATH; install it or replay with --from-traces")


def derive_from_archive(path: str, syntax: SyntaxSpec, limits: GenerationLimits = GenerationLimits(),
                        trace_limits: TraceLimits = TraceLimits()) -> CommandSpec:
    configs, traces = read_archive(path)
    store = ContentStore(limits.content_dir, limits.seed)
    return assemble_spec(configs, traces, syntax, store=store,
                         provenance=provenance(configs, traces, syntax, limits, trace_limits))


def run_pipeline(opts: PipelineOptions, *, doc: DocSource | None = None, synspec: str | SyntaxSpec | None = None,
                 from_traces: str | None = None, targeted: Sequence[str] | None = None) -> PipelineRun:
    """doc -> syntax spec -> configurations -> traces -> command spec -> exports."""
    out = Path(opts.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = _Cache(out, opts.force)
    table = opts.table or default_table()

    # syntax
    if isinstance(synspec, SyntaxSpec):
        syntax = synspec
    elif synspec is not None:
        syntax = load_spec(synspec)
    elif doc is not None:
        syntax = None
    else:
        raise ValueError("need documentation, a syntax spec, or both")
    command = syntax.command if syntax else doc.command
    run = PipelineRun(command, str(out), opts.limits.seed, opts.limits.to_json())

    syn_path = out / f"{command}.synspec.json"
    if syntax is None:
        if opts.backend is None:
            raise ValueError("inference needs an LLM backend")
        key = _key("infer", sha256_text(doc.text), doc.command, getattr(opts.backend, "model_id", ""),
                   opts.retry_limit, __version__)

        def produce_syntax() -> None:
            rep = infer_syntax_spec(doc, opts.backend, opts.retry_limit, opts.prompter)
            run.inference = rep
            write_atomic(str(out / f"{command}.inference.json"), json.dumps(rep.to_json(), indent=2) + "\n")
            if not rep.succeeded:
                raise InferenceFailed(rep)
            write_atomic(str(syn_path), serialize_spec(rep.spec))

        _stage(run, cache, "infer", key, syn_path, produce_syntax)
        syntax = load_spec(str(syn_path))
    else:
        write_atomic(str(syn_path), serialize_spec(syntax))
    syn_digest = spec_digest(syntax)

    # configurations and traces
    store = ContentStore(opts.limits.content_dir, opts.limits.seed)
    if from_traces:
        arch = Path(from_traces)
        configs, traces = read_archive(str(arch))
        run.stages.append(StageRecord("trace", "replay", str(arch), file_digest(arch), 0.0, True))
    else:
        require_on_path(command)
        cfg_path = out / "configs.ndjson"
        gen_key = _key("generate", syn_digest, opts.limits.to_json(), list(targeted or []), __version__)
        configs_box: list[list[InvocationConfig]] = []

        def produce_configs() -> None:
            with warnings.catch_warnings():
                warnings.simplefilter("always")
                cfgs = (targeted_configs(syntax, list(targeted), opts.limits, store) if targeted
                        else all_configs(syntax, opts.limits, store))
            configs_box.append(cfgs)
            write_configs(cfg_path, cfgs)

        _stage(run, cache, "generate", gen_key, cfg_path, produce_configs)
        configs = configs_box[0] if configs_box else read_configs(cfg_path)

        arch = out / "traces.ndjson"
        trace_key = _key("trace", run.stages[-1].digest, opts.mode, dataclasses.asdict(opts.trace_limits),
                         sorted(table.traced), __version__)

        def produce_traces() -> None:
            bo = BatchOptions(opts.mode, opts.jobs, opts.trace_limits, opts.limits.content_dir, opts.limits.seed)
            trs = run_batch(configs, bo, table)
            write_archive(str(arch), configs, trs)

        _stage(run, cache, "trace", trace_key, arch, produce_traces)
        configs, traces = read_archive(str(arch))

    # derivation
    spec_path = out / f"{command}.cmdspec.json"
    derive_key = _key("derive", run.stages[-1].digest, syn_digest, opts.limits.to_json(), __version__)

    def produce_spec() -> None:
        cs = assemble_spec(configs, traces, syntax, store=store,
                           provenance=provenance(configs, traces, syntax, opts.limits, opts.trace_limits))
        write_atomic(str(spec_path), serialize_cmdspec(cs))

    _stage(run, cache, "derive", derive_key, spec_path, produce_spec)
    run.cmdspec = load_cmdspec(str(spec_path))
    spec_digest_ = run.stages[-1].digest

    for t in opts.targets:
        if t not in TARGETS:
            raise ValueError(f"unknown export target {t!r}")
        p = out / f"{command}{SUFFIX[t]}"
        _stage(run, cache, f"export:{t}", _key("export", t, spec_digest_, __version__), p,
               lambda t=t, p=p: export(run.cmdspec, t, str(p)))

    write_atomic(str(out / "run.json"), json.dumps(run.to_json(), indent=2, sort_keys=True) + "\n")
    return run


def targeted_spec(syntax: SyntaxSpec, argv: Sequence[str], opts: PipelineOptions) -> CommandSpec:
    """Spec fragment for one literal invocation, served from a cached full spec when possible."""
    from .generate import targeted_configs as _tc

    template_cfgs = _tc(syntax, list(argv), opts.limits)
    key = template_cfgs[0].key
    cached = Path(opts.out_dir) / f"{syntax.command}.cmdspec.json"
    if cached.is_file() and not opts.force:
        full = load_cmdspec(str(cached))
        if spec_digest(full.syntax) == spec_digest(syntax) and full.get(key) is not None:
            return dataclasses.replace(full, invocations=(full.get(key),))
    sub = dataclasses.replace(opts, out_dir=str(Path(opts.out_dir) / f"targeted-{key.digest}"), targets=())
    run = run_pipeline(sub, synspec=syntax, targeted=list(argv))
    inv = run.cmdspec.get(key)
    return dataclasses.replace(run.cmdspec, invocations=(inv,) if inv else ())
