"""Command-line entry point: ``specmine <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import shlex
import shutil
import subprocess
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .derive import DerivationError, load_cmdspec, serialize_cmdspec
from .export import SUFFIX, TARGETS, ExportError, export, write_atomic
from .generate import GenerationLimits, all_configs, targeted_configs
from .inference import (DEFAULT_RETRY_LIMIT, BackendError, ConfigError, DocSource, FixtureBackend, HttpBackend,
                        infer_syntax_spec)
from .invocation import InvocationError
from .normalize import RULES, NormalizationConfig, coverage_report
from .pipeline import (InferenceFailed, PipelineOptions, derive_from_archive, read_configs, require_on_path,
                       run_pipeline, targeted_spec, write_configs)
from .sandbox.ptrace import TracerUnavailable
from .sandbox.runner import BatchOptions, run_batch, write_archive
from .sandbox.sandbox import SandboxUnavailable, TraceLimits
from .sandbox.syscalls import default_table, load_syscall_set
from .syntax import InvalidSpec, SpecParseError, load_spec, serialize_spec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_INFERENCE, EXIT_SANDBOX, EXIT_PARTIAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 is reserved for inference failure here."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration ---------------------------------------------------------------

CONFIG_KEYS = {"max_flags", "jobs", "timeout", "mode", "backend", "seed", "retry_limit", "partitions",
               "max_configs", "content_dir", "syscalls", "llm_endpoint", "llm_model", "string_denylist",
               "export"}


def load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    p = Path(path)
    raw = p.read_bytes()
    data = tomllib.loads(raw.decode()) if p.suffix == ".toml" else json.loads(raw)
    if isinstance(data.get("specmine"), dict):
        data = data["specmine"]
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s) in {path}: {', '.join(sorted(unknown))}")
    return data


def _opt(args: argparse.Namespace, cfg: dict[str, Any], name: str, default: Any) -> Any:
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def generation_limits(args, cfg) -> GenerationLimits:
    return GenerationLimits(max_flags_options=_opt(args, cfg, "max_flags", 4),
                            seed=_opt(args, cfg, "seed", 0),
                            partitions=tuple(cfg.get("partitions", (2, 3))),
                            max_configs=cfg.get("max_configs", 100_000),
                            content_dir=cfg.get("content_dir"))


def trace_limits(args, cfg) -> TraceLimits:
    return TraceLimits(timeout=float(_opt(args, cfg, "timeout", 10.0)))


def syscall_table(cfg, args=None):
    path = getattr(args, "syscall_set", None) or cfg.get("syscalls")
    return load_syscall_set(path) if path else default_table()


def make_backend(spec: str | None, cfg: dict[str, Any]):
    spec = spec or cfg.get("backend") or "http"
    if spec.startswith("fixture:"):
        return FixtureBackend(spec.split(":", 1)[1])
    if spec == "http":
        return HttpBackend(cfg.get("llm_endpoint"), cfg.get("llm_model"))
    raise UsageError(f"unknown backend {spec!r}; use 'http' or 'fixture:DIR'")


def read_doc(args) -> DocSource:
    if getattr(args, "man", None):
        if not shutil.which("man"):
            raise UsageError("--man needs the 'man' program")
        env = dict(os.environ, MANPAGER="cat", PAGER="cat", MANWIDTH="100")
        proc = subprocess.run(["man", args.man], capture_output=True, text=True, env=env)
        if proc.returncode != 0 or not proc.stdout.strip():
            raise UsageError(f"man {args.man} failed: {proc.stderr.strip()}")
        return DocSource(args.command or args.man, proc.stdout, "man")
    if not args.command:
        raise UsageError("--command is required unless --man is given")
    if args.doc and args.doc != "-":
        return DocSource(args.command, Path(args.doc).read_text(encoding="utf-8"), "file")
    return DocSource(args.command, sys.stdin.read(), "help")


def _emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


# -- subcommands -----------------------------------------------------------------

def cmd_infer(args, cfg) -> int:
    doc = read_doc(args)
    report = infer_syntax_spec(doc, make_backend(args.backend, cfg), _opt(args, cfg, "retry_limit",
                                                                          DEFAULT_RETRY_LIMIT))
    if args.report:
        write_atomic(args.report, json.dumps(report.to_json(), indent=2) + "\n")
    if not report.succeeded:
        print(f"inference failed after {len(report.attempts)} attempt(s)", file=sys.stderr)
        for a in report.attempts:
            for v in (a.violations or [a.error or ""])[:5]:
                print(f"  - {v}", file=sys.stderr)
        return EXIT_INFERENCE
    _emit(serialize_spec(report.spec), args.out)
    print(f"inferred {doc.command} in {len(report.attempts)} attempt(s)", file=sys.stderr)
    return EXIT_OK


def cmd_generate(args, cfg) -> int:
    spec = load_spec(args.synspec)
    limits = generation_limits(args, cfg)
    cfgs = targeted_configs(spec, shlex.split(args.targeted), limits) if args.targeted else all_configs(spec, limits)
    if args.out:
        write_configs(args.out, cfgs)
    else:
        for c in cfgs:
            sys.stdout.write(json.dumps(c.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
    print(f"{len(cfgs)} configurations", file=sys.stderr)
    return EXIT_OK


def cmd_trace(args, cfg) -> int:
    limits = generation_limits(args, cfg)
    if args.configs:
        cfgs = read_configs(args.configs)
    elif args.synspec:
        cfgs = all_configs(load_spec(args.synspec), limits)
    else:
        raise UsageError("trace needs --configs or --synspec")
    for name in sorted({c.template.command for c in cfgs}):
        require_on_path(name)
    opts = BatchOptions(_opt(args, cfg, "mode", "copy"), _opt(args, cfg, "jobs", 1), trace_limits(args, cfg),
                        limits.content_dir, limits.seed)
    traces = run_batch(cfgs, opts, syscall_table(cfg, args))
    digest = write_archive(args.out, cfgs, traces)
    errs = sum(1 for t in traces if t.error)
    print(f"{len(traces)} traces ({errs} errored) -> {args.out} [{digest[:12]}]", file=sys.stderr)
    return EXIT_OK


def cmd_derive(args, cfg) -> int:
    spec = load_spec(args.synspec)
    cs = derive_from_archive(args.from_traces, spec, generation_limits(args, cfg), trace_limits(args, cfg))
    _emit(serialize_cmdspec(cs), args.out)
    return _partial(cs)


def _partial(cs) -> int:
    und = cs.undetermined
    if und:
        print(f"{len(und)} invocation key(s) undetermined", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_export(args, cfg) -> int:
    cs = load_cmdspec(args.cmdspec)
    targets = args.export or cfg.get("export") or []
    if not targets:
        raise UsageError("choose at least one --export target")
    if len(targets) == 1 and args.out and not args.out.endswith(os.sep):
        export(cs, targets[0], args.out)
    elif len(targets) == 1 and not args.out:
        sys.stdout.write(export(cs, targets[0]))
    else:
        d = Path(args.out or ".")
        for t in targets:
            export(cs, t, str(d / f"{cs.command}{SUFFIX[t]}"))
    return EXIT_OK


def _pipeline_options(args, cfg, out_dir: str, need_backend: bool) -> PipelineOptions:
    return PipelineOptions(
        out_dir=out_dir, limits=generation_limits(args, cfg), trace_limits=trace_limits(args, cfg),
        mode=_opt(args, cfg, "mode", "copy"), jobs=_opt(args, cfg, "jobs", 1),
        backend=make_backend(args.backend, cfg) if need_backend else None,
        retry_limit=_opt(args, cfg, "retry_limit", DEFAULT_RETRY_LIMIT),
        targets=tuple(args.export or cfg.get("export") or ()), force=args.force, table=syscall_table(cfg, args))


def cmd_run(args, cfg) -> int:
    doc = None if args.synspec else read_doc(args)
    out_dir = args.workdir or os.path.join("specmine-out", args.command or args.man or "cmd")
    if args.synspec and not args.workdir:
        out_dir = os.path.join("specmine-out", load_spec(args.synspec).command)
    opts = _pipeline_options(args, cfg, out_dir, need_backend=doc is not None)
    if args.targeted:
        syntax = load_spec(args.synspec) if args.synspec else None
        if syntax is None:
            run = run_pipeline(_replace_targets(opts), doc=doc)
            syntax = run.cmdspec.syntax
        cs = targeted_spec(syntax, shlex.split(args.targeted), opts)
        _emit(serialize_cmdspec(cs), args.out)
        return _partial(cs)
    run = run_pipeline(opts, doc=doc, synspec=args.synspec, from_traces=args.from_traces)
    for s in run.stages:
        print(f"{s.name:<18} {'cached' if s.skipped else f'{s.seconds:.2f}s':>8}  {s.artifact}", file=sys.stderr)
    _emit(serialize_cmdspec(run.cmdspec), args.out)
    return _partial(run.cmdspec)


def _replace_targets(opts: PipelineOptions) -> PipelineOptions:
    import dataclasses

    return dataclasses.replace(opts, targets=())


def cmd_targeted(args, cfg) -> int:
    syntax = load_spec(args.synspec)
    out_dir = args.workdir or os.path.join("specmine-out", syntax.command)
    opts = _pipeline_options(args, cfg, out_dir, need_backend=False)
    cs = targeted_spec(syntax, shlex.split(args.invocation), opts)
    _emit(serialize_cmdspec(cs), args.out)
    return _partial(cs)


def cmd_coverage(args, cfg) -> int:
    cs = load_cmdspec(args.cmdspec)
    rules = [r for r in (args.rules.split(",") if args.rules else RULES) if r]
    ncfg = NormalizationConfig.of(rules, cfg.get("string_denylist", ()))
    with open(args.corpus, encoding="utf-8") as fh:
        rep = coverage_report(fh, cs, rules, ncfg)
    _emit(json.dumps(rep.to_json(), indent=2) + "\n" if args.json else rep.render(), args.out)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, gen=False, trace=False, backend=False) -> None:
    p.add_argument("--config", help="TOML or JSON file with default option values")
    if gen:
        p.add_argument("--max-flags", dest="max_flags", type=int, help="max flags/options per invocation (default 4)")
        p.add_argument("--seed", type=int, help="content sampling seed (default 0)")
    if trace:
        p.add_argument("--jobs", type=int, help="parallel sandboxes (default 1)")
        p.add_argument("--timeout", type=float, help="per-run wall clock limit in seconds (default 10)")
        p.add_argument("--mode", choices=("copy", "overlay"), help="sandbox mode (default copy)")
        p.add_argument("--syscall-set", dest="syscall_set", help="file naming the syscalls to trace (JSON list or one per line)")
    if backend:
        p.add_argument("--backend", help="'http' (OpenAI-compatible) or 'fixture:DIR'")
        p.add_argument("--retry-limit", dest="retry_limit", type=int)


def _doc_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--command", help="command name the documentation describes")
    p.add_argument("--doc", help="documentation file ('-' or omitted: stdin)")
    p.add_argument("--man", help="read documentation with the local man system")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="specmine", description="Mine behavioral specifications of shell commands.")
    ap.add_argument("--version", action="version", version=f"specmine {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("infer", help="documentation -> .synspec.json")
    _doc_args(p)
    _common(p, backend=True)
    p.add_argument("--out")
    p.add_argument("--report", help="write the attempt log as JSON")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("generate", help=".synspec.json -> configurations (NDJSON)")
    p.add_argument("--synspec", required=True)
    p.add_argument("--targeted", help="one literal invocation to sweep instead of the full space")
    _common(p, gen=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("trace", help="configurations -> traces.ndjson")
    p.add_argument("--configs")
    p.add_argument("--synspec")
    _common(p, gen=True, trace=True)
    p.add_argument("--out", default="traces.ndjson")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("derive", help="traces.ndjson -> .cmdspec.json")
    p.add_argument("--from-traces", dest="from_traces", required=True)
    p.add_argument("--synspec", required=True)
    _common(p, gen=True)
    p.add_argument("--timeout", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("export", help=".cmdspec.json -> consumer formats")
    p.add_argument("--cmdspec", required=True)
    p.add_argument("--export", action="append", choices=TARGETS)
    p.add_argument("--config")
    p.add_argument("--out", help="file (one target) or directory")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("run", help="full pipeline with stage caching")
    _doc_args(p)
    p.add_argument("--synspec", help="skip inference and start from this syntax spec")
    p.add_argument("--from-traces", dest="from_traces", help="replay an archive instead of tracing")
    p.add_argument("--targeted", help="derive only this literal invocation")
    p.add_argument("--export", action="append", choices=TARGETS)
    p.add_argument("--workdir", help="artifact directory (default specmine-out/<command>)")
    p.add_argument("--force", action="store_true", help="ignore cached stages")
    _common(p, gen=True, trace=True, backend=True)
    p.add_argument("--out", help="write the .cmdspec.json here instead of stdout")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("targeted", help="spec fragment for one literal invocation")
    p.add_argument("invocation", help='quoted argv, e.g. "rm -rf p"')
    p.add_argument("--synspec", required=True)
    p.add_argument("--workdir")
    p.add_argument("--force", action="store_true")
    _common(p, gen=True, trace=True)
    p.add_argument("--backend", help=argparse.SUPPRESS)
    p.add_argument("--export", action="append", choices=TARGETS, help=argparse.SUPPRESS)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_targeted)

    p = sub.add_parser("coverage", help="match an invocation corpus against a spec")
    p.add_argument("--cmdspec", required=True)
    p.add_argument("--corpus", required=True, help="one invocation per line")
    p.add_argument("--rules", help=f"comma-separated subset of {','.join(RULES)} (default all)")
    p.add_argument("--json", action="store_true")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_coverage)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(getattr(args, "config", None))
        return args.fn(args, cfg)
    except InferenceFailed as exc:
        print(f"specmine: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except BackendError as exc:
        print(f"specmine: backend error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except (SandboxUnavailable, TracerUnavailable) as exc:
        print(f"specmine: sandbox unavailable: {exc}", file=sys.stderr)
        return EXIT_SANDBOX
    except (UsageError, ConfigError, SpecParseError, InvalidSpec, InvocationError, DerivationError, ExportError,
            FileNotFoundError, ValueError) as exc:
        print(f"specmine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
