"""Rules that turn observed runs into behavioral facts.

Most functions here are pure over traces and configurations. The live helpers
at the bottom execute a command themselves to collect the runs they need.
"""

from __future__ import annotations

import posixpath
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .content import ContentStore
from .generate import InvocationConfig, slot_scratch_path
from .sandbox.sandbox import ExecutionTrace
from .sandbox.syscalls import SyscallRecord, fd_number, is_mutation, source_path

STATELESS, PURE, SIDE_EFFECTFUL = "stateless", "pure", "side_effectful"
CLASSES = (STATELESS, PURE, SIDE_EFFECTFUL)

DESTRUCTIVE = ("file_removed", "directory_removed", "file_replaced_with_directory",
               "directory_replaced_with_file")
_FD_READS = ("read", "readv", "pread64")
_FD_WRITES = ("write", "writev", "pwrite64", "sendfile", "splice", "copy_file_range")
_DATA_WRITE_CALLS = ("open", "openat", "openat2", "creat", "write", "writev", "pwrite64", "truncate",
                     "ftruncate", "sendfile", "splice", "copy_file_range")


def slot_paths(cfg: InvocationConfig) -> list[tuple[str, str]]:
    """(label, sandbox path) for every path slot of ``cfg``."""
    return [(lab, slot_scratch_path(i, st)) for i, (lab, st)
            in enumerate(zip(cfg.template.slot_labels, cfg.env.slots))]


def attribute(path: str | None, slots: Sequence[tuple[str, str]]) -> str | None:
    """Express ``path`` relative to a slot: ``$1``, ``$1/c0`` or ``$1/..``."""
    if not path:
        return None
    for label, sp in slots:
        if path == sp:
            return label
        if path.startswith(sp + "/"):
            return f"{label}/{path[len(sp) + 1:]}"
    for label, sp in slots:
        parent = posixpath.dirname(sp)
        if parent != "/scratch" and (path == parent or sp.startswith(path + "/")):
            return f"{label}/.."
    return None


def _slot_of(label: str | None) -> str | None:
    return label.split("/", 1)[0] if label else None


# -- I/O -----------------------------------------------------------------------

@dataclass(frozen=True)
class IOSets:
    inputs: frozenset[str] = frozenset()
    outputs: frozenset[str] = frozenset()

    def union(self, other: IOSets) -> IOSets:
        return IOSets(self.inputs | other.inputs, self.outputs | other.outputs)

    def to_json(self) -> dict[str, list[str]]:
        return {"inputs": sorted(self.inputs), "outputs": sorted(self.outputs)}


def _is_data_write(r: SyscallRecord) -> bool:
    return r.classification == "write" and r.name in _DATA_WRITE_CALLS and not is_mutation(r)


def derive_io(trace: ExecutionTrace, cfg: InvocationConfig) -> IOSets:
    """Inputs: slots probed by read-class calls, plus stdin if fd 0 was read.
    Outputs: slots receiving data writes, plus stdout if fd 1 was written."""
    slots = slot_paths(cfg)
    ins: set[str] = set()
    outs: set[str] = set()
    for r in trace.syscalls:
        if r.classification == "read":
            lab = _slot_of(attribute(r.touched_path, slots))
            if lab and not attribute(r.touched_path, slots).endswith("/.."):
                ins.add(lab)
            if r.name in _FD_READS and r.args and fd_number(r.args[0]) == 0:
                ins.add("stdin")
        elif _is_data_write(r):
            lab = attribute(r.touched_path, slots)
            if lab and not lab.endswith("/.."):
                outs.add(_slot_of(lab))
            src = attribute(source_path(r), slots)
            if src and not src.endswith("/.."):
                ins.add(_slot_of(src))
            if r.name in _FD_WRITES:
                fd_idx = 2 if r.name in ("splice", "copy_file_range") else 0
                if len(r.args) > fd_idx and fd_number(r.args[fd_idx]) == 1:
                    outs.add("stdout")
                if r.name in ("sendfile", "splice", "copy_file_range"):
                    src_idx = 1 if r.name == "sendfile" else 0
                    if len(r.args) > src_idx and fd_number(r.args[src_idx]) == 0:
                        ins.add("stdin")
    return IOSets(frozenset(ins), frozenset(outs))


# -- side effects --------------------------------------------------------------

def side_effects(trace: ExecutionTrace, cfg: InvocationConfig) -> list[str]:
    """Reasons a run cannot be treated as a pure function of its named inputs.

    * a filesystem change to a path no argument names;
    * removal or replacement of a named path (or anything below it);
    * a successful write-class call on an unnamed path outside ``/dev``;
    * asking for the working directory.
    """
    slots = slot_paths(cfg)
    out: set[str] = set()
    for e in trace.fs_diff:
        lab = attribute(e.path, slots)
        if lab is None:
            out.add(f"unnamed:{e.change}:{e.path}")
        elif e.change in DESTRUCTIVE:
            out.add(f"destroys:{lab}")
    for r in trace.syscalls:
        if r.name == "getcwd":
            out.add("cwd")
            continue
        if r.classification != "write" or r.return_value < 0:
            continue
        p = r.touched_path
        if not p or not p.startswith("/") or p.startswith("/dev/"):
            continue
        if attribute(p, slots) is None:
            out.add(f"unnamed:{r.name}:{p}")
    return sorted(out)


def check_cwd_dependence(trace: ExecutionTrace) -> bool:
    return any(r.name == "getcwd" for r in trace.syscalls)


# -- parallelizability ---------------------------------------------------------

@dataclass
class ParallelResult:
    cls: str
    basis: str
    nondeterministic: bool = False
    evidence: list[str] = field(default_factory=list)


def classify_from_runs(whole: ExecutionTrace | None, repeat: ExecutionTrace | None,
                       parts: dict[int, list[ExecutionTrace]], effects: Iterable[str],
                       whole_read_input: bool) -> ParallelResult:
    """Side effects win; otherwise stateless iff every partition's outputs concatenate
    to the whole output, and the repeated run agrees with the first."""
    effects = sorted(set(effects))
    if effects:
        return ParallelResult(SIDE_EFFECTFUL, "side_effects", evidence=effects)
    if whole is None or not parts:
        return ParallelResult(PURE, "unprobed")
    if not whole_read_input:
        return ParallelResult(SIDE_EFFECTFUL, "no_input",
                              evidence=["input stream never read; no parallel decomposition"])
    if repeat is not None and repeat.stdout != whole.stdout:
        return ParallelResult(PURE, "nondeterministic", nondeterministic=True)
    for n in sorted(parts):
        joined = b"".join(t.stdout for t in parts[n])
        if joined != whole.stdout:
            return ParallelResult(PURE, "partition", evidence=[f"n={n}: concatenated output differs"])
    return ParallelResult(STATELESS, "partition", evidence=[f"n={n}" for n in sorted(parts)])


def splittable_from_runs(combined: ExecutionTrace, singles: Sequence[ExecutionTrace]) -> bool:
    if len(singles) < 2:
        raise ValueError("splittability needs at least two arguments")
    return b"".join(t.stdout for t in singles) == combined.stdout


# -- filtering -----------------------------------------------------------------

def io_sizes(trace: ExecutionTrace, cfg: InvocationConfig, store: ContentStore,
             io: IOSets | None = None) -> tuple[dict[str, int], dict[str, int]]:
    io = io or derive_io(trace, cfg)
    slots = dict(slot_paths(cfg))
    label_to_index = {lab: i for i, lab in enumerate(cfg.template.slot_labels)}
    ins: dict[str, int] = {}
    for name in io.inputs:
        if name == "stdin":
            ins[name] = len(store.resolve(cfg.stdin)) if cfg.stdin else 0
        elif name in label_to_index:
            st = cfg.env.slots[label_to_index[name]]
            if st.pointer == "file":
                ins[name] = len(store.resolve(st.content))
    outs: dict[str, int] = {}
    for name in io.outputs:
        if name == "stdout":
            outs[name] = len(trace.stdout)
        elif name in slots:
            for e in trace.fs_diff:
                if e.path == slots[name] and e.size is not None:
                    outs[name] = e.size
    return ins, outs


def check_filtering(trace: ExecutionTrace, cfg: InvocationConfig, store: ContentStore) -> bool | None:
    """True iff every output is strictly smaller than every input; None if no pair exists."""
    ins, outs = io_sizes(trace, cfg, store)
    if not ins or not outs:
        return None
    return all(o < i for o in outs.values() for i in ins.values())


# -- live probes ---------------------------------------------------------------

def _run(argv: Sequence[str], files: dict[str, bytes], stdin: bytes | None, mode: str, limits):
    from .sandbox.sandbox import TraceLimits, TreeEntry, execute

    tree = [TreeEntry(name, "f", data) for name, data in sorted(files.items())]
    return execute(tree, list(argv), stdin, mode=mode, limits=limits or TraceLimits())


def _named_effects(trace: ExecutionTrace, names: Sequence[str]) -> list[str]:
    from .generate import ArgvTemplate, FsState, InvocationKey, SlotState

    tpl = ArgvTemplate("x", (), InvocationKey(0, (), (), ()), tuple(f"${i + 1}" for i in range(len(names))))
    env = FsState(tuple(SlotState("relative", "file") for _ in names))
    return side_effects(trace, InvocationConfig(tpl, env))


def classify_parallelizability(argv: Sequence[str], content: bytes, partitions: int | Sequence[int] = (2, 3),
                               *, input_arg: int | None = None, mode: str = "copy",
                               limits=None) -> ParallelResult:
    """Run ``argv`` on ``content`` whole and line-partitioned, then classify.

    With ``input_arg=None`` the content goes to stdin; otherwise ``argv[input_arg]``
    must be ``p0`` and the content is written to that file.
    """
    from .content import line_partitions

    ns = [partitions] if isinstance(partitions, int) else list(partitions)
    if any(n < 2 for n in ns):
        raise ValueError("partition count must be >= 2")

    def go(data: bytes) -> ExecutionTrace:
        if input_arg is None:
            return _run(argv, {}, data, mode, limits)
        return _run(argv, {argv[input_arg]: data}, None, mode, limits)

    whole, repeat = go(content), go(content)
    parts = {n: [go(chunk) for chunk in line_partitions(content, n)] for n in ns}
    names = [argv[input_arg]] if input_arg is not None else []
    effects: set[str] = set()
    for t in [whole, repeat, *(x for ts in parts.values() for x in ts)]:
        effects.update(_named_effects(t, names))
    read = any(r.classification == "read" and (
        (input_arg is None and r.name in _FD_READS and r.args and fd_number(r.args[0]) == 0)
        or (input_arg is not None and r.touched_path == f"/scratch/{argv[input_arg]}"))
        for r in whole.syscalls)
    return classify_from_runs(whole, repeat, parts, effects, read)


def check_splittability(argv_prefix: Sequence[str], files: Sequence[bytes], *, mode: str = "copy",
                        limits=None) -> bool:
    """Compare ``cmd f0 f1 ...`` against ``cmd f0; cmd f1; ...`` bytewise."""
    if len(files) < 2:
        raise ValueError("splittability needs at least two arguments")
    names = [f"p{i}" for i in range(len(files))]
    table = dict(zip(names, files))
    combined = _run([*argv_prefix, *names], table, None, mode, limits)
    singles = [_run([*argv_prefix, n], {n: table[n]}, None, mode, limits) for n in names]
    return splittable_from_runs(combined, singles)
