"""Assemble a :class:`CommandSpec` from configurations and their traces."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from . import behavior as B
from .content import ContentStore
from .generate import PATH_KINDS, POINTERS, InvocationConfig, InvocationKey
from .sandbox.sandbox import ExecutionTrace
from .syntax import SyntaxSpec, spec_from_json, spec_to_json

FORMAT = "specmine.cmdspec/1"
POST_TOKENS = ("unchanged", "absent", "file", "dir", "modified")


class DerivationError(ValueError):
    pass


# -- data model ----------------------------------------------------------------

@dataclass(frozen=True)
class Outcome:
    exit: str                                   # "zero" | "nonzero"
    codes: tuple[int, ...]
    post: tuple[tuple[str, str], ...]           # (slot label, post token)
    effects: tuple[str, ...] = ()               # "<change>:<derived path>"

    def to_json(self) -> dict[str, Any]:
        return {"exit": self.exit, "codes": list(self.codes), "post": dict(self.post),
                "effects": list(self.effects)}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> Outcome:
        return cls(d["exit"], tuple(d["codes"]), tuple(sorted(d["post"].items())), tuple(d["effects"]))


@dataclass(frozen=True)
class Precondition:
    pointers: tuple[tuple[str, str], ...]       # (slot label, pointer kind)
    kinds: str | tuple[tuple[str, ...], ...] = "any"

    def to_json(self) -> dict[str, Any]:
        return {"pointers": dict(self.pointers),
                "kinds": self.kinds if isinstance(self.kinds, str) else [list(k) for k in self.kinds]}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> Precondition:
        k = d["kinds"]
        return cls(tuple(sorted(d["pointers"].items(), key=lambda kv: _label_order(kv[0]))),
                   k if isinstance(k, str) else tuple(tuple(x) for x in k))


@dataclass(frozen=True)
class ConditionClause:
    pre: tuple[Precondition, ...]
    outcomes: tuple[Outcome, ...]
    io: B.IOSets
    parallelizability: str
    monotone_decreasing: bool
    cwd_dependent: bool

    def pointer_sets(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = defaultdict(set)
        for p in self.pre:
            for lab, ptr in p.pointers:
                out[lab].add(ptr)
        return dict(out)

    def to_json(self) -> dict[str, Any]:
        return {"pre": [p.to_json() for p in self.pre], "outcomes": [o.to_json() for o in self.outcomes],
                "io": self.io.to_json(), "parallelizability": self.parallelizability,
                "monotone_decreasing": self.monotone_decreasing, "cwd_dependent": self.cwd_dependent}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> ConditionClause:
        return cls(tuple(Precondition.from_json(p) for p in d["pre"]),
                   tuple(Outcome.from_json(o) for o in d["outcomes"]),
                   B.IOSets(frozenset(d["io"]["inputs"]), frozenset(d["io"]["outputs"])),
                   d["parallelizability"], d["monotone_decreasing"], d["cwd_dependent"])


@dataclass(frozen=True)
class InvocationSpec:
    key: InvocationKey
    status: str                                 # "ok" | "undetermined"
    parallelizability: str | None
    parallelizability_basis: str | None
    nondeterministic: bool
    splittable: bool | None
    monotone_decreasing: bool | None
    filtering_vacuous: bool
    cwd_dependent: bool
    io: B.IOSets
    clauses: tuple[ConditionClause, ...]
    slot_labels: tuple[str, ...] = ()
    tested_argv: tuple[tuple[str, ...], ...] = ()
    errored_traces: int = 0
    evidence: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "key": self.key.to_json(), "label": self.key.label(), "status": self.status,
            "parallelizability": self.parallelizability,
            "parallelizability_basis": self.parallelizability_basis,
            "nondeterministic": self.nondeterministic, "splittable": self.splittable,
            "monotone_decreasing": self.monotone_decreasing, "filtering_vacuous": self.filtering_vacuous,
            "cwd_dependent": self.cwd_dependent, "io": self.io.to_json(),
            "clauses": [c.to_json() for c in self.clauses], "slot_labels": list(self.slot_labels),
            "tested_argv": [list(a) for a in self.tested_argv], "errored_traces": self.errored_traces,
            "evidence": list(self.evidence),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> InvocationSpec:
        return cls(InvocationKey.from_json(d["key"]), d["status"], d["parallelizability"],
                   d.get("parallelizability_basis"), d["nondeterministic"], d["splittable"],
                   d["monotone_decreasing"], d["filtering_vacuous"], d["cwd_dependent"],
                   B.IOSets(frozenset(d["io"]["inputs"]), frozenset(d["io"]["outputs"])),
                   tuple(ConditionClause.from_json(c) for c in d["clauses"]),
                   tuple(d.get("slot_labels", ())), tuple(tuple(a) for a in d.get("tested_argv", ())),
                   d.get("errored_traces", 0), tuple(d.get("evidence", ())))


@dataclass(frozen=True)
class CommandSpec:
    command: str
    syntax: SyntaxSpec
    invocations: tuple[InvocationSpec, ...]
    provenance: dict[str, Any] = field(default_factory=dict, hash=False, compare=False)

    def get(self, key: InvocationKey) -> InvocationSpec | None:
        for inv in self.invocations:
            if inv.key == key:
                return inv
        return None

    def find(self, flags: Iterable[str] = (), usage: int | None = None) -> list[InvocationSpec]:
        fl = tuple(sorted(flags))
        return [i for i in self.invocations
                if tuple(sorted(i.key.flags)) == fl and (usage is None or i.key.usage == usage)]

    @property
    def undetermined(self) -> list[InvocationSpec]:
        return [i for i in self.invocations if i.status != "ok"]

    def to_json(self) -> dict[str, Any]:
        return {"format": FORMAT, "command": self.command, "syntax": spec_to_json(self.syntax),
                "invocations": [i.to_json() for i in self.invocations], "provenance": self.provenance}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> CommandSpec:
        if d.get("format") != FORMAT:
            raise DerivationError(f"not a {FORMAT} document")
        return cls(d["command"], spec_from_json(d["syntax"]),
                   tuple(InvocationSpec.from_json(i) for i in d["invocations"]), d.get("provenance", {}))


def serialize_cmdspec(spec: CommandSpec) -> str:
    return json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n"


def load_cmdspec(path: str) -> CommandSpec:
    with open(path, encoding="utf-8") as fh:
        return CommandSpec.from_json(json.load(fh))


# -- clause derivation ---------------------------------------------------------

def _label_order(label: str) -> tuple[int, int, str]:
    if label.startswith("$") and label[1:].isdigit():
        return (0, int(label[1:]), "")
    return (1, 0, label)


def _pre_state(pointer: str) -> str:
    if pointer == "file":
        return "file"
    if pointer.startswith("dir"):
        return "dir"
    return "absent"


_CHANGE_TO_POST = {"file_removed": "absent", "directory_removed": "absent", "file_created": "file",
                   "directory_replaced_with_file": "file", "directory_created": "dir",
                   "file_replaced_with_directory": "dir", "file_modified": "modified"}


@dataclass(frozen=True)
class _Obs:
    exit: str
    code: int
    cands: tuple[frozenset[str], ...]
    effects: tuple[str, ...]

    @property
    def signature(self) -> tuple:
        return (self.exit, self.cands, self.effects)


def observe(trace: ExecutionTrace, cfg: InvocationConfig) -> _Obs:
    """Per-slot candidate post tokens plus effects on derived paths."""
    slots = B.slot_paths(cfg)
    at_slot = {sp: None for _, sp in slots}
    removed: list[str] = []
    for e in trace.fs_diff:
        if e.path in at_slot:
            at_slot[e.path] = e.change
            if _CHANGE_TO_POST[e.change] == "absent":
                removed.append(e.path)
    cands = []
    for (_, sp), st in zip(slots, cfg.env.slots):
        ch = at_slot[sp]
        cands.append(frozenset({"unchanged", _pre_state(st.pointer)}) if ch is None
                     else frozenset({_CHANGE_TO_POST[ch]}))
    effects = set()
    for e in trace.fs_diff:
        if e.path in at_slot:
            continue
        if any(e.path.startswith(r + "/") for r in removed) and _CHANGE_TO_POST[e.change] == "absent":
            continue
        effects.add(f"{e.change}:{B.attribute(e.path, slots) or e.path}")
    code = trace.exit_status if trace.exit_status is not None else -1
    return _Obs("zero" if code == 0 else "nonzero", code, tuple(cands), tuple(sorted(effects)))


def _resolve(cands: Iterable[frozenset[str]]) -> str:
    s = frozenset.intersection(*cands)
    return "unchanged" if "unchanged" in s else min(s)


def _env_sort_key(env) -> tuple:
    return tuple((POINTERS.index(p), PATH_KINDS.index(k)) for k, p in env)


def _preconditions(labels: Sequence[str], envs: Iterable[tuple]) -> tuple[Precondition, ...]:
    by_ptr: dict[tuple[str, ...], set[tuple[str, ...]]] = defaultdict(set)
    for env in envs:
        by_ptr[tuple(p for _, p in env)].add(tuple(k for k, _ in env))
    full = len(PATH_KINDS) ** len(labels)
    out = []
    for ptrs in sorted(by_ptr, key=lambda p: tuple(POINTERS.index(x) for x in p)):
        kinds = by_ptr[ptrs]
        enc = "any" if len(kinds) == full else tuple(sorted(kinds))
        out.append(Precondition(tuple(zip(labels, ptrs)), enc))
    return tuple(out)


def derive_conditions(runs: Sequence[tuple[InvocationConfig, ExecutionTrace]], *,
                      parallelizability: str = B.PURE, monotone: bool = False) -> list[ConditionClause]:
    """Group environments into clauses.

    Environments with a single observed outcome merge greedily (in a fixed order)
    when exit class and derived-path effects agree and every slot's candidate post
    tokens still intersect. Environments with several outcomes (for example across
    stdin samples) merge only with identical outcome sets.
    """
    runs = [(c, t) for c, t in runs if t.error is None and t.exit_status is not None]
    if not runs:
        return []
    labels = runs[0][0].template.slot_labels
    per_env: dict[tuple, list[tuple[InvocationConfig, ExecutionTrace, _Obs]]] = defaultdict(list)
    for c, t in runs:
        env = tuple((s.path_kind, s.pointer) for s in c.env.slots)
        per_env[env].append((c, t, observe(t, c)))

    singles: list[dict[str, Any]] = []
    multis: dict[frozenset, dict[str, Any]] = {}
    for env in sorted(per_env, key=_env_sort_key):
        obs = per_env[env]
        sigs = {o.signature for _, _, o in obs}
        if len(sigs) == 1:
            o0 = obs[0][2]
            for cl in singles:
                if (cl["exit"], cl["effects"]) == (o0.exit, o0.effects) and all(
                        a & b for a, b in zip(cl["cands"], o0.cands)):
                    cl["cands"] = tuple(a & b for a, b in zip(cl["cands"], o0.cands))
                    break
            else:
                cl = {"exit": o0.exit, "effects": o0.effects, "cands": o0.cands, "envs": [], "runs": []}
                singles.append(cl)
        else:
            cl = multis.setdefault(frozenset(sigs), {"envs": [], "runs": []})
        cl["envs"].append(env)
        cl["runs"].extend(obs)

    clauses = []
    for cl in singles + list(multis.values()):
        groups: dict[tuple, list[_Obs]] = defaultdict(list)
        for _, _, o in cl["runs"]:
            if "cands" in cl:
                groups[(o.exit, o.effects)].append(o)
            else:
                groups[(o.exit, o.effects, o.cands)].append(o)
        outcomes = []
        for (exit_cls, effects, *rest), obs in groups.items():
            cands = cl["cands"] if "cands" in cl else rest[0]
            post = tuple((lab, _resolve([c])) for lab, c in zip(labels, cands))
            outcomes.append(Outcome(exit_cls, tuple(sorted({o.code for o in obs})), post, effects))
        outcomes.sort(key=lambda o: (o.exit != "zero", o.post, o.effects))
        ok_runs = [(c, t) for c, t, o in cl["runs"] if o.exit == "zero"] or [(c, t) for c, t, _ in cl["runs"]]
        io = B.IOSets()
        for c, t in ok_runs:
            io = io.union(B.derive_io(t, c))
        cwd = any(B.check_cwd_dependence(t) for _, t, _ in cl["runs"])
        clauses.append((min(_env_sort_key(e) for e in cl["envs"]), ConditionClause(
            _preconditions(labels, cl["envs"]), tuple(outcomes), io, parallelizability, monotone, cwd)))
    clauses.sort(key=lambda x: x[0])
    return [c for _, c in clauses]


# -- whole-spec assembly -------------------------------------------------------

def _probe_parts(probe: str) -> tuple[str, str]:
    kind, _, digest = probe.rpartition("@")
    return kind, digest


def _monotone(runs: Sequence[tuple[InvocationConfig, ExecutionTrace]], store: ContentStore) -> bool | None:
    verdicts = [B.check_filtering(t, c, store) for c, t in runs]
    verdicts = [v for v in verdicts if v is not None]
    return None if not verdicts else all(verdicts)


def assemble_spec(configs: Sequence[InvocationConfig], traces: Sequence[ExecutionTrace], syntax: SyntaxSpec,
                  *, store: ContentStore | None = None,
                  provenance: dict[str, Any] | None = None) -> CommandSpec:
    if not traces:
        raise DerivationError("empty trace archive: nothing to derive")
    store = store or ContentStore()
    by_id = {c.config_id: c for c in configs}
    regular: dict[InvocationKey, list[tuple[InvocationConfig, ExecutionTrace]]] = defaultdict(list)
    probes: dict[str, dict[str, list[tuple[InvocationConfig, ExecutionTrace]]]] = defaultdict(lambda: defaultdict(list))
    for t in traces:
        c = by_id.get(t.config_id)
        if c is None:
            raise DerivationError(f"trace {t.config_id} has no matching configuration")
        if c.probe is None:
            regular[c.key].append((c, t))
        else:
            kind, digest = _probe_parts(c.probe)
            probes[digest][kind].append((c, t))
    if not regular:
        raise DerivationError("trace archive holds no regular invocation runs")

    invocations = []
    for key in sorted(regular, key=lambda k: k.sort_key):
        invocations.append(_derive_key(key, regular[key], probes.get(key.digest, {}), store))
    return CommandSpec(syntax.command, syntax, tuple(invocations), dict(provenance or {}))


def _ok(t: ExecutionTrace) -> bool:
    return t.error is None and t.exit_status is not None and not t.timed_out


def _derive_key(key: InvocationKey, runs, probes, store: ContentStore) -> InvocationSpec:
    labels = runs[0][0].template.slot_labels
    tested = tuple(sorted({c.argv for c, _ in runs}))
    good = [(c, t) for c, t in runs if _ok(t)]
    errored = len(runs) - len(good)
    if not good:
        reasons = sorted({t.error or ("timeout" if t.timed_out else "no exit status") for _, t in runs})
        return InvocationSpec(key, "undetermined", None, None, False, None, None, False, False, B.IOSets(),
                              (), labels, tested, errored, tuple(reasons[:5]))

    def probe_runs(kind: str) -> list[tuple[InvocationConfig, ExecutionTrace]]:
        return [(c, t) for c, t in probes.get(kind, []) if _ok(t)]

    whole = probe_runs("partition:whole")
    repeat = probe_runs("repeat")
    parts: dict[int, list[ExecutionTrace]] = {}
    for kind, items in probes.items():
        bits = kind.split(":")
        if bits[0] == "partition" and len(bits) == 3 and all(_ok(t) for _, t in items):
            ordered = sorted(items, key=lambda ct: int(ct[0].probe.split(":")[2].split("@")[0]))
            parts[int(bits[1])] = [t for _, t in ordered]

    effects: set[str] = set()
    for c, t in good + whole + repeat:
        effects.update(B.side_effects(t, c))
    for kind, items in probes.items():
        if kind.startswith("partition:"):
            for c, t in items:
                if _ok(t):
                    effects.update(B.side_effects(t, c))
    whole_read = bool(whole) and bool(B.derive_io(whole[0][1], whole[0][0]).inputs)
    pr = B.classify_from_runs(whole[0][1] if whole else None, repeat[0][1] if repeat else None,
                              parts if whole else {}, effects, whole_read)

    splittable = None
    combined = probe_runs("split:combined")
    singles = sorted(((c, t) for kind, items in probes.items() if kind.startswith("split:")
                      and kind != "split:combined" for c, t in items),
                     key=lambda ct: int(ct[0].probe.split(":")[2].split("@")[0]))
    if combined and len(singles) >= 2 and all(_ok(t) for _, t in singles):
        splittable = (not pr.nondeterministic) and B.splittable_from_runs(combined[0][1], [t for _, t in singles])

    zero = [(c, t) for c, t in good if t.exit_status == 0]
    mono = _monotone(whole, store) if whole and whole[0][1].exit_status == 0 else None
    if mono is None:
        mono = _monotone(zero, store)
    vacuous = mono is None

    io = B.IOSets()
    for c, t in (zero or good):
        io = io.union(B.derive_io(t, c))
    cwd = any(B.check_cwd_dependence(t) for _, t in good)
    clauses = derive_conditions(good, parallelizability=pr.cls, monotone=bool(mono) if not vacuous else True)
    return InvocationSpec(key, "ok", pr.cls, pr.basis, pr.nondeterministic, splittable,
                          True if vacuous else mono, vacuous, cwd, io, tuple(clauses), labels, tested,
                          errored, tuple(pr.evidence[:8]))
