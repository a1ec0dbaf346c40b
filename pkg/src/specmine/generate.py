"""Enumerate typed invocations and pair each with filesystem environments.

Paths in generated argv follow a fixed scheme: slot ``i`` is ``p{i}`` relative
to the scratch root, ``p{i}/c0`` when its parent must be missing, and
``@ROOT@/p{i}`` for the absolute variant (the sandbox substitutes its root).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Sequence

from .content import KINDS, ContentStore
from .syntax import Arg, ArgType, SyntaxSpec, Usage, flags_and_options, validate_spec, InvalidSpec

PATH_KINDS = ("absolute", "relative")
POINTERS = ("file", "dir_empty", "dir_one_child", "nonexistent", "parent_nonexistent")
CHAR_SAMPLES = ("a", "1", ",")
DEFAULT_FILE_CONTENT = "text:full:0"
ROOT = "@ROOT@"


class CapReached(UserWarning):
    pass


@dataclass(frozen=True)
class GenerationLimits:
    max_flags_options: int = 4
    variable_arity_instantiations: tuple[int, ...] = (1, 2)
    integer_samples: tuple[int, ...] = (-1, 0, 1)
    string_samples: int = 3
    max_configs: int = 100_000
    seed: int = 0
    partitions: tuple[int, ...] = (2, 3)
    content_dir: str | None = None

    def __post_init__(self) -> None:
        if self.max_flags_options < 0:
            raise ValueError("max_flags_options must be >= 0")
        if not self.variable_arity_instantiations or min(self.variable_arity_instantiations) < 1:
            raise ValueError("variable_arity_instantiations needs counts >= 1")
        if not self.integer_samples:
            raise ValueError("integer_samples must not be empty")
        if self.string_samples < 1 or self.max_configs < 1:
            raise ValueError("string_samples and max_configs must be >= 1")
        if not self.partitions or min(self.partitions) < 2:
            raise ValueError("partition counts must be >= 2")

    def to_json(self) -> dict[str, Any]:
        return {
            "max_flags_options": self.max_flags_options,
            "variable_arity_instantiations": list(self.variable_arity_instantiations),
            "integer_samples": list(self.integer_samples),
            "string_samples": self.string_samples,
            "max_configs": self.max_configs,
            "seed": self.seed,
            "partitions": list(self.partitions),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> GenerationLimits:
        kw = dict(d)
        for k in ("variable_arity_instantiations", "integer_samples", "partitions"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


# -- environments ------------------------------------------------------------

@dataclass(frozen=True)
class SlotState:
    path_kind: str
    pointer: str
    content: str = DEFAULT_FILE_CONTENT

    def to_json(self) -> dict[str, str]:
        return {"kind": self.path_kind, "pointer": self.pointer, "content": self.content}

    @classmethod
    def from_json(cls, d: dict[str, str]) -> SlotState:
        return cls(d["kind"], d["pointer"], d.get("content", DEFAULT_FILE_CONTENT))


@dataclass(frozen=True)
class FsState:
    slots: tuple[SlotState, ...] = ()

    def to_json(self) -> list[dict[str, str]]:
        return [s.to_json() for s in self.slots]

    @classmethod
    def from_json(cls, d: list[dict[str, str]]) -> FsState:
        return cls(tuple(SlotState.from_json(x) for x in d))

    def tree(self, store: ContentStore) -> list:
        """Materializable entries for the sandbox."""
        from .sandbox.sandbox import TreeEntry

        out = []
        for i, s in enumerate(self.slots):
            name = f"p{i}"
            if s.pointer == "file":
                out.append(TreeEntry(name, "f", store.resolve(s.content)))
            elif s.pointer == "dir_empty":
                out.append(TreeEntry(name, "d"))
            elif s.pointer == "dir_one_child":
                out.append(TreeEntry(name, "d"))
                out.append(TreeEntry(f"{name}/c0", "f", store.resolve(s.content)))
        return out


def slot_path(i: int, state: SlotState) -> str:
    rel = f"p{i}/c0" if state.pointer == "parent_nonexistent" else f"p{i}"
    return f"{ROOT}/{rel}" if state.path_kind == "absolute" else rel


def slot_scratch_path(i: int, state: SlotState) -> str:
    """Where the slot lives inside the sandbox view."""
    rel = f"p{i}/c0" if state.pointer == "parent_nonexistent" else f"p{i}"
    return f"/scratch/{rel}"


def environments_for(n_slots: int) -> Iterator[FsState]:
    """Lazily, since the count is 10 ** n_slots."""
    per_slot = [SlotState(k, p) for k in PATH_KINDS for p in POINTERS]
    return (FsState(tuple(c)) for c in itertools.product(per_slot, repeat=n_slots))


# -- templates ---------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    text: str
    slot: int | None = None     # a path slot appended after ``text``

    def to_json(self) -> Any:
        return self.text if self.slot is None else {"text": self.text, "slot": self.slot}

    @classmethod
    def from_json(cls, d: Any) -> Token:
        return cls(d) if isinstance(d, str) else cls(d["text"], d["slot"])


@dataclass(frozen=True)
class InvocationKey:
    usage: int
    flags: tuple[str, ...]
    options: tuple[tuple[str, str], ...]
    positionals: tuple[str, ...]

    def to_json(self) -> dict[str, Any]:
        return {"usage": self.usage, "flags": list(self.flags),
                "options": [list(o) for o in self.options], "positionals": list(self.positionals)}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> InvocationKey:
        return cls(d["usage"], tuple(d["flags"]), tuple((a, b) for a, b in d["options"]),
                   tuple(d["positionals"]))

    @property
    def sort_key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.sort_key.encode()).hexdigest()[:12]

    def label(self) -> str:
        opts = ",".join(f"{n}:{t}" for n, t in self.options)
        return (f"usage{self.usage} flags({','.join(self.flags)}) opts({opts}) "
                f"args({','.join(self.positionals)})")


@dataclass(frozen=True)
class ArgvTemplate:
    command: str
    tokens: tuple[Token, ...]
    key: InvocationKey
    slot_labels: tuple[str, ...]     # "$1", "$2" for positionals; option name for options
    reads_stdin: bool = False        # no path input, or an explicit "-"

    @property
    def n_slots(self) -> int:
        return len(self.slot_labels)

    def render(self, env: FsState) -> tuple[str, ...]:
        out = [self.command]
        for t in self.tokens:
            out.append(t.text if t.slot is None else t.text + slot_path(t.slot, env.slots[t.slot]))
        return tuple(out)

    def to_json(self) -> dict[str, Any]:
        return {"command": self.command, "tokens": [t.to_json() for t in self.tokens],
                "key": self.key.to_json(), "slot_labels": list(self.slot_labels),
                "reads_stdin": self.reads_stdin}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> ArgvTemplate:
        return cls(d["command"], tuple(Token.from_json(t) for t in d["tokens"]),
                   InvocationKey.from_json(d["key"]), tuple(d["slot_labels"]), d["reads_stdin"])


@dataclass(frozen=True)
class InvocationConfig:
    template: ArgvTemplate
    env: FsState
    stdin: str | None = None          # content reference; None means empty, closed stream
    probe: str | None = None          # set for derivation probe runs
    config_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not self.config_id:
            object.__setattr__(self, "config_id", config_digest(self.argv, self.env, self.stdin, self.probe))

    @property
    def argv(self) -> tuple[str, ...]:
        return self.template.render(self.env)

    @property
    def key(self) -> InvocationKey:
        return self.template.key

    def to_json(self) -> dict[str, Any]:
        d = {"config_id": self.config_id, "argv": list(self.argv), "template": self.template.to_json(),
             "env": self.env.to_json(), "stdin": self.stdin}
        if self.probe is not None:
            d["probe"] = self.probe
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> InvocationConfig:
        return cls(ArgvTemplate.from_json(d["template"]), FsState.from_json(d["env"]), d.get("stdin"),
                   d.get("probe"), d.get("config_id", ""))


def config_digest(argv: Sequence[str], env: FsState, stdin: str | None, probe: str | None) -> str:
    desc: dict[str, Any] = {"argv": list(argv), "env": env.to_json(), "stdin": stdin}
    if probe is not None:
        desc["probe"] = probe
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:32]


# -- values ------------------------------------------------------------------

def path_placeholders() -> list[str]:
    return [f"{{path:{p}}}" for p in POINTERS]


def typed_values(t: ArgType, limits: GenerationLimits, store: ContentStore | None = None) -> list[str]:
    tag = t.effective
    if tag == "selection":
        return list(t.values)
    if tag == "integer":
        return [str(i) for i in limits.integer_samples]
    if tag == "char":
        return list(CHAR_SAMPLES)
    if tag == "path":
        return path_placeholders()
    store = store or ContentStore(limits.content_dir, limits.seed)
    return store.string_samples(limits.string_samples)


@dataclass(frozen=True)
class Selection:
    usage: int
    items: tuple[tuple[Arg, str | None], ...]   # value None for flags, "{path}" for path options

    def names(self) -> list[str]:
        return [a.name for a, _ in self.items]


def flag_option_combinations(spec: SyntaxSpec, limits: GenerationLimits,
                             store: ContentStore | None = None) -> list[Selection]:
    """Subsets of each usage's flags/options up to the size limit, options paired with values."""
    out: list[Selection] = []
    for ui, usage in enumerate(spec.usages):
        pool = flags_and_options(usage)
        for size in range(0, min(limits.max_flags_options, len(pool)) + 1):
            for combo in itertools.combinations(pool, size):
                choices = []
                for a in combo:
                    if a.kind == "flag":
                        choices.append([None])
                    elif a.value_type.effective == "path":
                        choices.append(["{path}"])
                    else:
                        choices.append(typed_values(a.value_type, limits, store))
                for vals in itertools.product(*choices):
                    out.append(Selection(ui, tuple(zip(combo, vals))))
    return out


def _arg_fills(a: Arg, limits: GenerationLimits, store: ContentStore | None) -> list[list[tuple[Arg, str]]]:
    """Fillings of one positional: for each repetition count, one rotation of the
    sample values per starting sample (a bounded stand-in for the full product)."""
    counts = a.arity.counts(limits.variable_arity_instantiations)
    if a.max_repetition is not None:
        counts = [c for c in counts if c <= a.max_repetition]
    vals = ["{path}"] if a.value_type.effective == "path" else typed_values(a.value_type, limits, store)
    out: list[list[tuple[Arg, str]]] = []
    for c in counts:
        rows = {tuple(vals[(j + t) % len(vals)] for t in range(c)) for j in range(len(vals))} if c else {()}
        out.extend([(a, v) for v in row] for row in sorted(rows))
    if a.dash_as_stdin and a.arity.minimum <= 1:
        out.append([(a, "-")])
    return out


def _position_choices(usage: Usage, pi: int, limits: GenerationLimits,
                      store: ContentStore | None) -> list[list[tuple[Arg, str]]]:
    """Alternative positional fillings of one position: lists of (arg, value-or-'{path}').

    Every positional of the position is filled at once, each at one of its counts."""
    positionals = [a for a in usage.positions[pi].sorted_args() if a.kind == "positional"]
    if not positionals:
        return [[]]
    fills: list[list[tuple[Arg, str]]] = []
    seen: set[tuple] = set()
    for parts in itertools.product(*(_arg_fills(a, limits, store) for a in positionals)):
        fill = [x for part in parts for x in part]
        sig = tuple((id(x), v) for x, v in fill)
        if sig not in seen:
            seen.add(sig)
            fills.append(fill)
    fills.sort(key=len)
    return fills


def build_templates(spec: SyntaxSpec, limits: GenerationLimits,
                    store: ContentStore | None = None) -> Iterator[ArgvTemplate]:
    """Argv templates in deterministic order (selection, then positional fillings)."""
    for sel in flag_option_combinations(spec, limits, store):
        usage = spec.usages[sel.usage]
        per_position = [_position_choices(usage, pi, limits, store) for pi in range(len(usage.positions))]
        for fills in itertools.product(*per_position):
            yield _assemble(spec.command, usage, sel, fills)


def _assemble(command: str, usage: Usage, sel: Selection,
              fills: Sequence[list[tuple[Arg, str]]]) -> ArgvTemplate:
    chosen = {id(a): (a, v) for a, v in sel.items}
    tokens: list[Token] = []
    labels: list[str] = []
    pos_types: list[str] = []
    dash = False
    opt_labels: list[tuple[int, str]] = []
    pos_count = 0
    for pi, pos in enumerate(usage.positions):
        for a in pos.sorted_args():
            if id(a) not in chosen or a.kind == "positional":
                continue
            _, v = chosen[id(a)]
            if a.kind == "flag":
                tokens.append(Token(a.name))
                continue
            if v == "{path}":
                slot = len(labels)
                labels.append(a.name)
                opt_labels.append((slot, a.name))
                if a.flag_followed_by_equals:
                    tokens.append(Token(a.name + "=", slot))
                else:
                    tokens.append(Token(a.name))
                    tokens.append(Token("", slot))
            else:
                tokens.extend([Token(f"{a.name}={v}")] if a.flag_followed_by_equals
                              else [Token(a.name), Token(v)])
        for a, v in fills[pi]:
            pos_types.append(a.value_type.effective if v != "-" else "stdin")
            if v == "{path}":
                pos_count += 1
                slot = len(labels)
                labels.append(f"${pos_count}")
                tokens.append(Token("", slot))
            else:
                if a.value_type.effective != "path":
                    pos_count += 1
                if v == "-":
                    dash = True
                tokens.append(Token(v))
    flags = tuple(sorted(a.name for a, v in sel.items if a.kind == "flag"))
    options = tuple(sorted((a.name, a.value_type.effective) for a, v in sel.items if a.kind == "option"))
    key = InvocationKey(sel.usage, flags, options, tuple(pos_types))
    reads_stdin = dash or not labels
    return ArgvTemplate(command, tuple(tokens), key, tuple(labels), reads_stdin)


def stdin_variants(template: ArgvTemplate) -> list[str | None]:
    if not template.reads_stdin:
        return [None]
    return [None] + [f"{k}:full:0" for k in KINDS]


def _configs_for(template: ArgvTemplate) -> Iterator[InvocationConfig]:
    for env in environments_for(template.n_slots):
        for stdin in stdin_variants(template):
            yield InvocationConfig(template, env, stdin)


def generate_configs(spec: SyntaxSpec, limits: GenerationLimits = GenerationLimits(),
                     store: ContentStore | None = None) -> Iterator[InvocationConfig]:
    """Lazy, deterministic stream of configurations; warns and stops at the cap."""
    problems = validate_spec(spec)
    if problems:
        raise InvalidSpec(problems)
    store = store or ContentStore(limits.content_dir, limits.seed)
    emitted = 0
    for template in build_templates(spec, limits, store):
        for cfg in _configs_for(template):
            if emitted >= limits.max_configs:
                warnings.warn(f"configuration cap of {limits.max_configs} reached; output truncated",
                              CapReached, stacklevel=2)
                return
            emitted += 1
            yield cfg


def targeted_configs(spec: SyntaxSpec, argv: Sequence[str], limits: GenerationLimits = GenerationLimits(),
                     store: ContentStore | None = None) -> list[InvocationConfig]:
    """Configurations for one literal invocation: its path arguments become swept slots."""
    from .invocation import parse_invocation

    parsed = parse_invocation(list(argv), spec)
    usage = spec.usages[parsed.usage]
    sel_items: list[tuple[Arg, str | None]] = []
    fills: list[list[tuple[Arg, str]]] = [[] for _ in usage.positions]
    for it in parsed.items:
        if it.arg.kind == "flag":
            if all(a is not it.arg for a, _ in sel_items):
                sel_items.append((it.arg, None))
        elif it.arg.kind == "option":
            v = "{path}" if it.arg.value_type.effective == "path" else it.value
            sel_items.append((it.arg, v))
        else:
            v = it.value or ""
            if it.arg.value_type.effective == "path" and not (v == "-" and it.arg.dash_as_stdin):
                v = "{path}"
            fills[it.position].append((it.arg, v))
    template = _assemble(spec.command, usage, Selection(parsed.usage, tuple(sel_items)), fills)
    configs = list(_configs_for(template))
    return configs + probe_configs([template], limits)


# -- derivation probes -------------------------------------------------------

def representative_templates(templates: Sequence[ArgvTemplate]) -> dict[InvocationKey, ArgvTemplate]:
    """First template generated for each key."""
    out: dict[InvocationKey, ArgvTemplate] = {}
    for t in templates:
        out.setdefault(t.key, t)
    return out


def probe_configs(templates: Sequence[ArgvTemplate], limits: GenerationLimits) -> list[InvocationConfig]:
    """Extra runs feeding the partition and split rules.

    * partition probes (keys with one input: stdin, or exactly one path slot):
      whole content, a repeat of it, and each line partition for every n;
    * split probes (keys whose positional path slots number two or more):
      the combined invocation and each single-argument invocation.
    """
    out: list[InvocationConfig] = []
    content = DEFAULT_FILE_CONTENT
    for key, t in sorted(representative_templates(templates).items(), key=lambda kv: kv[0].sort_key):
        tag = f"@{key.digest}"
        if t.n_slots == 0:
            out.append(InvocationConfig(t, FsState(), content, "partition:whole" + tag))
            out.append(InvocationConfig(t, FsState(), content, "repeat" + tag))
            for n in limits.partitions:
                for k in range(n):
                    out.append(InvocationConfig(t, FsState(), f"{content}#part={k}/{n}", f"partition:{n}:{k}" + tag))
        elif t.n_slots == 1:
            env = lambda ref: FsState((SlotState("relative", "file", ref),))  # noqa: E731
            out.append(InvocationConfig(t, env(content), None, "partition:whole" + tag))
            out.append(InvocationConfig(t, env(content), None, "repeat" + tag))
            for n in limits.partitions:
                for k in range(n):
                    out.append(InvocationConfig(t, env(f"{content}#part={k}/{n}"), None, f"partition:{n}:{k}" + tag))
        pos_slots = [i for i, lab in enumerate(t.slot_labels) if lab.startswith("$")]
        if len(pos_slots) >= 2 and len(pos_slots) == t.n_slots:
            n = len(pos_slots)
            states = tuple(SlotState("relative", "file", f"{content}#part={k}/{n}") for k in range(n))
            env = FsState(states)
            out.append(InvocationConfig(t, env, None, "split:combined" + tag))
            for k in range(n):
                single = _single_slot(t, k)
                out.append(InvocationConfig(single, FsState((states[k],)), None, f"split:{n}:{k}" + tag))
    return out


def _single_slot(t: ArgvTemplate, keep: int) -> ArgvTemplate:
    """``t`` with every path slot but ``keep`` dropped; the kept slot becomes slot 0."""
    tokens = tuple(Token(tok.text, 0) if tok.slot == keep else tok
                   for tok in t.tokens if tok.slot is None or tok.slot == keep)
    pos = list(t.key.positionals)
    path_idx = [i for i, p in enumerate(pos) if p == "path"]
    drop = {path_idx[i] for i in range(len(path_idx)) if i != keep}
    key = replace(t.key, positionals=tuple(p for i, p in enumerate(pos) if i not in drop))
    return ArgvTemplate(t.command, tokens, key, ("$1",), False)


def all_configs(spec: SyntaxSpec, limits: GenerationLimits = GenerationLimits(),
                store: ContentStore | None = None) -> list[InvocationConfig]:
    """Generated configurations followed by derivation probes."""
    configs = list(generate_configs(spec, limits, store))
    seen: dict[str, ArgvTemplate] = {}
    for c in configs:
        seen.setdefault(json.dumps(c.template.to_json(), sort_keys=True), c.template)
    return configs + probe_configs(list(seen.values()), limits)
