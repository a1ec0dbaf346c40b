"""Typed grammar of a command's flags, options and positional arguments.

A :class:`SyntaxSpec` lists alternative :class:`Usage` grammars.  A usage is an
ordered list of :class:`Position` objects, each an unordered set of
:class:`Arg` values that may appear at that point of the command line.

On disk a spec is a JSON document (``.synspec.json``)::

    {"command": "rm",
     "usages": [{"positions": [
         {"args": [{"kind": "flag", "name": "-f"}, {"kind": "flag", "name": "-r"}]},
         {"args": [{"kind": "positional", "type": "path", "arity": "one_plus"}]}]}]}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

ARG_KINDS = ("flag", "option", "positional")
TYPE_TAGS = ("path", "selection", "integer", "char", "string", "other")
ARITY_KINDS = ("zero_one", "zero_plus", "one_plus", "exactly")
MAX_EXACT_ARITY = 16

_ARITY_ALIASES = {"?": "zero_one", "*": "zero_plus", "0+": "zero_plus", "+": "one_plus",
                  "1+": "one_plus"}
_ARG_FIELDS = {"kind", "name", "aliases", "arity", "type", "flag_followed_by_equals",
               "dash_as_stdin", "max_repetition"}


class SpecParseError(ValueError):
    """A ``.synspec.json`` document could not be read.

    ``line`` is 1-based when known; ``field`` is a JSON-pointer-like location.
    """

    def __init__(self, message: str, line: int | None = None, field: str | None = None) -> None:
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field:
            loc.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.field = field


class InvalidSpec(ValueError):
    def __init__(self, violations: list[Violation]) -> None:
        super().__init__("; ".join(v.message for v in violations))
        self.violations = violations


@dataclass(frozen=True)
class Violation:
    element: str
    rule: str
    message: str

    def __str__(self) -> str:
        return f"{self.element}: [{self.rule}] {self.message}"


@dataclass(frozen=True)
class Arity:
    kind: str
    n: int | None = None

    @classmethod
    def exactly(cls, n: int) -> Arity:
        return cls("exactly", n)

    @property
    def minimum(self) -> int:
        return {"zero_one": 0, "zero_plus": 0, "one_plus": 1}.get(self.kind, self.n or 0)

    @property
    def maximum(self) -> int | None:
        if self.kind == "zero_one":
            return 1
        if self.kind == "exactly":
            return self.n
        return None

    @property
    def variable(self) -> bool:
        return self.kind in ("zero_plus", "one_plus")

    def counts(self, instantiations: Iterable[int]) -> list[int]:
        """Concrete repetition counts to generate for this arity."""
        inst = sorted({c for c in instantiations if c >= 1})
        if self.kind == "zero_one":
            return [0, 1]
        if self.kind == "zero_plus":
            return [0, *inst]
        if self.kind == "one_plus":
            return inst
        return [self.n or 0]

    def to_json(self) -> str | int:
        return self.n if self.kind == "exactly" else self.kind  # type: ignore[return-value]

    def __str__(self) -> str:
        return str(self.to_json())


ZERO_ONE = Arity("zero_one")
ZERO_PLUS = Arity("zero_plus")
ONE_PLUS = Arity("one_plus")
ONE = Arity.exactly(1)


@dataclass(frozen=True)
class ArgType:
    tag: str
    values: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.tag == "selection":
            object.__setattr__(self, "values", tuple(sorted(set(self.values))))

    @property
    def effective(self) -> str:
        """``other`` is handled exactly like ``string`` downstream."""
        return "string" if self.tag == "other" else self.tag

    def to_json(self) -> Any:
        return {"selection": list(self.values)} if self.tag == "selection" else self.tag

    def __str__(self) -> str:
        return f"selection({','.join(self.values)})" if self.tag == "selection" else self.tag


PATH = ArgType("path")
INTEGER = ArgType("integer")
CHAR = ArgType("char")
STRING = ArgType("string")
OTHER = ArgType("other")


def selection(*values: str) -> ArgType:
    return ArgType("selection", tuple(values))


@dataclass(frozen=True)
class Arg:
    kind: str
    name: str = ""
    aliases: frozenset[str] = field(default_factory=frozenset)
    arity: Arity = ZERO_ONE
    value_type: ArgType | None = None
    flag_followed_by_equals: bool = False
    dash_as_stdin: bool = False
    max_repetition: int | None = None

    @property
    def names(self) -> frozenset[str]:
        return frozenset({self.name, *self.aliases}) if self.name else frozenset(self.aliases)

    @property
    def sort_key(self) -> tuple:
        return (self.name, ARG_KINDS.index(self.kind) if self.kind in ARG_KINDS else 9,
                json.dumps(arg_to_json(self), sort_keys=True))

    @property
    def max_count(self) -> int | None:
        hi = self.arity.maximum
        if self.max_repetition is not None:
            hi = self.max_repetition if hi is None else min(hi, self.max_repetition)
        return hi

    def __str__(self) -> str:
        if self.kind == "flag":
            return self.name
        if self.kind == "option":
            return f"{self.name} <{self.value_type}>"
        return f"<{self.value_type}:{self.arity}>"


def Flag(name: str, *aliases: str, arity: Arity = ZERO_ONE, max_repetition: int | None = None) -> Arg:
    return Arg("flag", name, frozenset(aliases), arity, None, max_repetition=max_repetition)


def Option(name: str, value_type: ArgType, *aliases: str, arity: Arity = ZERO_ONE,
           equals: bool = False, max_repetition: int | None = None) -> Arg:
    return Arg("option", name, frozenset(aliases), arity, value_type, equals,
               max_repetition=max_repetition)


def Positional(value_type: ArgType, arity: Arity = ONE, *, dash_as_stdin: bool = False,
               max_repetition: int | None = None) -> Arg:
    return Arg("positional", "", frozenset(), arity, value_type, False, dash_as_stdin, max_repetition)


@dataclass(frozen=True)
class Position:
    args: frozenset[Arg]

    @classmethod
    def of(cls, *args: Arg) -> Position:
        return cls(frozenset(args))

    def sorted_args(self) -> list[Arg]:
        return sorted(self.args, key=lambda a: a.sort_key)


@dataclass(frozen=True)
class Usage:
    positions: tuple[Position, ...]

    @classmethod
    def of(cls, *positions: Position | Iterable[Arg]) -> Usage:
        return cls(tuple(p if isinstance(p, Position) else Position(frozenset(p)) for p in positions))

    def args(self) -> list[Arg]:
        return [a for p in self.positions for a in p.sorted_args()]


@dataclass(frozen=True)
class SyntaxSpec:
    command: str
    usages: tuple[Usage, ...]

    @classmethod
    def of(cls, command: str, *usages: Usage | Iterable[Iterable[Arg]]) -> SyntaxSpec:
        return cls(command, tuple(u if isinstance(u, Usage) else Usage.of(*u) for u in usages))


# -- validation ------------------------------------------------------------

def validate_spec(spec: SyntaxSpec) -> list[Violation]:
    """Every invariant breach as data; an empty list means the syntax is valid."""
    out: list[Violation] = []
    cmd = spec.command
    if not isinstance(cmd, str) or not cmd or re.search(r"\s", cmd):
        out.append(Violation("command", "command_name",
                             f"command name {cmd!r} must be non-empty and contain no whitespace"))
    if not spec.usages:
        out.append(Violation("usages", "empty_usages", "a spec needs at least one usage"))
    for ui, usage in enumerate(spec.usages):
        if not usage.positions:
            out.append(Violation(f"usages[{ui}]", "empty_usage", "a usage needs at least one position"))
        for pi, pos in enumerate(usage.positions):
            where = f"usages[{ui}].positions[{pi}]"
            if not pos.args:
                out.append(Violation(where, "empty_position", "a position needs at least one argument"))
            seen: dict[str, int] = {}
            for ai, arg in enumerate(pos.sorted_args()):
                out.extend(_validate_arg(arg, f"{where}.args[{ai}]"))
                for nm in sorted(arg.names):
                    if nm in seen:
                        out.append(Violation(f"{where}.args[{ai}]", "name_collision",
                                             f"name {nm!r} is used by two arguments of one position"))
                    seen[nm] = ai
    return out


def _validate_arg(arg: Arg, where: str) -> list[Violation]:
    out: list[Violation] = []
    if arg.kind not in ARG_KINDS:
        out.append(Violation(where, "arg_kind", f"unknown argument kind {arg.kind!r}"))
        return out
    if arg.kind in ("flag", "option") and not arg.name:
        out.append(Violation(where, "missing_name", f"a {arg.kind} needs a name"))
    if arg.kind == "positional" and (arg.name or arg.aliases):
        out.append(Violation(where, "positional_name", "positional arguments carry no name or aliases"))
    if arg.name and arg.name in arg.aliases:
        out.append(Violation(where, "alias_collision", f"alias {arg.name!r} repeats the primary name"))
    for nm in [arg.name, *arg.aliases]:
        if nm and re.search(r"\s", nm):
            out.append(Violation(where, "name_whitespace", f"name {nm!r} contains whitespace"))
    if arg.kind == "flag" and arg.value_type is not None:
        out.append(Violation(where, "flag_value_type", f"flag {arg.name!r} must not declare a type"))
    if arg.kind != "flag" and arg.value_type is None:
        out.append(Violation(where, "missing_value_type", f"{arg.kind} must declare exactly one type"))
    vt = arg.value_type
    if vt is not None:
        if vt.tag not in TYPE_TAGS:
            out.append(Violation(where, "type_tag", f"unknown type {vt.tag!r}"))
        elif vt.tag == "selection" and not vt.values:
            out.append(Violation(where, "empty_selection", "selection needs at least one value"))
        elif vt.tag != "selection" and vt.values:
            out.append(Violation(where, "type_values", f"type {vt.tag!r} takes no value list"))
    ar = arg.arity
    if ar.kind not in ARITY_KINDS:
        out.append(Violation(where, "arity_kind", f"unknown arity {ar.kind!r}"))
    elif ar.kind == "exactly" and (ar.n is None or not 1 <= ar.n <= MAX_EXACT_ARITY):
        out.append(Violation(where, "arity_range",
                             f"exact arity must be between 1 and {MAX_EXACT_ARITY}, got {ar.n}"))
    if arg.max_repetition is not None and arg.max_repetition < 1:
        out.append(Violation(where, "max_repetition", "max_repetition must be positive"))
    if arg.flag_followed_by_equals and arg.kind != "option":
        out.append(Violation(where, "equals_on_non_option",
                             "flag_followed_by_equals only applies to options"))
    if arg.dash_as_stdin and arg.kind == "flag":
        out.append(Violation(where, "dash_on_flag", "dash_as_stdin does not apply to flags"))
    return out


# -- serialization ---------------------------------------------------------

def arg_to_json(arg: Arg) -> dict[str, Any]:
    d: dict[str, Any] = {
        "kind": arg.kind,
        "name": arg.name,
        "aliases": sorted(arg.aliases),
        "arity": arg.arity.to_json(),
        "flag_followed_by_equals": arg.flag_followed_by_equals,
        "dash_as_stdin": arg.dash_as_stdin,
        "max_repetition": arg.max_repetition,
    }
    if arg.value_type is not None:
        d["type"] = arg.value_type.to_json()
    return d


def spec_to_json(spec: SyntaxSpec) -> dict[str, Any]:
    return {
        "command": spec.command,
        "usages": [{"positions": [{"args": [arg_to_json(a) for a in p.sorted_args()]}
                                  for p in u.positions]} for u in spec.usages],
    }


def serialize_spec(spec: SyntaxSpec) -> str:
    """Canonical text: sorted keys, args ordered by primary name, trailing newline."""
    problems = validate_spec(spec)
    if problems:
        raise InvalidSpec(problems)
    return json.dumps(spec_to_json(spec), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


# -- parsing ---------------------------------------------------------------

class _Locator:
    """Map JSON paths to 1-based line numbers by a small scan of the text."""

    _ws = re.compile(r"[ \t\r\n]*")
    _lit = re.compile(r"-?\d+(\.\d+)?([eE][-+]?\d+)?|true|false|null")

    def __init__(self, text: str) -> None:
        self.text = text
        self.lines: dict[str, int] = {}
        try:
            self._value(self._skip(0), "")
        except Exception:  # noqa: BLE001 - best effort only
            pass

    def line(self, path: str) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rsplit("/", 1)[0] if "/" in path else ""
        return self.lines.get("")

    def _skip(self, i: int) -> int:
        return self._ws.match(self.text, i).end()

    def _lineno(self, i: int) -> int:
        return self.text.count("\n", 0, i) + 1

    def _value(self, i: int, path: str) -> int:
        self.lines.setdefault(path, self._lineno(i))
        ch = self.text[i]
        if ch == "{":
            i = self._skip(i + 1)
            if self.text[i] == "}":
                return i + 1
            while True:
                key, i = json.decoder.scanstring(self.text, i + 1)
                i = self._skip(i)
                i = self._skip(i + 1)  # ':'
                i = self._skip(self._value(i, f"{path}/{key}"))
                if self.text[i] == "}":
                    return i + 1
                i = self._skip(i + 1)
        if ch == "[":
            i = self._skip(i + 1)
            k = 0
            if self.text[i] == "]":
                return i + 1
            while True:
                i = self._skip(self._value(i, f"{path}/{k}"))
                k += 1
                if self.text[i] == "]":
                    return i + 1
                i = self._skip(i + 1)
        if ch == '"':
            return json.decoder.scanstring(self.text, i + 1)[1]
        m = self._lit.match(self.text, i)
        return m.end()


def _no_dupes(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise SpecParseError(f"duplicate key {k!r}")
        out[k] = v
    return out


def parse_arity(value: Any, where: str = "arity", loc: _Locator | None = None) -> Arity:
    line = loc.line(where) if loc else None
    if isinstance(value, bool):
        raise SpecParseError(f"unknown arity {value!r}", line, where)
    if isinstance(value, int):
        return Arity.exactly(value)
    if isinstance(value, str):
        v = _ARITY_ALIASES.get(value, value)
        if v in ("zero_one", "zero_plus", "one_plus"):
            return Arity(v)
        if re.fullmatch(r"\d+", v):
            return Arity.exactly(int(v))
    raise SpecParseError(f"unknown arity {value!r}", line, where)


def parse_type(value: Any, where: str = "type", loc: _Locator | None = None) -> ArgType:
    line = loc.line(where) if loc else None
    if isinstance(value, str):
        if value in TYPE_TAGS and value != "selection":
            return ArgType(value)
        raise SpecParseError(f"unknown type {value!r}", line, where)
    if isinstance(value, dict) and set(value) == {"selection"} and isinstance(value["selection"], list):
        vals = value["selection"]
        if not all(isinstance(v, str) for v in vals):
            raise SpecParseError("selection values must be strings", line, where)
        return ArgType("selection", tuple(vals))
    raise SpecParseError(f"unknown type {value!r}", line, where)


def _expect(cond: bool, msg: str, where: str, loc: _Locator) -> None:
    if not cond:
        raise SpecParseError(msg, loc.line(where), where)


def _parse_arg(d: Any, where: str, loc: _Locator) -> Arg:
    _expect(isinstance(d, dict), "argument must be an object", where, loc)
    unknown = sorted(set(d) - _ARG_FIELDS)
    _expect(not unknown, f"unknown argument field(s) {unknown}", f"{where}/{unknown[0] if unknown else ''}", loc)
    kind = d.get("kind")
    _expect(kind in ARG_KINDS, f"unknown argument kind {kind!r}", f"{where}/kind", loc)
    name = d.get("name", "")
    _expect(isinstance(name, str), "name must be a string", f"{where}/name", loc)
    aliases = d.get("aliases", [])
    _expect(isinstance(aliases, list) and all(isinstance(a, str) for a in aliases),
            "aliases must be a list of strings", f"{where}/aliases", loc)
    _expect(len(set(aliases)) == len(aliases), "duplicate alias", f"{where}/aliases", loc)
    default_arity = ONE if kind == "positional" else ZERO_ONE
    arity = parse_arity(d["arity"], f"{where}/arity", loc) if "arity" in d else default_arity
    vt = parse_type(d["type"], f"{where}/type", loc) if "type" in d else None
    for key in ("flag_followed_by_equals", "dash_as_stdin"):
        _expect(isinstance(d.get(key, False), bool), f"{key} must be a boolean", f"{where}/{key}", loc)
    rep = d.get("max_repetition")
    _expect(rep is None or (isinstance(rep, int) and not isinstance(rep, bool)),
            "max_repetition must be an integer or null", f"{where}/max_repetition", loc)
    return Arg(kind, name, frozenset(aliases), arity, vt, d.get("flag_followed_by_equals", False),
               d.get("dash_as_stdin", False), rep)


def spec_from_json(doc: Any, loc: _Locator | None = None) -> SyntaxSpec:
    loc = loc or _Locator("")
    _expect(isinstance(doc, dict), "document must be an object", "", loc)
    unknown = sorted(set(doc) - {"command", "usages"})
    _expect(not unknown, f"unknown top-level field(s) {unknown}", f"/{unknown[0] if unknown else ''}", loc)
    _expect("command" in doc, "missing field 'command'", "/command", loc)
    _expect(isinstance(doc["command"], str), "command must be a string", "/command", loc)
    _expect(isinstance(doc.get("usages"), list), "usages must be a list", "/usages", loc)
    usages = []
    for ui, u in enumerate(doc["usages"]):
        uw = f"/usages/{ui}"
        _expect(isinstance(u, dict) and set(u) <= {"positions"} and isinstance(u.get("positions"), list),
                "usage must be an object with a 'positions' list", uw, loc)
        positions = []
        for pi, p in enumerate(u["positions"]):
            pw = f"{uw}/positions/{pi}"
            _expect(isinstance(p, dict) and set(p) <= {"args"} and isinstance(p.get("args"), list),
                    "position must be an object with an 'args' list", pw, loc)
            args = [_parse_arg(a, f"{pw}/args/{ai}", loc) for ai, a in enumerate(p["args"])]
            seen: set[str] = set()
            for ai, a in enumerate(args):
                for nm in sorted(a.names):
                    _expect(nm not in seen, f"duplicate argument name {nm!r}",
                            f"{pw}/args/{ai}/name", loc)
                    seen.add(nm)
            fs = frozenset(args)
            _expect(len(fs) == len(args), "duplicate argument", f"{pw}/args", loc)
            positions.append(Position(fs))
        usages.append(Usage(tuple(positions)))
    return SyntaxSpec(doc["command"], tuple(usages))


def parse_spec(text: str) -> SyntaxSpec:
    """Read a ``.synspec.json`` document; invariant breaches are left to :func:`validate_spec`."""
    if not text or not text.strip():
        raise SpecParseError("empty document", 1, None)
    try:
        doc = json.loads(text, object_pairs_hook=_no_dupes)
    except json.JSONDecodeError as exc:
        raise SpecParseError(f"malformed JSON: {exc.msg}", exc.lineno, None) from None
    except SpecParseError as exc:
        raise SpecParseError(str(exc), None, None) from None
    return spec_from_json(doc, _Locator(text))


def load_spec(path: str) -> SyntaxSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


def spec_digest(spec: SyntaxSpec) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(spec_to_json(spec), sort_keys=True).encode()).hexdigest()


def flags_and_options(usage: Usage) -> list[Arg]:
    return sorted((a for a in usage.args() if a.kind != "positional"), key=lambda a: a.sort_key)
