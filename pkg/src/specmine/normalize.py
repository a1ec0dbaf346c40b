"""Invocation normalization and corpus coverage against a derived spec."""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .derive import CommandSpec
from .invocation import InvocationError, ParsedInvocation, parse_invocation
from .syntax import SyntaxSpec

RULES = ("flag_order", "path", "integer", "string", "arity")
PLACEHOLDER = {"path": "_path_", "integer": "0", "string": "_str_"}


@dataclass(frozen=True)
class NormalizationRule:
    name: str
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.name not in RULES:
            raise ValueError(f"unknown normalization rule {self.name!r}; choose from {', '.join(RULES)}")


@dataclass(frozen=True)
class NormalizationConfig:
    rules: tuple[NormalizationRule, ...] = tuple(NormalizationRule(r) for r in RULES)
    # commands whose string arguments carry behavior (e.g. a nested command line)
    string_denylist: frozenset[str] = frozenset()

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.rules if r.enabled)

    @classmethod
    def of(cls, names: Iterable[str], string_denylist: Iterable[str] = ()) -> NormalizationConfig:
        names = set(names)
        unknown = names - set(RULES)
        if unknown:
            raise ValueError(f"unknown normalization rule(s): {', '.join(sorted(unknown))}")
        return cls(tuple(NormalizationRule(r, r in names) for r in RULES), frozenset(string_denylist))


def _abstract(value: str, tag: str, rules: set[str], command: str, cfg: NormalizationConfig) -> str:
    if value == "-":
        return value
    if tag == "path" and "path" in rules:
        return PLACEHOLDER["path"]
    if tag == "integer" and "integer" in rules:
        return PLACEHOLDER["integer"]
    if tag in ("string", "other") and "string" in rules and command not in cfg.string_denylist:
        return PLACEHOLDER["string"]
    return value


def canonical(parsed: ParsedInvocation, syntax: SyntaxSpec, rules: Iterable[str],
              cfg: NormalizationConfig = NormalizationConfig()) -> tuple[str, ...]:
    rules = set(rules)
    groups: dict[int, list[list[str]]] = {}
    positionals: dict[int, list[tuple[int, str]]] = {}
    for item in parsed.items:
        a = item.arg
        if a.kind == "flag":
            groups.setdefault(item.position, []).append([a.name])
        elif a.kind == "option":
            groups.setdefault(item.position, []).append(
                [a.name, _abstract(item.value or "", a.value_type.effective, rules, syntax.command, cfg)])
        else:
            positionals.setdefault(item.position, []).append(
                (id(a), _abstract(item.value or "", a.value_type.effective, rules, syntax.command, cfg)))
    out = [syntax.command]
    for pos in sorted(set(groups) | set(positionals)):
        named = groups.get(pos, [])
        if "flag_order" in rules:
            named = sorted(named)
        for toks in named:
            out.extend(toks)
        prev = None
        for arg_id, val in positionals.get(pos, []):
            if "arity" in rules and prev == arg_id:
                continue
            prev = arg_id
            out.append(val)
    return tuple(out)


def normalize_invocation(argv: Sequence[str], syntax: SyntaxSpec, rules: Iterable[str] = RULES,
                         cfg: NormalizationConfig = NormalizationConfig()) -> tuple[str, ...]:
    """Canonical key for ``argv``. With no rules the argv itself is the key."""
    rules = list(rules)
    for r in rules:
        if r not in RULES:
            raise ValueError(f"unknown normalization rule {r!r}")
    parsed = parse_invocation(list(argv), syntax)
    if not rules:
        return tuple(argv)
    return canonical(parsed, syntax, rules, cfg)


@dataclass
class CoverageReport:
    total: int = 0
    unparsed: int = 0
    exact: int = 0
    by_rule: dict[str, int] = field(default_factory=dict)
    unmatched: int = 0
    unmatched_lines: list[str] = field(default_factory=list)
    unparsed_lines: list[str] = field(default_factory=list)

    @property
    def matched(self) -> int:
        return self.exact + sum(self.by_rule.values())

    @property
    def ratio(self) -> float:
        return self.matched / self.total if self.total else 0.0

    def to_json(self) -> dict:
        cumulative, run = {}, self.exact
        for r, n in self.by_rule.items():
            run += n
            cumulative[r] = run
        return {"total": self.total, "unparsed": self.unparsed, "exact": self.exact,
                "by_rule": dict(self.by_rule), "cumulative": cumulative, "matched": self.matched,
                "unmatched": self.unmatched, "coverage": round(self.ratio, 6),
                "unmatched_lines": self.unmatched_lines, "unparsed_lines": self.unparsed_lines}

    def render(self) -> str:
        lines = [f"total      {self.total}", f"exact      {self.exact}"]
        run = self.exact
        for r, n in self.by_rule.items():
            run += n
            lines.append(f"+{r:<11} {n}  (cumulative {run})")
        lines += [f"unmatched  {self.unmatched}", f"unparsed   {self.unparsed}",
                  f"coverage   {100 * self.ratio:.2f}%"]
        return "\n".join(lines) + "\n"


def coverage_report(corpus: Iterable[str], spec: CommandSpec, rules: Iterable[str] = RULES,
                    cfg: NormalizationConfig = NormalizationConfig()) -> CoverageReport:
    """Match corpus lines against tested invocations, crediting each line to the
    first rule (applied cumulatively, in ``RULES`` order) under which it matches."""
    order = [r for r in RULES if r in set(rules)]
    syntax = spec.syntax
    tested = [a for inv in spec.invocations for a in inv.tested_argv]
    tested_parsed = []
    for a in tested:
        try:
            tested_parsed.append((a, parse_invocation(list(a), syntax)))
        except InvocationError:
            continue
    exact_set = {tuple(a) for a in tested}
    stage_sets = []
    for i in range(len(order)):
        active = order[:i + 1]
        stage_sets.append((order[i], {canonical(p, syntax, active, cfg) for _, p in tested_parsed}))

    rep = CoverageReport(by_rule={r: 0 for r in order})
    for raw in corpus:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rep.total += 1
        try:
            argv = shlex.split(line)
            parsed = parse_invocation(argv, syntax)
        except (ValueError, InvocationError):
            rep.unparsed += 1
            rep.unparsed_lines.append(line)
            continue
        if tuple(argv) in exact_set:
            rep.exact += 1
            continue
        for i, (rule, keys) in enumerate(stage_sets):
            if canonical(parsed, syntax, order[:i + 1], cfg) in keys:
                rep.by_rule[rule] += 1
                break
        else:
            rep.unmatched += 1
            rep.unmatched_lines.append(line)
    return rep
