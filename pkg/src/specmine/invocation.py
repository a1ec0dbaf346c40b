"""Match a concrete argv against a :class:`SyntaxSpec`.

This checker is written independently of the generator so it can police it:
every generated argv must parse here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

from .syntax import Arg, ArgType, SyntaxSpec, Usage

_INT_RE = re.compile(r"^[-+]?\d+$")


class InvocationError(ValueError):
    def __init__(self, message: str, rule: str) -> None:
        super().__init__(f"[{rule}] {message}")
        self.rule = rule


@dataclass(frozen=True)
class Item:
    position: int
    arg: Arg
    token: str | None = None     # the literal token(s) as written
    value: str | None = None     # option/positional value


@dataclass(frozen=True)
class ParsedInvocation:
    usage: int
    items: tuple[Item, ...]

    def flags(self) -> list[str]:
        return [i.arg.name for i in self.items if i.arg.kind == "flag"]

    def options(self) -> list[tuple[str, str]]:
        return [(i.arg.name, i.value or "") for i in self.items if i.arg.kind == "option"]

    def positionals(self) -> list[tuple[Arg, str]]:
        return [(i.arg, i.value or "") for i in self.items if i.arg.kind == "positional"]


def value_matches(t: ArgType, value: str, *, dash_ok: bool = False) -> bool:
    if value == "-" and dash_ok:
        return True
    tag = t.effective
    if tag == "selection":
        return value in t.values
    if tag == "integer":
        return bool(_INT_RE.match(value))
    if tag == "char":
        return len(value) == 1
    if tag == "path":
        return value != "" and not (value.startswith("-") and value != "-")
    return True


def _looks_like_flag(tok: str) -> bool:
    return tok.startswith("-") and tok != "-" and not _INT_RE.match(tok)


def _short_cluster(tok: str, by_name: dict[str, Arg]) -> list[Arg] | None:
    """``-rf`` -> [-r, -f] when every letter is a known single-letter flag."""
    if not tok.startswith("-") or tok.startswith("--") or len(tok) < 3:
        return None
    out = []
    for ch in tok[1:]:
        a = by_name.get("-" + ch)
        if a is None or a.kind != "flag":
            return None
        out.append(a)
    return out


def _match_usage(usage: Usage, tokens: tuple[str, ...]) -> tuple[Item, ...] | None:
    positions = [p.sorted_args() for p in usage.positions]

    @lru_cache(maxsize=None)
    def go(pi: int, ti: int, counts: tuple[int, ...]) -> tuple[Item, ...] | None:
        if pi == len(positions):
            return () if ti == len(tokens) else None
        args = positions[pi]
        # try consuming a token at this position first (greedy), then advancing
        if ti < len(tokens):
            tok = tokens[ti]
            by_name = {n: a for a in args for n in a.names}
            for ai, a in enumerate(args):
                hi = a.max_count
                if hi is not None and counts[ai] >= hi:
                    continue
                nxt = counts[:ai] + (counts[ai] + 1,) + counts[ai + 1:]
                if a.kind == "flag" and tok in a.names:
                    rest = go(pi, ti + 1, nxt)
                    if rest is not None:
                        return (Item(pi, a, tok),) + rest
                elif a.kind == "option":
                    if tok in a.names and ti + 1 < len(tokens) and value_matches(a.value_type, tokens[ti + 1]):
                        rest = go(pi, ti + 2, nxt)
                        if rest is not None:
                            return (Item(pi, a, tok, tokens[ti + 1]),) + rest
                    for nm in sorted(a.names):
                        if tok.startswith(nm + "=") and value_matches(a.value_type, tok[len(nm) + 1:]):
                            rest = go(pi, ti + 1, nxt)
                            if rest is not None:
                                return (Item(pi, a, tok, tok[len(nm) + 1:]),) + rest
                elif a.kind == "positional":
                    vt = a.value_type
                    if value_matches(vt, tok, dash_ok=a.dash_as_stdin) and (
                            not _looks_like_flag(tok) or vt.effective in ("selection", "char")
                            and value_matches(vt, tok)):
                        rest = go(pi, ti + 1, nxt)
                        if rest is not None:
                            return (Item(pi, a, None, tok),) + rest
            cluster = _short_cluster(tok, by_name)
            if cluster is not None:
                idx = {id(a): i for i, a in enumerate(args)}
                new = list(counts)
                ok = True
                for a in cluster:
                    i = idx[id(a)]
                    new[i] += 1
                    hi = a.max_count
                    if hi is not None and new[i] > hi:
                        ok = False
                if ok:
                    rest = go(pi, ti + 1, tuple(new))
                    if rest is not None:
                        return tuple(Item(pi, a, tok) for a in cluster) + rest
        if all(counts[ai] >= a.arity.minimum for ai, a in enumerate(args)
               if a.kind == "positional"):
            nxt_pos = pi + 1
            init = tuple(0 for _ in positions[nxt_pos]) if nxt_pos < len(positions) else ()
            return go(nxt_pos, ti, init)
        return None

    if not positions:
        return () if not tokens else None
    return go(0, 0, tuple(0 for _ in positions[0]))


def parse_invocation(argv: list[str] | tuple[str, ...], spec: SyntaxSpec) -> ParsedInvocation:
    """Parse ``argv`` (command name first) against the first usage that accepts it."""
    if not argv:
        raise InvocationError("empty argv", "empty_argv")
    if argv[0] != spec.command and argv[0].rsplit("/", 1)[-1] != spec.command:
        raise InvocationError(f"argv[0] {argv[0]!r} is not {spec.command!r}", "command_name")
    tokens = tuple(argv[1:])
    for ui, usage in enumerate(spec.usages):
        items = _match_usage(usage, tokens)
        if items is not None:
            return ParsedInvocation(ui, items)
    raise InvocationError(f"{' '.join(argv)!r} matches no usage of {spec.command}", "no_matching_usage")


def is_well_typed(argv: list[str] | tuple[str, ...], spec: SyntaxSpec) -> bool:
    try:
        parse_invocation(argv, spec)
    except InvocationError:
        return False
    return True
