"""Translate a :class:`CommandSpec` into downstream consumer formats.

Each target has three pieces: ``project_<t>`` reduces a spec to the fields the
target can express, ``export_<t>`` renders that projection, and ``import_<t>``
parses a rendered document back into a projection. Round-tripping is exact:
``import_t(export_t(spec)) == project_t(spec)``.
"""

from __future__ import annotations

import json
import re
from importlib import resources
from string import Template
from typing import Any, Callable

import yaml

from .atomic import write_atomic
from .derive import CommandSpec, InvocationSpec

TARGETS = ("pash", "posh", "shellcheck", "shseer")
SUFFIX = {"pash": ".pash.json", "posh": ".posh.yaml", "shellcheck": ".shellcheck.hs", "shseer": ".shseer.json"}
_EXISTING = ("file", "dir_empty", "dir_one_child")


class ExportError(ValueError):
    pass


def _key_json(inv: InvocationSpec) -> dict[str, Any]:
    return inv.key.to_json()


# -- pash ------------------------------------------------------------------------

def _pash_class(inv: InvocationSpec) -> str:
    if inv.status != "ok" or inv.parallelizability is None:
        return "unknown"
    return inv.parallelizability.replace("_", "-")


def project_pash(spec: CommandSpec) -> dict[str, Any]:
    recs = []
    for inv in spec.invocations:
        known = inv.status == "ok"
        recs.append({"key": _key_json(inv), "class": _pash_class(inv),
                     "inputs": sorted(inv.io.inputs) if known else [],
                     "outputs": sorted(inv.io.outputs) if known else []})
    return {"format": "specmine.pash/1", "command": spec.command, "invocations": recs}


def export_pash(spec: CommandSpec) -> str:
    return json.dumps(project_pash(spec), indent=2, sort_keys=True) + "\n"


def import_pash(text: str) -> dict[str, Any]:
    doc = json.loads(text)
    if doc.get("format") != "specmine.pash/1":
        raise ExportError("not a pash document")
    return doc


# -- posh ------------------------------------------------------------------------

def project_posh(spec: CommandSpec) -> dict[str, Any]:
    fams = []
    for inv in spec.invocations:
        ok = inv.status == "ok"
        fams.append({
            "key": _key_json(inv),
            "splittable_input": (inv.parallelizability == "stateless") if ok else None,
            "splittable_arguments": inv.splittable if ok else None,
            "filters_input": bool(inv.monotone_decreasing and not inv.filtering_vacuous) if ok else None,
            "location_dependent": inv.cwd_dependent if ok else None,
        })
    return {"format": "specmine.posh/1", "command": spec.command, "invocations": fams}


def export_posh(spec: CommandSpec) -> str:
    return yaml.safe_dump(project_posh(spec), sort_keys=True, default_flow_style=False)


def import_posh(text: str) -> dict[str, Any]:
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or doc.get("format") != "specmine.posh/1":
        raise ExportError("not a posh document")
    return doc


# -- shellcheck ------------------------------------------------------------------

def _template(name: str) -> Template:
    ref = resources.files("specmine") / "data" / "templates" / "shellcheck" / f"{name}.tmpl"
    return Template(ref.read_text(encoding="utf-8"))


def _hs_list(items) -> str:
    return ", ".join(json.dumps(x) for x in items)


def _camel(command: str) -> str:
    parts = re.split(r"[^A-Za-z0-9]+", command)
    out = "".join(p[:1].upper() + p[1:] for p in parts if p)
    return out if out and out[0].isalpha() else "Cmd" + out


def _arity_ranges(spec: CommandSpec) -> list[tuple[int, int | None]]:
    ranges = set()
    for usage in spec.syntax.usages:
        lo, hi = 0, 0
        for a in usage.args():
            if a.kind != "positional":
                continue
            lo += a.arity.minimum
            hi = None if hi is None or a.arity.maximum is None else hi + a.arity.maximum
        ranges.add((lo, hi))
    return sorted(ranges, key=lambda r: (r[0], -1 if r[1] is None else r[1]))


def project_shellcheck(spec: CommandSpec) -> dict[str, Any]:
    ranges = _arity_ranges(spec)
    free = all(lo == 0 and hi is None for lo, hi in ranges)
    destructive = []
    for inv in spec.invocations:
        if inv.status != "ok":
            continue
        slots: set[int] = set()
        pointers: set[str] = set()
        for cl in inv.clauses:
            ptr_sets = cl.pointer_sets()
            for o in cl.outcomes:
                for lab, tok in o.post:
                    existing = set(ptr_sets.get(lab, ())) & set(_EXISTING)
                    if tok == "absent" and existing and lab.startswith("$"):
                        slots.add(int(lab[1:]))
                        pointers |= existing
        if slots:
            destructive.append({"flags": sorted(inv.key.flags), "options": sorted(n for n, _ in inv.key.options),
                                "argc": len(inv.key.positionals), "slots": sorted(slots),
                                "pointers": sorted(pointers)})
    destructive.sort(key=lambda d: json.dumps(d, sort_keys=True))
    return {"command": spec.command, "arity": [] if free else [list(r) for r in ranges],
            "destructive": destructive}


def _range_text(ranges) -> str:
    def one(lo, hi):
        if hi is None:
            return f"at least {lo}"
        return str(lo) if lo == hi else f"{lo} to {hi}"
    return " or ".join(one(lo, hi) for lo, hi in ranges)


def export_shellcheck(spec: CommandSpec) -> str:
    from . import __version__

    proj = project_shellcheck(spec)
    cmd, base = proj["command"], _camel(proj["command"])
    names: list[str] = []
    bodies: list[str] = []
    code = 9100
    if proj["arity"]:
        name = f"check{base}Arity"
        names.append(name)
        rng = ", ".join(f"({lo}, {'Nothing' if hi is None else f'Just {hi}'})" for lo, hi in proj["arity"])
        bodies.append(_template("arity").substitute(name=name, command=cmd, ranges=rng, code=code,
                                                    text=_range_text(proj["arity"])))
    for i, d in enumerate(proj["destructive"], 1):
        name = f"check{base}Destructive{i}"
        names.append(name)
        slots_text = " and ".join(f"argument {s}" for s in d["slots"])
        bodies.append(_template("destructive").substitute(
            name=name, command=cmd, flags=_hs_list(d["flags"]), options=_hs_list(d["options"]),
            argc=d["argc"], slots=", ".join(str(s) for s in d["slots"]), code=code + i,
            pointers=", ".join(d["pointers"]), slots_text=slots_text,
            pointers_text=", ".join(d["pointers"])))
    head = _template("header").substitute(version=__version__, command=cmd, module=base,
                                          names=", ".join(names))
    return head + "".join(bodies)


_CMD_RE = re.compile(r'^checks :: ', re.M)
_ARITY_RE = re.compile(r"^    allowed = \[(.*)\]$", re.M)
_RANGE_RE = re.compile(r"\((\d+), (?:Nothing|Just (\d+))\)")
_DESTR_RE = re.compile(
    r'flagsExactly t \[(.*?)\] && optionsExactly t \[(.*?)\]\s+&& argCount t == (\d+) '
    r'&& any isCatastrophicPath \(argsAt t \[(.*?)\]\)\) \$\n.*?Removed when: \[(.*?)\]"', re.S)
_EXACT_RE = re.compile(r'CommandCheck \(Exactly "(.*?)"\)')
_GEN_RE = re.compile(r"^-- Generated by specmine \S+ for `(.*)`\.$", re.M)


def _parse_hs_list(s: str) -> list[str]:
    return json.loads(f"[{s}]")


def import_shellcheck(text: str) -> dict[str, Any]:
    m = _GEN_RE.search(text)
    if not m or not _CMD_RE.search(text):
        raise ExportError("not a generated shellcheck module")
    cmd = m.group(1)
    if any(c != cmd for c in _EXACT_RE.findall(text)):
        raise ExportError("checks target more than one command")
    arity = []
    am = _ARITY_RE.search(text)
    if am:
        arity = [[int(lo), None if hi == "" else int(hi)] for lo, hi in _RANGE_RE.findall(am.group(1))]
    destructive = []
    for fl, op, argc, slots, ptrs in _DESTR_RE.findall(text):
        destructive.append({"flags": _parse_hs_list(fl), "options": _parse_hs_list(op), "argc": int(argc),
                            "slots": [int(s) for s in slots.split(",") if s.strip()],
                            "pointers": [p.strip() for p in ptrs.split(",") if p.strip()]})
    return {"command": cmd, "arity": arity, "destructive": destructive}


# -- shseer ----------------------------------------------------------------------

def _effects(post, extra) -> list[dict[str, str]]:
    out = [{"arg": lab, "state": tok} for lab, tok in post if tok != "unchanged"]
    for e in extra:
        change, _, path = e.partition(":")
        out.append({"path": path, "change": change})
    return out


def project_shseer(spec: CommandSpec) -> dict[str, Any]:
    conds = []
    for inv in spec.invocations:
        for cl in inv.clauses:
            conds.append({
                "key": _key_json(inv),
                "pre": [{"args": dict(p.pointers),
                         "kinds": p.kinds if isinstance(p.kinds, str) else [list(k) for k in p.kinds]}
                        for p in cl.pre],
                "post": [{"exit": o.exit, "codes": list(o.codes), "effects": _effects(o.post, o.effects)}
                         for o in cl.outcomes],
            })
    return {"format": "specmine.shseer/1", "command": spec.command, "conditions": conds,
            "undetermined": [_key_json(i) for i in spec.invocations if i.status != "ok"]}


def export_shseer(spec: CommandSpec) -> str:
    return json.dumps(project_shseer(spec), indent=2, sort_keys=True) + "\n"


def import_shseer(text: str) -> dict[str, Any]:
    doc = json.loads(text)
    if doc.get("format") != "specmine.shseer/1":
        raise ExportError("not a shseer document")
    return doc


# -- dispatch --------------------------------------------------------------------

EXPORTERS: dict[str, Callable[[CommandSpec], str]] = {
    "pash": export_pash, "posh": export_posh, "shellcheck": export_shellcheck, "shseer": export_shseer}
IMPORTERS: dict[str, Callable[[str], dict[str, Any]]] = {
    "pash": import_pash, "posh": import_posh, "shellcheck": import_shellcheck, "shseer": import_shseer}
PROJECTIONS: dict[str, Callable[[CommandSpec], dict[str, Any]]] = {
    "pash": project_pash, "posh": project_posh, "shellcheck": project_shellcheck, "shseer": project_shseer}


def export(spec: CommandSpec, target: str, out: str | None = None) -> str:
    """Render ``spec`` for ``target``; with ``out`` the text is also written atomically."""
    if target not in EXPORTERS:
        raise ExportError(f"unknown export target {target!r}; choose from {', '.join(TARGETS)}")
    text = EXPORTERS[target](spec)
    if out is not None:
        write_atomic(out, text)
    return text


__all__ = ["TARGETS", "SUFFIX", "EXPORTERS", "IMPORTERS", "PROJECTIONS", "ExportError", "export", "write_atomic",
           *(f"{p}_{t}" for p in ("export", "import", "project") for t in TARGETS)]
