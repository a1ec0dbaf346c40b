"""Acceptance suite: one test and one PASS/FAIL line per criterion."""

from __future__ import annotations

import json
from math import comb
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specmine.behavior import PURE, SIDE_EFFECTFUL, STATELESS, check_splittability, classify_parallelizability
from specmine.content import ContentStore
from specmine.derive import assemble_spec, serialize_cmdspec
from specmine.export import EXPORTERS, IMPORTERS, PROJECTIONS, SUFFIX, TARGETS
from specmine.generate import GenerationLimits, generate_configs
from specmine.inference import DocSource, FixtureBackend, infer_syntax_spec
from specmine.normalize import coverage_report, normalize_invocation
from specmine.sandbox.fsdiff import CHANGES
from specmine.sandbox.runner import read_archive
from specmine.sandbox.sandbox import ExecutionTrace, TreeEntry, execute, overlay_support
from specmine.syntax import (INTEGER, ONE, ONE_PLUS, PATH, STRING, Arity, Flag, Option, Position, Positional,
                             SyntaxSpec, Usage, parse_spec, serialize_spec, validate_spec)

from conftest import FIXTURES, GOLDEN, have, needs_tracer, rm_pipeline, rm_syntax
from fsmodel import predict, scenarios, tree
from strategies import syntax_specs

ALL_PTRS = {"file", "dir_empty", "dir_one_child", "nonexistent", "parent_nonexistent"}


def _clauses(spec, flags):
    inv = next(i for i in spec.invocations if i.key.flags == flags and i.key.positionals == ("path",))
    return [(c.pointer_sets()["$1"], [(o.exit, o.codes, dict(o.post), o.effects) for o in c.outcomes])
            for c in inv.clauses]


@needs_tracer
def test_criterion_01_rm_golden_clauses(rm_run, criterion):
    with criterion(1, "rm golden clauses"):
        spec = rm_run.cmdspec
        plain = _clauses(spec, ())
        assert sorted(plain, key=lambda c: len(c[0])) == [
            ({"file"}, [("zero", (0,), {"$1": "absent"}, ())]),
            ({"dir_empty", "dir_one_child", "nonexistent", "parent_nonexistent"},
             [("nonzero", (1,), {"$1": "unchanged"}, ())]),
        ]
        forced = _clauses(spec, ("-f", "-r"))
        assert forced == [(ALL_PTRS, [("zero", (0,), {"$1": "absent"}, ())])]
        # the raw observations behind the clauses: removal vs. an empty diff
        configs, traces = read_archive(rm_run.artifacts["trace"])
        for c, t in zip(configs, traces):
            if c.probe is None and c.key.flags == () and len(c.env.slots) == 1:
                ptr = c.env.slots[0].pointer
                if ptr == "file":
                    assert [e.change for e in t.fs_diff] == ["file_removed"] and t.exit_status == 0
                else:
                    assert t.fs_diff == [] and t.exit_status != 0
        assert {i.parallelizability for i in spec.invocations} == {SIDE_EFFECTFUL}
        assert all(c.parallelizability == SIDE_EFFECTFUL for i in spec.invocations for c in i.clauses)


@needs_tracer
@have("cat", "grep", "wc", "sha256sum", "rm", "pwd")
def test_criterion_02_parallelizability_classes(criterion):
    with criterion(2, "parallelizability classes"):
        store = ContentStore()
        text = store.full("text")[0]
        word = store.string_samples(1)[0]
        assert word.encode() in text
        table = [
            (["cat"], None, STATELESS),
            (["grep", word], None, STATELESS),
            (["wc"], None, PURE),
            (["sha256sum"], None, PURE),
            (["rm", "p0"], 1, SIDE_EFFECTFUL),
            (["pwd"], None, SIDE_EFFECTFUL),
        ]
        got = {argv[0]: classify_parallelizability(argv, text, (2, 3), input_arg=ia).cls for argv, ia, _ in table}
        assert got == {argv[0]: cls for argv, _, cls in table}


@needs_tracer
@have("cat", "sort")
def test_criterion_03_splittability(criterion):
    with criterion(3, "splittability"):
        a, b = b"pear\nfig\nkiwi\n", b"apple\nplum\ndate\n"
        assert check_splittability(["cat"], [a, b]) is True
        assert check_splittability(["sort"], [a, b]) is False


@needs_tracer
def test_criterion_04_fsdiff_totality(criterion):
    modes = ["copy"] + (["overlay"] if overlay_support() is None else [])
    with criterion(4, f"fsdiff totality, 1000 pairs per mode ({', '.join(modes)})"):
        for mode in modes:
            @settings(max_examples=1000, database=None)
            @given(scenarios())
            def check(scenario):
                a, script, b = scenario
                tr = execute(tree(a), ["sh", "-c", script], mode=mode)
                assert tr.error is None and tr.exit_status == 0, (script, tr.stderr)
                assert {e.change for e in tr.fs_diff} <= set(CHANGES)
                assert sorted(tr.fs_diff) == predict(a, b), script

            check()
        assert len(CHANGES) == 7


def _tree_digest(root: Path) -> str:
    import hashlib
    import os

    h = hashlib.sha256()
    for dirpath, dirs, files in os.walk(root):
        dirs.sort()
        for name in sorted(dirs + files):
            p = os.path.join(dirpath, name)
            h.update(f"{os.path.relpath(p, root)}\0{os.lstat(p).st_mode}\0".encode())
            if os.path.isfile(p):
                h.update(Path(p).read_bytes())
    return h.hexdigest()


@needs_tracer
def test_criterion_05_sandbox_non_leakage(tmp_path, criterion):
    modes = ["copy"] + (["overlay"] if overlay_support() is None else [])
    with criterion(5, f"sandbox non-leakage ({', '.join(modes)})"):
        sentinel = tmp_path / "sentinel"
        (sentinel / "sub").mkdir(parents=True)
        (sentinel / "keep.txt").write_text("precious\n")
        (sentinel / "sub" / "deep.bin").write_bytes(bytes(range(256)))
        before = _tree_digest(sentinel)
        layout = [TreeEntry("a", "d"), TreeEntry("a/x", "f", b"1\n"), TreeEntry("b", "f", b"2\n")]
        scripts = ['rm -rf "$0"/*', 'touch "$0"/made; mkdir "$0"/newdir']
        for mode in modes:
            # overlay mode also shields direct writes to host paths
            targets = ["@ROOT@"] + ([str(sentinel)] if mode == "overlay" else [])
            for target in targets:
                for script in scripts:
                    tr = execute(layout, ["sh", "-c", script, target], mode=mode)
                    assert tr.error is None and tr.exit_status == 0, tr.stderr
                    assert tr.fs_diff, (mode, script, target)
                    assert _tree_digest(sentinel) == before


@st.composite
def _flag_specs(draw):
    n = draw(st.integers(0, 10))
    slots = draw(st.integers(1, 2))
    flags = [Flag(f"-{c}") for c in "abcdefghij"[:n]]
    positions = [Position.of(*flags)] if flags else []
    positions.append(Position.of(Positional(PATH, Arity.exactly(slots))))
    return SyntaxSpec.of("cmd", Usage.of(*positions)), n, slots


def test_criterion_06_generator_counts(criterion):
    with criterion(6, "generator counting"):
        @settings(max_examples=60, database=None)
        @given(_flag_specs(), st.integers(0, 4))
        def check(spec_n, k):
            spec, n, slots = spec_n
            cfgs = list(generate_configs(spec, GenerationLimits(max_flags_options=k, max_configs=10**7)))
            naive = sum(1 for m in range(1 << n) if bin(m).count("1") <= k)
            assert len({c.key.flags for c in cfgs}) == naive == sum(comb(n, i) for i in range(min(n, k) + 1))
            by_flags: dict[tuple, list] = {}
            for c in cfgs:
                by_flags.setdefault(c.key.flags, []).append(c.env)
            for envs in by_flags.values():
                assert len(envs) == 10 ** slots
                for i in range(slots):
                    assert len({e.slots[i] for e in envs}) == 10

        check()


GOOD = json.dumps({"command": "rm", "usages": [{"positions": [
    {"args": [{"kind": "flag", "name": "-f"}]},
    {"args": [{"kind": "positional", "type": "path", "arity": "one_plus"}]}]}]})


def test_criterion_07_inference_bounds(tmp_path, criterion):
    with criterion(7, "inference attempt bounds"):
        doc = DocSource("rm", "SYNOPSIS\n  rm [-f] FILE...\n")
        for failures, attempts, ok in [(0, 1, True), (2, 3, True), (3, 3, False), (4, 3, False)]:
            root = tmp_path / f"f{failures}"
            d = root / "rm"
            d.mkdir(parents=True)
            (d / "doc.txt").write_text(doc.text)
            for i in range(failures):
                (d / f"completion.{i}.txt").write_text("not json" if i % 2 else '{"command": "rm", "usages": []}')
            (d / f"completion.{failures}.txt").write_text(GOOD)
            rep = infer_syntax_spec(doc, FixtureBackend(root))
            assert (len(rep.attempts), rep.succeeded) == (attempts, ok), failures


def test_criterion_08_syntax_round_trip(criterion):
    with criterion(8, "syntax round-trip, 500 specs"):
        @settings(max_examples=500, database=None)
        @given(syntax_specs())
        def check(spec):
            assert validate_spec(spec) == []
            text = serialize_spec(spec)
            assert parse_spec(text) == spec
            assert serialize_spec(parse_spec(text)) == text

        check()


GRAB = SyntaxSpec.of("grab", Usage.of(
    Position.of(Flag("-q"), Flag("-v"), Option("-n", INTEGER), Option("-e", STRING)),
    Position.of(Positional(PATH, ONE_PLUS))))


def test_criterion_09_normalization(criterion):
    with criterion(9, "normalization congruence and corpus counts"):
        rules = ["flag_order", "path"]
        assert normalize_invocation(["rm", "-rf", "x"], rm_syntax(), rules) == \
            normalize_invocation(["rm", "-fr", "y"], rm_syntax(), rules)
        configs = list(generate_configs(GRAB, GenerationLimits(max_flags_options=2)))
        spec = assemble_spec(configs, [ExecutionTrace(c.config_id, 0) for c in configs], GRAB)
        rep = coverage_report((FIXTURES / "corpus" / "grab.txt").read_text().splitlines(), spec)
        assert (rep.total, rep.exact, rep.unmatched, rep.unparsed) == (100, 20, 6, 6)
        assert rep.by_rule == {"flag_order": 15, "path": 25, "integer": 10, "string": 10, "arity": 8}


@needs_tracer
def test_criterion_10_parallel_equivalence(rm_run, tmp_path, criterion):
    with criterion(10, "jobs=1 vs jobs=8 byte identity"):
        serial = rm_pipeline(tmp_path / "j1", jobs=1)
        names = ["rm.cmdspec.json", *(f"rm{SUFFIX[t]}" for t in TARGETS)]
        for name in names:
            assert (Path(serial.out_dir) / name).read_bytes() == (Path(rm_run.out_dir) / name).read_bytes(), name


def _synthetic_cat():
    syntax = SyntaxSpec.of("cat", Usage.of(Position.of(Positional(PATH, ONE))))
    configs = list(generate_configs(syntax, GenerationLimits()))
    return assemble_spec(configs, [ExecutionTrace(c.config_id, 0) for c in configs], syntax)


@needs_tracer
def test_criterion_11_exporters(rm_run, criterion):
    with criterion(11, "exporter round-trips and rm goldens"):
        for spec in (rm_run.cmdspec, _synthetic_cat()):
            for t in TARGETS:
                assert IMPORTERS[t](EXPORTERS[t](spec)) == PROJECTIONS[t](spec), t
        for name in ["rm.cmdspec.json", *(f"rm{SUFFIX[t]}" for t in TARGETS)]:
            assert (Path(rm_run.out_dir) / name).read_bytes() == (GOLDEN / name).read_bytes(), name
        assert serialize_cmdspec(rm_run.cmdspec) == (GOLDEN / "rm.cmdspec.json").read_text()
