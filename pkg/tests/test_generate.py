from __future__ import annotations

import itertools
import json
import warnings
from math import comb

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specmine.content import ContentStore
from specmine.generate import (POINTERS, CapReached, FsState, GenerationLimits, InvocationConfig, InvocationKey,
                               all_configs, environments_for, generate_configs, probe_configs, slot_path,
                               targeted_configs)
from specmine.invocation import parse_invocation
from specmine.syntax import (INTEGER, ONE, PATH, STRING, Arity, Flag, Option, Position, Positional, SyntaxSpec,
                             Usage, selection)

from conftest import rm_syntax
from strategies import syntax_specs


def naive_subsets(n: int, k: int) -> int:
    """Count bitmasks over n flags with at most k bits set."""
    return sum(1 for m in range(1 << n) if bin(m).count("1") <= k)


@st.composite
def flag_specs(draw):
    n = draw(st.integers(0, 10))
    flags = [Flag(f"-{c}") for c in "abcdefghij"[:n]]
    slots = draw(st.integers(1, 2))
    return SyntaxSpec.of("cmd", Usage.of(Position.of(*flags) if flags else Position.of(Positional(PATH, ONE)),
                                         *([Position.of(Positional(PATH, Arity.exactly(slots)))] if flags
                                           else ([Position.of(Positional(PATH, ONE))] if slots == 2 else [])))), n, slots


@settings(max_examples=60)
@given(flag_specs(), st.integers(0, 4))
def test_flag_combination_and_environment_counts(spec_n, k):
    spec, n, slots = spec_n
    limits = GenerationLimits(max_flags_options=k, max_configs=10**7)
    cfgs = list(generate_configs(spec, limits))
    combos = {c.key.flags for c in cfgs}
    assert len(combos) == naive_subsets(n, k) == sum(comb(n, i) for i in range(min(n, k) + 1))
    per_template: dict[str, list[FsState]] = {}
    for c in cfgs:
        per_template.setdefault(json.dumps(c.template.to_json(), sort_keys=True), []).append(c.env)
    for envs in per_template.values():
        n_slots = len(envs[0].slots)
        assert n_slots == slots
        assert len(envs) == 10 ** n_slots
        for i in range(n_slots):
            assert len({e.slots[i] for e in envs}) == 10


def test_environment_enumeration_is_kind_by_pointer():
    envs = list(environments_for(1))
    assert {(e.slots[0].path_kind, e.slots[0].pointer) for e in envs} == set(
        itertools.product(("absolute", "relative"), POINTERS))


def test_rm_configs_at_two_flags():
    cfgs = list(generate_configs(rm_syntax(), GenerationLimits(max_flags_options=2)))
    # 4 flag sets x (1 + 2 path args via one_plus instantiations 1,2) environments
    assert len(cfgs) == 4 * (10 + 100)


@settings(max_examples=150)
@given(syntax_specs())
def test_every_generated_argv_parses(spec):
    limits = GenerationLimits(max_flags_options=2, max_configs=300, variable_arity_instantiations=(1,),
                              string_samples=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CapReached)
        for cfg in generate_configs(spec, limits):
            own = SyntaxSpec(spec.command, (spec.usages[cfg.key.usage],))
            parse_invocation(list(cfg.argv), own)


def test_generation_is_deterministic():
    a = [c.config_id for c in all_configs(rm_syntax(), GenerationLimits(max_flags_options=1, seed=3))]
    b = [c.config_id for c in all_configs(rm_syntax(), GenerationLimits(max_flags_options=1, seed=3))]
    assert a == b
    assert len(set(a)) == len(a)


def test_cap_warns_and_truncates():
    with pytest.warns(CapReached):
        cfgs = list(generate_configs(rm_syntax(), GenerationLimits(max_configs=7)))
    assert len(cfgs) == 7


def test_typed_values_cover_samples():
    spec = SyntaxSpec.of("t", [[Option("-n", INTEGER), Option("-m", selection("x", "y")), Option("-s", STRING)],
                               [Positional(PATH)]])
    limits = GenerationLimits(max_flags_options=1, integer_samples=(-1, 0, 1), string_samples=2)
    argvs = {c.argv[1:3] for c in generate_configs(spec, limits) if len(c.argv) > 2}
    assert {("-n", "-1"), ("-n", "0"), ("-n", "1"), ("-m", "x"), ("-m", "y")} <= argvs
    assert sum(1 for a in argvs if a[0] == "-s") == 2


def test_slot_paths_follow_kind_and_pointer():
    from specmine.generate import SlotState

    assert slot_path(0, SlotState("absolute", "file")) == "@ROOT@/p0"
    assert slot_path(1, SlotState("relative", "parent_nonexistent")) == "p1/c0"


def test_config_json_round_trip():
    for cfg in all_configs(rm_syntax(), GenerationLimits(max_flags_options=1))[:50]:
        back = InvocationConfig.from_json(json.loads(json.dumps(cfg.to_json())))
        assert back == cfg
        assert back.config_id == cfg.config_id
        assert InvocationKey.from_json(cfg.key.to_json()) == cfg.key


def test_probes_for_single_input_and_multi_argument_keys():
    spec = SyntaxSpec.of("cat", [[Positional(PATH, Arity("zero_plus"))]])
    templates = {json.dumps(c.template.to_json(), sort_keys=True): c.template
                 for c in generate_configs(spec, GenerationLimits())}
    probes = probe_configs(list(templates.values()), GenerationLimits(partitions=(2, 3)))
    tags = [p.probe.split("@")[0] for p in probes]
    # stdin key, one-path key: whole, repeat, 2 + 3 parts each; two-path key: combined + 2 singles
    assert tags.count("partition:whole") == 2
    assert tags.count("repeat") == 2
    assert sum(t.startswith("partition:2:") for t in tags) == 4
    assert sum(t.startswith("partition:3:") for t in tags) == 6
    assert tags.count("split:combined") == 1
    assert sum(t.startswith("split:2:") for t in tags) == 2


def test_targeted_configs_sweep_only_the_given_key():
    cfgs = targeted_configs(rm_syntax(), ["rm", "-rf", "p"], GenerationLimits())
    assert {c.key.flags for c in cfgs} == {("-f", "-r")}
    assert sum(1 for c in cfgs if c.probe is None) == 10


def test_limits_validation_and_json():
    with pytest.raises(ValueError):
        GenerationLimits(partitions=(1,))
    lim = GenerationLimits(seed=9, partitions=(2, 4))
    assert GenerationLimits.from_json(lim.to_json()) == lim


def test_file_slots_materialize_from_content_store():
    env = list(environments_for(1))
    store = ContentStore(None, 0)
    kinds = {}
    for e in env:
        kinds[e.slots[0].pointer] = sorted((t.path, t.kind) for t in e.tree(store))
    assert kinds["file"] == [("p0", "f")]
    assert kinds["dir_empty"] == [("p0", "d")]
    assert kinds["dir_one_child"] == [("p0", "d"), ("p0/c0", "f")]
    assert kinds["nonexistent"] == kinds["parent_nonexistent"] == []
