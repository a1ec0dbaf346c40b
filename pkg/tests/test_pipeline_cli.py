from __future__ import annotations

import json
from pathlib import Path

import pytest

from specmine import cli
from specmine.derive import load_cmdspec, serialize_cmdspec
from specmine.generate import GenerationLimits
from specmine.inference import DocSource, ScriptedBackend
from specmine.pipeline import InferenceFailed, PipelineOptions, derive_from_archive, run_pipeline
from specmine.sandbox import runner
from specmine.sandbox.sandbox import TraceLimits
from specmine.syntax import ONE, PATH, Flag, Position, Positional, SyntaxSpec, Usage, serialize_spec

from conftest import FIXTURES, LLM_FIXTURES, RM_LIMITS, needs_tracer, rm_syntax

pytestmark = needs_tracer

RM_DOC = str(LLM_FIXTURES / "rm" / "doc.txt")
BACKEND = f"fixture:{LLM_FIXTURES}"


def wc_syntax() -> SyntaxSpec:
    return SyntaxSpec.of("wc", Usage.of(Position.of(Flag("-l")), Position.of(Positional(PATH, ONE))))


@pytest.fixture()
def rm_synspec(tmp_path) -> Path:
    p = tmp_path / "rm.synspec.json"
    p.write_text(serialize_spec(rm_syntax()))
    return p


def _cli(capsys, *argv: str) -> tuple[int, str, str]:
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _plain(ndjson: str) -> int:
    """Configurations excluding derivation probes."""
    return sum(1 for l in ndjson.splitlines() if "probe" not in json.loads(l))


# -- pipeline ------------------------------------------------------------------

def test_rerun_hits_every_cache(tmp_path):
    opts = PipelineOptions(str(tmp_path), limits=GenerationLimits(max_flags_options=1), jobs=4,
                           targets=("pash", "shseer"))
    first = run_pipeline(opts, synspec=wc_syntax())
    assert first.completed == ["generate", "trace", "derive", "export:pash", "export:shseer"]
    assert not any(s.skipped for s in first.stages)
    second = run_pipeline(opts, synspec=wc_syntax())
    assert all(s.skipped for s in second.stages)
    assert [s.digest for s in first.stages] == [s.digest for s in second.stages]
    run_json = json.loads((tmp_path / "run.json").read_text())
    assert [s["name"] for s in run_json["stages"]] == first.completed


def test_changed_limits_invalidate_downstream(tmp_path):
    base = PipelineOptions(str(tmp_path), limits=GenerationLimits(max_flags_options=0))
    run_pipeline(base, synspec=wc_syntax())
    again = run_pipeline(PipelineOptions(str(tmp_path), limits=GenerationLimits(max_flags_options=1)),
                         synspec=wc_syntax())
    assert not any(s.skipped for s in again.stages)
    forced = run_pipeline(PipelineOptions(str(tmp_path), limits=GenerationLimits(max_flags_options=1), force=True),
                          synspec=wc_syntax())
    assert not any(s.skipped for s in forced.stages)


def test_tampered_artifact_is_rebuilt(tmp_path):
    opts = PipelineOptions(str(tmp_path), limits=GenerationLimits(max_flags_options=0))
    run_pipeline(opts, synspec=wc_syntax())
    (tmp_path / "wc.cmdspec.json").write_text("{}")
    again = run_pipeline(opts, synspec=wc_syntax())
    assert {s.name: s.skipped for s in again.stages} == {"generate": True, "trace": True, "derive": False}
    assert load_cmdspec(str(tmp_path / "wc.cmdspec.json")).command == "wc"


def test_inference_failure_raises(tmp_path):
    opts = PipelineOptions(str(tmp_path), backend=ScriptedBackend(["nope"]))
    with pytest.raises(InferenceFailed, match="3 attempt"):
        run_pipeline(opts, doc=DocSource("rm", "rm FILE\n"))
    report = json.loads((tmp_path / "rm.inference.json").read_text())
    assert report["succeeded"] is False and len(report["attempts"]) == 3


def test_replay_matches_live(rm_run, tmp_path):
    arch = rm_run.artifacts["trace"]
    replayed = run_pipeline(PipelineOptions(str(tmp_path), limits=RM_LIMITS), synspec=rm_syntax(), from_traces=arch)
    assert serialize_cmdspec(replayed.cmdspec) == serialize_cmdspec(rm_run.cmdspec)
    assert serialize_cmdspec(derive_from_archive(arch, rm_syntax(), RM_LIMITS)) == serialize_cmdspec(rm_run.cmdspec)


# -- CLI -------------------------------------------------------------------------

def test_infer_subcommand(tmp_path, capsys):
    out = tmp_path / "rm.synspec.json"
    report = tmp_path / "report.json"
    code, _, err = _cli(capsys, "infer", "--command", "rm", "--doc", RM_DOC, "--backend", BACKEND,
                        "--out", out, "--report", report)
    assert code == 0 and "1 attempt" in err
    assert out.read_text() == serialize_spec(rm_syntax())
    assert json.loads(report.read_text())["succeeded"] is True


def test_infer_failure_exit_2(tmp_path, capsys):
    d = tmp_path / "llm" / "rm"
    d.mkdir(parents=True)
    (d / "doc.txt").write_text(Path(RM_DOC).read_text())
    (d / "completion.0.txt").write_text("no json here")
    code, _, err = _cli(capsys, "infer", "--command", "rm", "--doc", RM_DOC, "--backend", f"fixture:{tmp_path / 'llm'}")
    assert code == 2 and "3 attempt" in err


def test_unknown_fixture_is_exit_2(tmp_path, capsys):
    doc = tmp_path / "doc.txt"
    doc.write_text("something else entirely\n")
    code, _, err = _cli(capsys, "infer", "--command", "rm", "--doc", doc, "--backend", BACKEND)
    assert code == 2 and "no recorded fixture" in err


def test_generate_subcommand(rm_synspec, tmp_path, capsys):
    out = tmp_path / "configs.ndjson"
    code, _, err = _cli(capsys, "generate", "--synspec", rm_synspec, "--max-flags", 2, "--seed", 7, "--out", out)
    assert code == 0
    lines = out.read_text().splitlines()
    assert f"{len(lines)} configurations" in err
    assert sum(1 for l in lines if "probe" not in json.loads(l)) == 4 * (10 + 100)
    code, stdout, _ = _cli(capsys, "generate", "--synspec", rm_synspec, "--targeted", "rm -rf p")
    keys = {json.dumps(json.loads(l)["template"]["key"], sort_keys=True) for l in stdout.splitlines()}
    assert len(keys) == 1 and '"flags": ["-f", "-r"]' in keys.pop()


def test_trace_derive_export_chain(rm_synspec, tmp_path, capsys):
    cfgs = tmp_path / "configs.ndjson"
    _cli(capsys, "generate", "--synspec", rm_synspec, "--max-flags", 0, "--out", cfgs)
    arch = tmp_path / "traces.ndjson"
    code, _, err = _cli(capsys, "trace", "--configs", cfgs, "--out", arch, "--jobs", 4)
    assert code == 0 and "120 traces (0 errored)" in err
    spec = tmp_path / "rm.cmdspec.json"
    code, _, _ = _cli(capsys, "derive", "--from-traces", arch, "--synspec", rm_synspec, "--out", spec,
                      "--max-flags", 0)
    assert code == 0
    cs = load_cmdspec(str(spec))
    assert [i.key.flags for i in cs.invocations] == [(), ()]
    code, stdout, _ = _cli(capsys, "export", "--cmdspec", spec, "--export", "pash")
    assert code == 0 and json.loads(stdout)
    outdir = tmp_path / "exports"
    outdir.mkdir()
    code, _, _ = _cli(capsys, "export", "--cmdspec", spec, "--export", "posh", "--export", "shellcheck",
                      "--out", outdir)
    assert code == 0
    assert sorted(p.name for p in outdir.iterdir()) == ["rm.posh.yaml", "rm.shellcheck.hs"]


def test_run_subcommand_caches(tmp_path, capsys):
    work = tmp_path / "w"
    args = ["run", "--command", "rm", "--doc", RM_DOC, "--backend", BACKEND, "--max-flags", 1, "--jobs", 8,
            "--workdir", work, "--export", "pash", "--out", tmp_path / "copy.json"]
    code, _, err = _cli(capsys, *args)
    assert code == 0 and "cached" not in err
    code, _, err = _cli(capsys, *args)
    assert code == 0
    assert [l.split()[1] for l in err.splitlines()] == ["cached"] * 5
    assert (tmp_path / "copy.json").read_text() == (work / "rm.cmdspec.json").read_text()


def test_run_from_traces(rm_run, rm_synspec, tmp_path, capsys):
    code, _, _ = _cli(capsys, "run", "--synspec", rm_synspec, "--from-traces", rm_run.artifacts["trace"],
                      "--seed", 7, "--max-flags", 2, "--workdir", tmp_path, "--out", tmp_path / "o.json")
    assert code == 0
    assert (tmp_path / "o.json").read_text() == serialize_cmdspec(rm_run.cmdspec)


def test_targeted_subcommand(rm_synspec, tmp_path, capsys):
    code, stdout, _ = _cli(capsys, "targeted", "rm -rf p", "--synspec", rm_synspec, "--workdir", tmp_path)
    assert code == 0
    doc = json.loads(stdout)
    assert [i["key"]["flags"] for i in doc["invocations"]] == [["-f", "-r"]]
    assert doc["invocations"][0]["parallelizability"] == "side_effectful"


def test_targeted_served_from_cache(rm_run, rm_synspec, capsys):
    code, stdout, _ = _cli(capsys, "targeted", "rm --force -R a", "--synspec", rm_synspec,
                           "--workdir", rm_run.out_dir)
    assert code == 0
    inv = json.loads(stdout)["invocations"]
    assert len(inv) == 1 and inv[0] == json.loads(serialize_cmdspec(rm_run.cmdspec))["invocations"][1]


def test_invalid_invocation_exit_1(rm_synspec, tmp_path, capsys):
    code, _, err = _cli(capsys, "targeted", "rm -z p", "--synspec", rm_synspec, "--workdir", tmp_path)
    assert code == 1 and "[no_matching_usage]" in err


def test_coverage_subcommand(rm_run, tmp_path, capsys):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("rm -rf build\nrm -fr a b\nrm -x\n# comment\nrm -r\n")
    spec = rm_run.artifacts["derive"]
    code, stdout, _ = _cli(capsys, "coverage", "--cmdspec", spec, "--corpus", corpus, "--json")
    rep = json.loads(stdout)
    assert code == 0 and rep["total"] == 4 and rep["matched"] == 2 and rep["unparsed"] == 2
    code, stdout, _ = _cli(capsys, "coverage", "--cmdspec", spec, "--corpus", corpus, "--rules", "bogus")
    assert code == 1


def test_all_timeouts_exit_4(tmp_path, capsys):
    syn = tmp_path / "yes.synspec.json"
    syn.write_text(serialize_spec(SyntaxSpec.of("yes", Usage.of(Position.of(Flag("-x"))))))
    cfg = tmp_path / "c.toml"
    cfg.write_text("[specmine]\ntimeout = 0.2\njobs = 4\n")
    code, _, err = _cli(capsys, "run", "--synspec", syn, "--workdir", tmp_path / "w", "--config", cfg)
    assert code == 4 and "undetermined" in err


def test_overlay_unavailable_exit_3(rm_synspec, tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(runner, "overlay_support", lambda: "user namespaces disabled")
    code, _, err = _cli(capsys, "run", "--synspec", rm_synspec, "--workdir", tmp_path, "--mode", "overlay",
                        "--max-flags", 0)
    assert code == 3 and "--mode copy" in err


@pytest.mark.parametrize("argv", [["frobnicate"], ["export", "--cmdspec", "x.json", "--export", "nope"],
                                  ["generate"], ["derive", "--from-traces", "missing.ndjson", "--synspec", "m.json"]])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as ei:
        code = cli.main(argv)
        raise SystemExit(code)
    assert ei.value.code == 1


def test_config_file_values(tmp_path, rm_synspec, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[specmine]\nmax_flags = 1\nseed = 3\n")
    code, stdout, _ = _cli(capsys, "generate", "--synspec", rm_synspec, "--config", cfg)
    assert code == 0 and _plain(stdout) == 3 * 110
    code, stdout, _ = _cli(capsys, "generate", "--synspec", rm_synspec, "--config", cfg, "--max-flags", 0)
    assert _plain(stdout) == 110
    bad = tmp_path / "bad.toml"
    bad.write_text("colour = 1\n")
    code, _, err = _cli(capsys, "generate", "--synspec", rm_synspec, "--config", bad)
    assert code == 1 and "colour" in err


def test_json_config_and_limits(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"timeout": 2.5, "partitions": [2]}))
    cfg = cli.load_config(str(p))
    ns = cli.build_parser().parse_args(["generate", "--synspec", "x"])
    assert cli.trace_limits(ns, cfg) == TraceLimits(timeout=2.5)
    assert cli.generation_limits(ns, cfg).partitions == (2,)


def test_corpus_fixture_layout():
    for d in LLM_FIXTURES.iterdir():
        assert (d / "doc.txt").is_file() and (d / "completion.0.txt").is_file()
    assert (FIXTURES / "corpus" / "grab.txt").is_file()


def test_syscall_set_flag_limits_records(rm_synspec, tmp_path, capsys):
    cfgs = tmp_path / "configs.ndjson"
    _cli(capsys, "generate", "--synspec", rm_synspec, "--max-flags", 0, "--out", cfgs)
    only = tmp_path / "set.txt"
    only.write_text("# removals\nunlinkat\nunlink\n")
    arch = tmp_path / "traces.ndjson"
    code, _, _ = _cli(capsys, "trace", "--configs", cfgs, "--out", arch, "--syscall-set", only)
    assert code == 0
    names = {s["name"] for l in arch.read_text().splitlines() for s in json.loads(l)["trace"]["syscalls"]}
    assert names and names <= {"unlink", "unlinkat"}
    bad = tmp_path / "bad.txt"
    bad.write_text("frobnicate\n")
    code, _, err = _cli(capsys, "trace", "--configs", cfgs, "--out", arch, "--syscall-set", bad)
    assert code == 1 and "frobnicate" in err


def test_doc_on_stdin_spec_on_stdout(tmp_path, capsys, monkeypatch):
    import io

    monkeypatch.setattr("sys.stdin", io.StringIO(Path(RM_DOC).read_text()))
    code, stdout, _ = _cli(capsys, "run", "--command", "rm", "--backend", BACKEND, "--max-flags", 0, "--jobs", 8,
                           "--workdir", tmp_path)
    assert code == 0
    assert stdout == (tmp_path / "rm.cmdspec.json").read_text()
    assert json.loads(stdout)["command"] == "rm"


def test_missing_binary_is_rejected_before_tracing(tmp_path, capsys):
    syn = tmp_path / "s.synspec.json"
    syn.write_text(serialize_spec(SyntaxSpec.of("no-such-tool-xyz", Usage.of(Position.of(Positional(PATH, ONE))))))
    code, _, err = _cli(capsys, "run", "--synspec", syn, "--workdir", tmp_path / "w")
    assert code == 1 and "not executable on PATH" in err
    assert not (tmp_path / "w" / "traces.ndjson").exists()
