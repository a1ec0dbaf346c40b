from __future__ import annotations

import os
import platform
import shutil
from contextlib import contextmanager
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from specmine.generate import GenerationLimits
from specmine.inference import DocSource, FixtureBackend
from specmine.pipeline import PipelineOptions, run_pipeline
from specmine.sandbox.sandbox import overlay_support
from specmine.syntax import ONE_PLUS, PATH, Flag, Position, Positional, SyntaxSpec, Usage

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
LLM_FIXTURES = FIXTURES / "llm"
GOLDEN = HERE / "golden"

needs_tracer = pytest.mark.skipif(platform.machine() != "x86_64" or not hasattr(os, "fork"),
                                  reason="syscall tracer supports Linux x86_64 only")
needs_overlay = pytest.mark.skipif(overlay_support() is not None,
                                   reason=f"overlay sandbox unavailable: {overlay_support()}")


def have(*cmds: str):
    missing = [c for c in cmds if shutil.which(c) is None]
    return pytest.mark.skipif(bool(missing), reason=f"missing commands: {missing}")


def rm_syntax() -> SyntaxSpec:
    return SyntaxSpec.of("rm", Usage.of(Position.of(Flag("-f", "--force"), Flag("-r", "-R", "--recursive")),
                                        Position.of(Positional(PATH, ONE_PLUS))))


RM_LIMITS = GenerationLimits(max_flags_options=2, seed=7)


def rm_pipeline(out_dir: Path, jobs: int, targets=("pash", "posh", "shellcheck", "shseer")):
    doc = DocSource("rm", (LLM_FIXTURES / "rm" / "doc.txt").read_text(), "man")
    opts = PipelineOptions(str(out_dir), limits=RM_LIMITS, jobs=jobs, backend=FixtureBackend(LLM_FIXTURES),
                           targets=tuple(targets))
    return run_pipeline(opts, doc=doc)


@pytest.fixture(scope="session")
def rm_run(tmp_path_factory):
    """The full rm pipeline at jobs=8, shared by derivation, export and acceptance tests."""
    return rm_pipeline(tmp_path_factory.mktemp("rm-j8"), jobs=8)


@pytest.fixture(scope="session")
def rm_spec(rm_run):
    return rm_run.cmdspec


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title): ...`` records one PASS/FAIL/SKIP line for criterion n."""

    @contextmanager
    def run(n: int, title: str):
        status = "FAIL"
        try:
            yield
            status = "PASS"
        except pytest.skip.Exception:
            status = "SKIP"
            raise
        finally:
            ACCEPTANCE[n] = (status, title)
            print(f"CRITERION {n:>2} {status} {title}")

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n:>2} {status} {title}")
