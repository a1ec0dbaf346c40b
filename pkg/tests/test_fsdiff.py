from __future__ import annotations

import os

import pytest
from hypothesis import given, settings

from specmine.sandbox.fsdiff import CHANGES, FsDiffEntry, diff_manifests, diff_overlay, manifest
from specmine.sandbox.sandbox import execute, materialize

from conftest import needs_overlay, needs_tracer
from fsmodel import predict, scenarios, tree


def check(mode, scenario):
    a, script, b = scenario
    tr = execute(tree(a), ["sh", "-c", script], mode=mode)
    assert tr.error is None and tr.exit_status == 0, (script, tr.error, tr.stderr)
    assert {e.change for e in tr.fs_diff} <= set(CHANGES)
    assert sorted(tr.fs_diff) == predict(a, b), script


@needs_tracer
@settings(max_examples=1000)
@given(scenarios())
def test_copy_mode_diff_matches_model(scenario):
    check("copy", scenario)


@needs_tracer
@needs_overlay
@settings(max_examples=1000)
@given(scenarios())
def test_overlay_mode_diff_matches_model(scenario):
    check("overlay", scenario)


def test_manifest_diff_categories(tmp_path):
    before_dir = tmp_path / "x"
    materialize(tree({"f": b"1", "d": None, "d/k": b"", "g": b"2", "h": None}), str(before_dir))
    before = manifest(str(before_dir))
    (before_dir / "f").write_bytes(b"changed")
    os.remove(before_dir / "d" / "k")
    os.rmdir(before_dir / "d")
    (before_dir / "d").write_bytes(b"now a file")
    os.remove(before_dir / "g")
    os.mkdir(before_dir / "g")
    os.rmdir(before_dir / "h")
    (before_dir / "new").write_bytes(b"abc")
    got = diff_manifests(before, manifest(str(before_dir)), "/s")
    assert got == sorted([
        FsDiffEntry("/s/d", "directory_replaced_with_file", 10),
        FsDiffEntry("/s/d/k", "file_removed"),
        FsDiffEntry("/s/f", "file_modified", 7),
        FsDiffEntry("/s/g", "file_replaced_with_directory"),
        FsDiffEntry("/s/h", "directory_removed"),
        FsDiffEntry("/s/new", "file_created", 3),
    ])


def test_unknown_category_rejected():
    with pytest.raises(ValueError):
        FsDiffEntry("/x", "file_renamed")


def test_entry_dict_round_trip():
    e = FsDiffEntry("/scratch/a", "file_created", 4)
    assert FsDiffEntry.from_dict(e.to_dict()) == e
    assert "size" not in FsDiffEntry("/scratch/a", "file_removed").to_dict()


@pytest.mark.skipif(os.geteuid() != 0, reason="creating whiteout devices needs CAP_MKNOD")
def test_overlay_walk_reads_whiteouts_and_opaque_dirs(tmp_path):
    lower, upper = tmp_path / "lower", tmp_path / "upper"
    materialize(tree({"gone": b"1", "dir": None, "dir/a": b"", "dir/b": b"", "keep": b"k", "od": None,
                      "od/x": b""}), str(lower))
    upper.mkdir()
    try:
        os.mknod(upper / "gone", 0o600 | 0o020000, os.makedev(0, 0))
        os.mkdir(upper / "dir")
        os.mknod(upper / "dir" / "a", 0o600 | 0o020000, os.makedev(0, 0))
    except PermissionError:
        pytest.skip("mknod not permitted here")
    (upper / "keep").write_bytes(b"k")          # copied up, unchanged content
    os.mkdir(upper / "od")
    try:
        os.setxattr(upper / "od", "user.overlay.opaque", b"y")
    except OSError:
        pytest.skip("user xattrs unsupported")
    (upper / "od" / "y").write_bytes(b"new")
    got = diff_overlay(str(upper), str(lower), "/s")
    assert got == sorted([
        FsDiffEntry("/s/dir/a", "file_removed"),
        FsDiffEntry("/s/gone", "file_removed"),
        FsDiffEntry("/s/od/x", "file_removed"),
        FsDiffEntry("/s/od/y", "file_created", 3),
    ])
