from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from specmine.content import (ABSENT_WORD, KINDS, ContentStore, line_partitions, math_expressions, partial,
                              selective_words)

STORE = ContentStore(None, 0)


@given(st.lists(st.binary(min_size=0, max_size=10).map(lambda b: b.replace(b"\n", b"") + b"\n"),
                min_size=1, max_size=30), st.integers(1, 6))
def test_line_partitions_concatenate_back(lines, n):
    payload = b"".join(lines)
    if len(lines) < n:
        with pytest.raises(ValueError):
            line_partitions(payload, n)
        return
    parts = line_partitions(payload, n)
    assert len(parts) == n
    assert all(parts)
    assert b"".join(parts) == payload
    sizes = [p.count(b"\n") for p in parts]
    assert max(sizes) - min(sizes) <= 1


@pytest.mark.parametrize("kind", KINDS)
def test_partial_is_a_strict_prefix(kind):
    for payload in STORE.full(kind):
        p = partial(kind, payload)
        assert payload.startswith(p) and len(p) < len(payload)


def test_references_resolve():
    text = STORE.full("text")[0]
    assert STORE.resolve("text:full:0") == text
    assert STORE.resolve("text:partial:0") == partial("text", text)
    assert STORE.resolve("text:full:0#part=1/3") == line_partitions(text, 3)[1]
    assert STORE.resolve("empty") == b""
    for bad in ("text", "text:whole:0", "audio:full:0"):
        with pytest.raises(ValueError):
            STORE.resolve(bad)


def test_string_samples_are_selective_absent_then_empty():
    s = STORE.string_samples(3)
    text = STORE.full("text")[0].decode()
    assert s[0] in selective_words(text)
    assert s[1] == ABSENT_WORD and ABSENT_WORD not in text
    assert s[2] == ""
    assert STORE.string_samples(3) == ContentStore(None, 0).string_samples(3)


def test_math_expressions_and_seeded_sample():
    exprs = math_expressions(1)
    assert "1+2" in exprs and "3/1" in exprs
    assert all(any(op in e for op in "+-*/") for e in exprs)
    assert ContentStore(None, 4).full("math") == ContentStore(None, 4).full("math")
    assert ContentStore(None, 4).full("math") != ContentStore(None, 5).full("math")


def test_images_are_pngs():
    imgs = STORE.full("image")
    assert imgs and all(i.startswith(b"\x89PNG") for i in imgs)


def test_custom_content_dir(tmp_path):
    (tmp_path / "text.txt").write_bytes(b"alpha beta\ngamma\ndelta\n")
    (tmp_path / "sample.json").write_bytes(b"{}\n")
    store = ContentStore(tmp_path, 0)
    assert store.resolve("text:full:0") == b"alpha beta\ngamma\ndelta\n"
    assert store.full("image") == []
