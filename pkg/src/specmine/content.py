"""Stream and file content oracles: text, arithmetic, JSON and image samples.

Samples are addressed by a short reference string so configurations stay
small and hashable::

    text:full:0            whole text fixture
    math:partial:0         leading lines of the generated arithmetic sample
    text:full:0#part=1/3   second of three contiguous line partitions
    empty                  zero bytes
"""

from __future__ import annotations

import itertools
import random
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

KINDS = ("text", "math", "json", "image")
VARIANTS = ("full", "partial")
ABSENT_WORD = "quixotrel"

_REF_RE = re.compile(r"^(text|math|json|image):(full|partial):(\d+)(?:#part=(\d+)/(\d+))?$")


@dataclass(frozen=True)
class ContentSample:
    kind: str
    payload: bytes
    variant: str
    ref: str


class ContentStore:
    """Loads fixtures from a directory (the bundled one by default)."""

    def __init__(self, root: str | Path | None = None, seed: int = 0) -> None:
        self.root = Path(root) if root is not None else None
        self.seed = seed

    def _read(self, name: str) -> bytes:
        if self.root is not None:
            return (self.root / name).read_bytes()
        return resources.files("specmine").joinpath(f"data/fixtures/content/{name}").read_bytes()

    def _images(self) -> list[bytes]:
        out = []
        for i in itertools.count():
            try:
                out.append(self._read(f"image{i}.png"))
            except (FileNotFoundError, OSError):
                break
        return out

    def full(self, kind: str) -> list[bytes]:
        if kind == "text":
            return [self._read("text.txt")]
        if kind == "json":
            return [self._read("sample.json")]
        if kind == "math":
            return [math_sample(self.seed)]
        if kind == "image":
            return self._images()
        raise ValueError(f"unknown content kind {kind!r}")

    def samples(self, kind: str) -> list[ContentSample]:
        out = []
        for i, payload in enumerate(self.full(kind)):
            out.append(ContentSample(kind, payload, "full", f"{kind}:full:{i}"))
            out.append(ContentSample(kind, partial(kind, payload), "partial", f"{kind}:partial:{i}"))
        return out

    def resolve(self, ref: str) -> bytes:
        if ref == "empty":
            return b""
        m = _REF_RE.match(ref)
        if not m:
            raise ValueError(f"bad content reference {ref!r}")
        kind, variant, idx = m.group(1), m.group(2), int(m.group(3))
        payload = self.full(kind)[idx]
        if variant == "partial":
            payload = partial(kind, payload)
        if m.group(4) is not None:
            payload = line_partitions(payload, int(m.group(5)))[int(m.group(4))]
        return payload

    def string_samples(self, count: int) -> list[str]:
        """A selective word from the text corpus, a word absent from it, then ""."""
        text = self._read("text.txt").decode()
        present = selective_words(text)
        pick = random.Random(self.seed).choice(present) if present else "the"
        pool = [pick, ABSENT_WORD, ""]
        extra = [w for w in present if w != pick]
        random.Random(self.seed + 1).shuffle(extra)
        pool += extra
        return pool[:count]


def selective_words(text: str) -> list[str]:
    """Words of length >= 4 that occur on some but fewer than half of the lines."""
    lines = text.splitlines()
    counts: dict[str, int] = {}
    for line in lines:
        for w in set(re.findall(r"[a-z]{4,}", line)):
            counts[w] = counts.get(w, 0) + 1
    return sorted(w for w, c in counts.items() if 0 < c < len(lines) / 2)


def split_lines(payload: bytes) -> list[bytes]:
    """Lines ending in ``\n`` (the last may lack it); unlike ``splitlines`` no other separators."""
    return re.findall(rb"[^\n]*\n|[^\n]+$", payload)


def partial(kind: str, payload: bytes) -> bytes:
    """Strict prefix: leading half of the lines, or leading half of the bytes for images."""
    if kind == "image":
        return payload[: max(1, len(payload) // 2)]
    lines = split_lines(payload)
    keep = max(1, len(lines) // 2)
    if keep >= len(lines):
        return payload[: max(0, len(payload) - 1)]
    return b"".join(lines[:keep])


def line_partitions(payload: bytes, n: int) -> list[bytes]:
    """Split into ``n`` contiguous, non-empty line groups whose concatenation is ``payload``."""
    if n < 1:
        raise ValueError("partition count must be >= 1")
    lines = split_lines(payload)
    if len(lines) < n:
        raise ValueError(f"cannot split {len(lines)} lines into {n} parts")
    q, r = divmod(len(lines), n)
    out, pos = [], 0
    for i in range(n):
        size = q + (1 if i < r else 0)
        out.append(b"".join(lines[pos:pos + size]))
        pos += size
    return out


@lru_cache(maxsize=8)
def math_expressions(depth: int = 2, literals: tuple[str, ...] = ("1", "2", "3")) -> tuple[str, ...]:
    """All expressions over + - * / and parentheses up to ``depth`` nested operators."""
    levels: list[set[str]] = [set(literals)]
    for _ in range(depth):
        prev = set().union(*levels)
        nxt = set()
        for a in prev:
            for b in prev:
                for op in "+-*/":
                    left = f"({a})" if any(o in a for o in "+-*/") else a
                    right = f"({b})" if any(o in b for o in "+-*/") else b
                    nxt.add(f"{left}{op}{right}")
        levels.append(nxt)
    return tuple(sorted(set().union(*levels) - set(literals)))


def math_sample(seed: int, lines: int = 8) -> bytes:
    exprs = list(math_expressions())
    chosen = random.Random(seed).sample(exprs, lines)
    return "".join(e + "\n" for e in chosen).encode()
