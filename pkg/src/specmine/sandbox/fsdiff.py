"""Classify filesystem divergence after a run into seven change categories.

Two strategies share one vocabulary: comparing before/after manifests of a
plain directory tree, and walking an overlay upperdir against its lowerdir.
"""

from __future__ import annotations

import hashlib
import os
import stat
from dataclasses import dataclass
from typing import Any

CHANGES = (
    "file_created",
    "file_modified",
    "file_removed",
    "file_replaced_with_directory",
    "directory_created",
    "directory_removed",
    "directory_replaced_with_file",
)

OPAQUE_XATTRS = ("trusted.overlay.opaque", "user.overlay.opaque")


@dataclass(frozen=True, order=True)
class FsDiffEntry:
    path: str
    change: str
    size: int | None = None

    def __post_init__(self) -> None:
        if self.change not in CHANGES:
            raise ValueError(f"unknown change category {self.change!r}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"path": self.path, "change": self.change}
        if self.size is not None:
            d["size"] = self.size
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FsDiffEntry:
        return cls(d["path"], d["change"], d.get("size"))


@dataclass(frozen=True)
class Node:
    kind: str  # "f" or "d"
    size: int
    digest: str


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _node(path: str, st: os.stat_result) -> Node:
    if stat.S_ISDIR(st.st_mode):
        return Node("d", 0, "")
    if stat.S_ISLNK(st.st_mode):
        target = os.readlink(path).encode("utf-8", "surrogateescape")
        return Node("f", len(target), "link:" + hashlib.sha256(target).hexdigest())
    if stat.S_ISREG(st.st_mode):
        return Node("f", st.st_size, _digest(path))
    return Node("f", 0, f"special:{stat.S_IFMT(st.st_mode)}")


def manifest(root: str) -> dict[str, Node]:
    """Map every entry below ``root`` (relative, '/'-separated) to its node."""
    out: dict[str, Node] = {}

    def walk(rel: str) -> None:
        full = os.path.join(root, rel) if rel else root
        try:
            names = sorted(os.listdir(full))
        except OSError:
            return
        for name in names:
            r = f"{rel}/{name}" if rel else name
            p = os.path.join(root, r)
            try:
                st = os.lstat(p)
            except OSError:
                continue
            out[r] = _node(p, st)
            if out[r].kind == "d":
                walk(r)

    walk("")
    return out


def _join(prefix: str, rel: str) -> str:
    return f"{prefix.rstrip('/')}/{rel}" if prefix else rel


def diff_manifests(before: dict[str, Node], after: dict[str, Node],
                   prefix: str = "/scratch") -> list[FsDiffEntry]:
    entries: list[FsDiffEntry] = []
    for rel in sorted(set(before) | set(after)):
        a, b = before.get(rel), after.get(rel)
        path = _join(prefix, rel)
        if a is None and b is not None:
            entries.append(FsDiffEntry(path, "file_created" if b.kind == "f" else "directory_created",
                                       b.size if b.kind == "f" else None))
        elif b is None and a is not None:
            entries.append(FsDiffEntry(path, "file_removed" if a.kind == "f" else "directory_removed"))
        elif a is not None and b is not None:
            if a.kind == "f" and b.kind == "d":
                entries.append(FsDiffEntry(path, "file_replaced_with_directory"))
            elif a.kind == "d" and b.kind == "f":
                entries.append(FsDiffEntry(path, "directory_replaced_with_file", b.size))
            elif a.kind == "f" and a.digest != b.digest:
                entries.append(FsDiffEntry(path, "file_modified", b.size))
    return sorted(set(entries))


def _is_whiteout(st: os.stat_result) -> bool:
    return stat.S_ISCHR(st.st_mode) and st.st_rdev == 0


def _is_opaque(path: str) -> bool:
    for name in OPAQUE_XATTRS:
        try:
            if os.getxattr(path, name, follow_symlinks=False) == b"y":
                return True
        except OSError:
            continue
    return False


def diff_overlay(upper: str, lower: str, prefix: str = "/scratch") -> list[FsDiffEntry]:
    """Walk only ``upper``; look up in ``lower`` just the entries upper shadows."""
    entries: list[FsDiffEntry] = []

    def below(rel: str) -> str | None:
        try:
            st = os.lstat(os.path.join(lower, rel))
        except OSError:
            return None
        return "d" if stat.S_ISDIR(st.st_mode) else "f"

    def same_content(rel: str, upper_path: str, up: Node) -> bool:
        lp = os.path.join(lower, rel)
        try:
            st = os.lstat(lp)
        except OSError:
            return False
        return _node(lp, st) == up

    def gone(rel: str, kind: str) -> None:
        entries.append(FsDiffEntry(_join(prefix, rel),
                                   "file_removed" if kind == "f" else "directory_removed"))
        if kind == "d":
            for r, n in manifest(os.path.join(lower, rel)).items():
                entries.append(FsDiffEntry(_join(prefix, f"{rel}/{r}"),
                                           "file_removed" if n.kind == "f" else "directory_removed"))

    def created(rel: str, full: str) -> None:
        for r, n in manifest(full).items():
            p = os.path.join(full, r)
            if n.kind == "f" and _is_whiteout(os.lstat(p)):
                continue
            if n.kind == "d":
                entries.append(FsDiffEntry(_join(prefix, f"{rel}/{r}"), "directory_created"))
            else:
                entries.append(FsDiffEntry(_join(prefix, f"{rel}/{r}"), "file_created", n.size))

    def visit(rel: str, full: str, opaque_parent: bool) -> None:
        for name in sorted(os.listdir(full)):
            r = f"{rel}/{name}" if rel else name
            p = os.path.join(full, name)
            st = os.lstat(p)
            was = below(r)
            path = _join(prefix, r)
            if _is_whiteout(st):
                if was is not None and not opaque_parent:
                    gone(r, was)
                continue
            n = _node(p, st)
            if n.kind == "d":
                if was is None:
                    entries.append(FsDiffEntry(path, "directory_created"))
                    created(r, p)
                elif was == "f":
                    entries.append(FsDiffEntry(path, "file_replaced_with_directory"))
                    created(r, p)
                elif opaque_parent or _is_opaque(p):
                    # recreated directory hides every lower child it does not provide
                    present = {c for c in os.listdir(p) if not _is_whiteout(os.lstat(os.path.join(p, c)))}
                    for c in sorted(os.listdir(os.path.join(lower, r))):
                        if c not in present:
                            gone(f"{r}/{c}", below(f"{r}/{c}") or "f")
                    visit(r, p, True)
                else:
                    visit(r, p, False)
            else:
                if was is None:
                    entries.append(FsDiffEntry(path, "file_created", n.size))
                elif was == "d":
                    entries.append(FsDiffEntry(path, "directory_replaced_with_file", n.size))
                    for r2, n2 in manifest(os.path.join(lower, r)).items():
                        entries.append(FsDiffEntry(
                            _join(prefix, f"{r}/{r2}"),
                            "file_removed" if n2.kind == "f" else "directory_removed"))
                elif not same_content(r, p, n):
                    entries.append(FsDiffEntry(path, "file_modified", n.size))

    if os.path.isdir(upper):
        visit("", upper, False)
    return sorted(set(entries))
