"""Turn command documentation into a validated :class:`SyntaxSpec` with an LLM.

The model is asked for a ``.synspec.json`` document. Its answer is parsed and
validated; on failure the next prompt carries the previous answer and every
violation message. Model output is data only and is never executed.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx

from .syntax import TYPE_TAGS, SpecParseError, SyntaxSpec, parse_spec, validate_spec

DEFAULT_RETRY_LIMIT = 3
DEFAULT_DOC_BUDGET = 24_000
EXEMPLAR_COMMANDS = ("rm", "mv", "touch")
_PRIORITY = ("SYNOPSIS", "USAGE", "OPTIONS", "DESCRIPTION")


class BackendError(RuntimeError):
    """Transport or protocol failure talking to a model (not a bad answer)."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DocSource:
    command: str
    text: str
    origin: str = "file"          # man | help | file

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("documentation text is empty")
        if self.origin not in ("man", "help", "file"):
            raise ValueError(f"unknown documentation origin {self.origin!r}")


@dataclass(frozen=True)
class Exchange:
    """What the model said last time and why it was rejected."""
    attempt: int
    completion: str
    violations: tuple[str, ...]


class LlmBackend(Protocol):
    model_id: str

    def complete(self, prompt: str, context: Exchange | None = None) -> str: ...


@dataclass(frozen=True)
class Exemplar:
    command: str
    doc: str
    spec_json: str


def load_exemplars(names: Sequence[str] = EXEMPLAR_COMMANDS, directory: str | None = None) -> list[Exemplar]:
    if not names:
        raise ConfigError("exemplar table is empty; at least one few-shot example is required")
    out = []
    for n in names:
        if directory:
            text = Path(directory, f"{n}.json").read_text(encoding="utf-8")
        else:
            text = (resources.files("specmine") / "data" / "exemplars" / f"{n}.json").read_text(encoding="utf-8")
        d = json.loads(text)
        out.append(Exemplar(n, d["doc"], json.dumps(d["spec"], indent=1, sort_keys=True)))
    return out


# -- documentation budget ------------------------------------------------------

_HEAD_RE = re.compile(r"^(?:[A-Z][A-Z0-9 _-]{1,40}|[A-Z][a-z]+(?: [a-z]+)?:)\s*$")


def split_sections(text: str) -> list[tuple[str, str]]:
    """(heading, body) pairs for man-style or ``--help`` style headings."""
    sections: list[tuple[str, list[str]]] = [("", [])]
    for line in text.splitlines(keepends=True):
        if _HEAD_RE.match(line.rstrip("\n")):
            sections.append((line.strip().rstrip(":").upper(), [line]))
        else:
            sections[-1][1].append(line)
    return [(h, "".join(b)) for h, b in sections if "".join(b)]


def truncate_doc(text: str, budget: int = DEFAULT_DOC_BUDGET) -> str:
    """Fit ``text`` into ``budget`` characters, cutting at section boundaries and
    keeping synopsis/usage/options material ahead of everything else."""
    if len(text) <= budget:
        return text
    secs = list(enumerate(split_sections(text)))
    rank = {p: i for i, p in enumerate(_PRIORITY)}
    ordered = sorted(secs, key=lambda s: (min((rank[p] for p in _PRIORITY if p in s[1][0]), default=len(_PRIORITY)),
                                          s[0]))
    keep: set[int] = set()
    used = 0
    partial: tuple[int, str] | None = None
    for idx, (_, body) in ordered:
        if used + len(body) <= budget:
            keep.add(idx)
            used += len(body)
        elif partial is None and budget - used > 200:
            cut = body[:budget - used]
            cut = cut[:cut.rfind("\n") + 1] or cut
            partial = (idx, cut)
            used += len(cut)
    out = []
    for idx, (_, body) in secs:
        if idx in keep:
            out.append(body)
        elif partial and partial[0] == idx:
            out.append(partial[1])
    return "".join(out)


# -- prompting -----------------------------------------------------------------

ROLE = ("You are an expert in command-line syntax. Read the documentation of one command and "
        "describe which argument lists it accepts. Describe syntax only, not behavior.")

FORMAT_NOTES = """Answer with a single JSON object and nothing else:
{"command": NAME, "usages": [{"positions": [{"args": [ARG, ...]}, ...]}, ...]}
Each usage is one way to call the command; its positions are matched left to right, and the
arguments inside one position may appear in any order.
ARG fields:
  kind: "flag" | "option" | "positional"
  name: canonical spelling such as "-r" (empty for positionals)
  aliases: other spellings such as ["--recursive"]
  arity: "zero_one" | "zero_plus" | "one_plus" | an exact integer
  type: required for options and positionals; one of TYPES, or {"selection": [values]}
  flag_followed_by_equals: true when an option is written --name=value
  dash_as_stdin: true when a positional accepts "-" for standard input
TYPES: %s"""


@dataclass(frozen=True)
class Prompter:
    exemplars: tuple[Exemplar, ...]
    doc_budget: int = DEFAULT_DOC_BUDGET

    def __post_init__(self) -> None:
        if not self.exemplars:
            raise ConfigError("exemplar table is empty; at least one few-shot example is required")

    @classmethod
    def default(cls, doc_budget: int = DEFAULT_DOC_BUDGET) -> Prompter:
        return cls(tuple(load_exemplars()), doc_budget)

    def build(self, doc: DocSource, prior: Exchange | None = None) -> str:
        types = ", ".join(t for t in TYPE_TAGS if t != "selection")
        parts = [ROLE, "", FORMAT_NOTES % types, ""]
        for ex in self.exemplars:
            parts += [f"### Example: {ex.command}", "Documentation:", ex.doc.rstrip(), "Answer:", ex.spec_json, ""]
        parts += [f"### Command: {doc.command}", "Documentation:", "<<<DOC", truncate_doc(doc.text, self.doc_budget).rstrip(),
                  "DOC>>>"]
        if prior is not None:
            parts += ["", "Your previous answer was rejected.", "Previous answer:", prior.completion.rstrip(),
                      "Errors:", *(f"- {v}" for v in prior.violations), "Return a corrected JSON object."]
        parts += ["", "Answer:"]
        return "\n".join(parts) + "\n"


def build_prompt(doc: DocSource, prior: Exchange | None = None, prompter: Prompter | None = None) -> str:
    return (prompter or Prompter.default()).build(doc, prior)


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode()).hexdigest()


def embedded_doc(prompt: str) -> str | None:
    m = re.search(r"<<<DOC\n(.*?)\nDOC>>>", prompt, re.S)
    return m.group(1) if m else None


# -- backends --------------------------------------------------------------------

class FixtureBackend:
    """Replays recorded completions from ``<root>/<cmd>/completion.N.txt``.

    The fixture is chosen by matching the documentation embedded in the prompt
    against each ``doc.txt``; the completion index is the attempt number. The
    last completion repeats once the recorded ones run out.
    """

    model_id = "fixture"

    def __init__(self, root: str | os.PathLike, doc_budget: int = DEFAULT_DOC_BUDGET) -> None:
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigError(f"fixture directory {self.root} does not exist")
        self._by_doc: dict[str, Path] = {}
        for d in sorted(p for p in self.root.iterdir() if p.is_dir()):
            doc = d / "doc.txt"
            if doc.is_file():
                key = truncate_doc(doc.read_text(encoding="utf-8"), doc_budget).rstrip()
                self._by_doc.setdefault(key, d)

    def fixture_for(self, prompt: str) -> Path:
        doc = embedded_doc(prompt)
        if doc is None or doc not in self._by_doc:
            raise BackendError("no recorded fixture matches this documentation")
        return self._by_doc[doc]

    def complete(self, prompt: str, context: Exchange | None = None) -> str:
        d = self.fixture_for(prompt)
        n = 0 if context is None else context.attempt + 1
        files = {int(f.name.split(".")[1]): f for f in d.glob("completion.*.txt")}
        if not files:
            raise BackendError(f"fixture {d.name} has no completions")
        if n not in files and n < max(files):
            raise BackendError(f"fixture {d.name} has no completion {n}")
        chosen = files.get(n, files[max(files)])
        return chosen.read_text(encoding="utf-8")


class ScriptedBackend:
    """Returns (or raises) the given items in order; handy for tests."""

    model_id = "scripted"

    def __init__(self, items: Sequence[str | BaseException]) -> None:
        self.items = list(items)
        self.prompts: list[str] = []

    def complete(self, prompt: str, context: Exchange | None = None) -> str:
        self.prompts.append(prompt)
        item = self.items[min(len(self.prompts) - 1, len(self.items) - 1)]
        if isinstance(item, BaseException):
            raise item
        return item


class HttpBackend:
    """OpenAI-compatible chat-completions client."""

    def __init__(self, endpoint: str | None = None, model: str | None = None, api_key: str | None = None,
                 timeout: float = 120.0, client: httpx.Client | None = None) -> None:
        self.endpoint = (endpoint or os.environ.get("SPECMINE_LLM_ENDPOINT") or "").rstrip("/")
        self.model_id = model or os.environ.get("SPECMINE_LLM_MODEL") or ""
        self.api_key = api_key if api_key is not None else os.environ.get("SPECMINE_LLM_API_KEY")
        if not self.endpoint or not self.model_id:
            raise ConfigError("HTTP backend needs an endpoint and a model "
                              "(SPECMINE_LLM_ENDPOINT / SPECMINE_LLM_MODEL or config)")
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, prompt: str, context: Exchange | None = None) -> str:
        url = self.endpoint if self.endpoint.endswith("/chat/completions") else self.endpoint + "/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = {"model": self.model_id, "temperature": 0,
                "messages": [{"role": "system", "content": ROLE}, {"role": "user", "content": prompt}]}
        try:
            r = self._client.post(url, json=body, headers=headers)
        except httpx.HTTPError as exc:
            raise BackendError(f"request failed: {exc}") from exc
        if r.status_code in (401, 403):
            raise BackendError(f"authentication rejected ({r.status_code})")
        if r.status_code >= 400:
            raise BackendError(f"HTTP {r.status_code}: {r.text[:200]}")
        try:
            return r.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response shape: {exc}") from exc


# -- the loop --------------------------------------------------------------------

@dataclass
class Attempt:
    prompt_digest: str
    completion: str
    violations: list[str]
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {"prompt_digest": self.prompt_digest, "completion": self.completion,
                "violations": self.violations, "error": self.error}


@dataclass
class InferenceReport:
    command: str
    spec: SyntaxSpec | None = None
    attempts: list[Attempt] = field(default_factory=list)
    transport_error: str | None = None
    model_id: str = ""

    @property
    def succeeded(self) -> bool:
        return self.spec is not None

    def to_json(self) -> dict[str, Any]:
        return {"command": self.command, "succeeded": self.succeeded, "model": self.model_id,
                "transport_error": self.transport_error, "attempts": [a.to_json() for a in self.attempts]}


_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.S)


def extract_json(completion: str) -> str:
    """Strip a markdown fence or leading chatter around a JSON object."""
    m = _FENCE_RE.search(completion)
    if m:
        return m.group(1)
    s, e = completion.find("{"), completion.rfind("}")
    return completion[s:e + 1] if 0 <= s < e else completion


def check_completion(completion: str, command: str) -> tuple[SyntaxSpec | None, list[str]]:
    try:
        spec = parse_spec(extract_json(completion))
    except SpecParseError as exc:
        return None, [str(exc)]
    problems = [str(v) for v in validate_spec(spec)]
    if spec.command != command:
        problems.append(f"command is {spec.command!r} but the documentation describes {command!r}")
    return (None if problems else spec), problems


def infer_syntax_spec(doc: DocSource, backend: LlmBackend, retry_limit: int = DEFAULT_RETRY_LIMIT,
                      prompter: Prompter | None = None) -> InferenceReport:
    if retry_limit < 1:
        raise ValueError("retry_limit must be at least 1")
    prompter = prompter or Prompter.default()
    report = InferenceReport(doc.command, model_id=getattr(backend, "model_id", ""))
    prior: Exchange | None = None
    for n in range(retry_limit):
        prompt = prompter.build(doc, prior)
        try:
            completion = backend.complete(prompt, prior)
        except BackendError as exc:
            report.attempts.append(Attempt(prompt_digest(prompt), "", [], f"transport: {exc}"))
            report.transport_error = str(exc)
            return report
        except Exception as exc:  # noqa: BLE001 - a misbehaving backend is still one attempt
            report.attempts.append(Attempt(prompt_digest(prompt), "", [], f"{type(exc).__name__}: {exc}"))
            prior = Exchange(n, "", (f"backend raised {type(exc).__name__}: {exc}",))
            continue
        spec, problems = check_completion(completion, doc.command)
        report.attempts.append(Attempt(prompt_digest(prompt), completion, problems))
        if spec is not None:
            report.spec = spec
            return report
        prior = Exchange(n, completion, tuple(problems))
    return report
