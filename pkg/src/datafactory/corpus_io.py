"""JSON-Lines corpus records with streaming read/write and sampling.

A manifest is a UTF-8 ``*.jsonl`` file, one object per line. The only
required key is ``text``; ``id``, ``url``, ``lang``, ``source``, ``task``
and ``meta`` are optional. A missing ``id`` is synthesized as
``<file>:<line>``. Unknown keys are preserved in ``meta`` rather than
rejected. Files ending in ``.gz`` are read through gzip transparently.
"""

from __future__ import annotations

import gzip
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator


@dataclass
class Document:
    """One corpus record."""

    id: str
    text: str
    url: str | None = None
    language: str | None = None
    source: str = ""
    task: str | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def to_obj(self) -> dict:
        obj: dict = {"id": self.id, "text": self.text}
        if self.url is not None:
            obj["url"] = self.url
        if self.language is not None:
            obj["lang"] = self.language
        if self.source:
            obj["source"] = self.source
        if self.task is not None:
            obj["task"] = self.task
        if self.meta:
            obj["meta"] = self.meta
        return obj

    @classmethod
    def from_obj(cls, obj: dict, default_id: str) -> "Document":
        meta = obj.get("meta") or {}
        if not isinstance(meta, dict):
            raise ValueError("'meta' must be an object")
        meta = {str(k): str(v) for k, v in meta.items()}
        known = {"id", "text", "url", "lang", "source", "task", "meta"}
        for key, value in obj.items():
            if key not in known:
                meta[str(key)] = value if isinstance(value, str) else json.dumps(value)
        return cls(
            id=str(obj["id"]) if "id" in obj else default_id,
            text=obj["text"],
            url=obj.get("url"),
            language=obj.get("lang"),
            source=obj.get("source", ""),
            task=obj.get("task"),
            meta=meta,
        )


@dataclass(frozen=True)
class Manifest:
    path: Path
    record_count: int
    byte_count: int


class MalformedRecordError(ValueError):
    """A line in a manifest could not be parsed as a Document."""

    def __init__(self, path: Path | str, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = Path(path)
        self.line_no = line_no
        self.reason = reason


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def read_stream(
    manifest: Manifest | Path | str,
    on_malformed: Callable[[MalformedRecordError], None] | None = None,
) -> Iterator[Document]:
    """Yield Documents from a manifest in file order.

    Malformed lines are never silently dropped: each one is passed to
    ``on_malformed`` when given (and the stream continues), otherwise a
    MalformedRecordError is raised.
    """
    path = Path(manifest.path if isinstance(manifest, Manifest) else manifest)
    with _open_text(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not a JSON object")
                if "text" not in obj:
                    raise ValueError("missing required key 'text'")
                if not isinstance(obj["text"], str):
                    raise ValueError("'text' must be a string")
                doc = Document.from_obj(obj, default_id=f"{path.name}:{line_no}")
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                err = MalformedRecordError(path, line_no, str(exc))
                if on_malformed is None:
                    raise err from exc
                on_malformed(err)
                continue
            yield doc


def write_stream(docs: Iterable[Document], path: Path | str) -> Manifest:
    """Write Documents to a JSONL manifest; read_stream(write_stream(X)) == X."""
    path = Path(path)
    count = 0
    nbytes = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            line = json.dumps(doc.to_obj(), ensure_ascii=False, sort_keys=True)
            fh.write(line + "\n")
            count += 1
            nbytes += len(line.encode("utf-8")) + 1
    return Manifest(path=path, record_count=count, byte_count=nbytes)


def sample_uniform(docs: Iterable[Document], rate: float, seed: int) -> Iterator[Document]:
    """Keep each record independently with probability ``rate`` (Bernoulli)."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    rng = random.Random(seed)
    for doc in docs:
        if rng.random() < rate:
            yield doc


def sample_count(docs: Iterable[Document], n: int, seed: int) -> list[Document]:
    """Reservoir-sample exactly min(n, |docs|) records, each equally likely."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n == 0:
        # Still need a (possibly empty) consume-free return.
        return []
    rng = random.Random(seed)
    reservoir: list[Document] = []
    for i, doc in enumerate(docs):
        if i < n:
            reservoir.append(doc)
        else:
            j = rng.randint(0, i)
            if j < n:
                reservoir[j] = doc
    return reservoir


_CJK_RE = re.compile(r"[㐀-䶿一-鿿豈-﫿]")
_WORD_RE = re.compile(r"[^\s㐀-䶿一-鿿豈-﫿]+")


def approx_token_count(text: str) -> int:
    """Whitespace words plus individual CJK characters.

    Used for retention reports when no tokenizer vocabulary is configured.
    """
    return len(_CJK_RE.findall(text)) + len(_WORD_RE.findall(text))


def simple_tokens(text: str) -> list[str]:
    """Whitespace-separated runs, with CJK characters as single tokens."""
    return re.findall(r"[㐀-䶿一-鿿豈-﫿]|[^\s㐀-䶿一-鿿豈-﫿]+", text)
