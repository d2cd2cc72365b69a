"""Three-stage training-sequence construction.

Stage 1 splices shuffled documents into a continuous token stream, one
``<eos>`` after each document, cut into max_len chunks; a document
crossing a chunk boundary continues in the next sequence, so no tokens
are lost and no padding is used. Stage 2 groups supervised documents by
task and greedily concatenates whole documents up to max_len, padding the
tail with ``<pad>``; an oversized document is truncated and flagged.
Stage 3 mixes augmented data with token-budgeted samples from the stage-1
and stage-2 pools.

Shard format: header (magic, version, max_len, vocab hash) followed by
length-prefixed little-endian int32 id sequences, with a ``*.spans.jsonl``
sidecar mapping every content token back to its source document.
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field
from hashlib import blake2b
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .corpus_io import Document
from .tokenizer import Vocab

MAX_LEN_DEFAULT = 4096
_SHARD_MAGIC = b"DFPK"
_SHARD_VERSION = 1


@dataclass
class PackedSequence:
    ids: np.ndarray  # int32, length <= max_len
    spans: list[tuple[str, int, int]]  # (doc_id, start, end) tiling the non-pad region
    kind: str  # stage1 | stage2 | stage3
    pad_count: int = 0


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    language: str
    pattern: str


def load_default_templates() -> list[PromptTemplate]:
    data = resources.files("datafactory").joinpath("data/prompts.json").read_text("utf-8")
    return [PromptTemplate(**row) for row in json.loads(data)]


def attach_prompt(
    doc: Document,
    templates: PromptTemplate | Sequence[PromptTemplate],
    seed: int = 0,
) -> Document:
    """Render a prompt template over the document's meta slots.

    When several templates are given, the choice is a stable seeded
    function of (seed, doc.id), so re-running yields identical output
    regardless of stream order.
    """
    if isinstance(templates, PromptTemplate):
        choices = [templates]
    else:
        choices = list(templates)
    if not choices:
        raise ValueError("no templates given")
    h = blake2b(f"{seed}|{doc.id}".encode("utf-8"), digest_size=8).digest()
    template = choices[int.from_bytes(h, "little") % len(choices)]
    slots = dict(doc.meta)
    slots.setdefault("text", doc.text)
    try:
        text = template.pattern.format_map(slots)
    except KeyError as exc:
        raise ValueError(f"doc {doc.id!r}: missing slot {exc.args[0]!r} for template {template.name}") from exc
    return Document(
        id=doc.id,
        text=text,
        url=doc.url,
        language=doc.language,
        source=doc.source,
        task=doc.task,
        meta=dict(doc.meta),
    )


@dataclass
class PackStats:
    input_docs: int = 0
    input_tokens: int = 0  # document tokens, excluding <eos>
    packed_tokens: int = 0  # document tokens that landed in sequences
    eos_tokens: int = 0
    pad_tokens: int = 0
    truncated_docs: list[tuple[str, int]] = field(default_factory=list)  # (doc_id, dropped)

    @property
    def truncated_tokens(self) -> int:
        return sum(n for _, n in self.truncated_docs)


def pack_stage1(
    docs: Iterable[Document],
    vocab: Vocab,
    max_len: int = MAX_LEN_DEFAULT,
    seed: int = 0,
) -> tuple[list[PackedSequence], PackStats]:
    """Shuffle, splice with <eos> separators, cut into max_len chunks.

    Every emitted sequence except possibly the last has length exactly
    max_len; none contain padding. The amount of input is assumed to fit
    a shuffle buffer (shard inputs for larger runs).
    """
    stats = PackStats()
    doc_list = list(docs)
    random.Random(seed).shuffle(doc_list)
    sequences: list[PackedSequence] = []
    buf: list[int] = []
    spans: list[tuple[str, int, int]] = []

    def flush(full_only: bool) -> None:
        nonlocal buf, spans
        while len(buf) >= max_len or (buf and not full_only):
            take = min(max_len, len(buf))
            ids = np.array(buf[:take], dtype=np.int32)
            out_spans: list[tuple[str, int, int]] = []
            rest_spans: list[tuple[str, int, int]] = []
            for doc_id, start, end in spans:
                if start < take:
                    out_spans.append((doc_id, start, min(end, take)))
                if end > take:
                    rest_spans.append((doc_id, max(start - take, 0), end - take))
            sequences.append(PackedSequence(ids=ids, spans=out_spans, kind="stage1"))
            buf = buf[take:]
            spans = rest_spans

    for doc in doc_list:
        stats.input_docs += 1
        ids = vocab.encode(doc.text)
        stats.input_tokens += len(ids)
        stats.packed_tokens += len(ids)
        stats.eos_tokens += 1
        start = len(buf)
        buf.extend(ids)
        buf.append(vocab.eos_id)
        spans.append((doc.id, start, len(buf)))
        flush(full_only=True)
    flush(full_only=False)
    return sequences, stats


def pack_stage2(
    task_docs: Iterable[Document],
    vocab: Vocab,
    max_len: int = MAX_LEN_DEFAULT,
    seed: int = 0,
) -> tuple[list[PackedSequence], PackStats]:
    """Task-grouped greedy packing of whole documents, pad-tailed.

    Documents never split across sequences and tasks never share one.
    Within a task the stream order is preserved; the seed only shuffles
    the order in which task groups are emitted. A document longer than
    max_len is truncated to max_len - 1 tokens plus <eos> and flagged in
    the stats.
    """
    stats = PackStats()
    groups: dict[str, list[Document]] = {}
    for doc in task_docs:
        if not doc.task:
            raise ValueError(f"doc {doc.id!r} has no task tag")
        groups.setdefault(doc.task, []).append(doc)
        stats.input_docs += 1
    task_order = sorted(groups)
    random.Random(seed).shuffle(task_order)

    sequences: list[PackedSequence] = []

    def flush(buf: list[int], spans: list[tuple[str, int, int]]) -> None:
        if not buf:
            return
        pad = max_len - len(buf)
        ids = np.array(buf + [vocab.pad_id] * pad, dtype=np.int32)
        sequences.append(PackedSequence(ids=ids, spans=list(spans), kind="stage2", pad_count=pad))
        stats.pad_tokens += pad

    for task in task_order:
        buf: list[int] = []
        spans: list[tuple[str, int, int]] = []
        for doc in groups[task]:
            ids = vocab.encode(doc.text)
            stats.input_tokens += len(ids)
            if len(ids) + 1 > max_len:
                dropped = len(ids) - (max_len - 1)
                stats.truncated_docs.append((doc.id, dropped))
                ids = ids[: max_len - 1]
            if len(buf) + len(ids) + 1 > max_len:
                flush(buf, spans)
                buf, spans = [], []
            start = len(buf)
            buf.extend(ids)
            buf.append(vocab.eos_id)
            spans.append((doc.id, start, len(buf)))
            stats.packed_tokens += len(ids)
            stats.eos_tokens += 1
        flush(buf, spans)
    return sequences, stats


@dataclass(frozen=True)
class MixBudget:
    """Per-source token budgets for stage-3 mixing.

    ``None`` takes a pool in full; the augmented set defaults to full.
    When stage budgets are None they default to the augmented set's token
    count (a 1:1:1 mix).
    """

    augmented: int | None = None
    stage1: int | None = None
    stage2: int | None = None


@dataclass
class MixStats:
    tokens: dict[str, int] = field(default_factory=dict)
    exhausted_pools: list[str] = field(default_factory=list)


def _budget_sample(
    pool: Sequence[Document],
    budget: int | None,
    vocab: Vocab,
    rng: random.Random,
    name: str,
    stats: MixStats,
) -> list[Document]:
    docs = list(pool)
    rng.shuffle(docs)
    if budget is None:
        taken = docs
    elif budget <= 0:
        taken = []
    else:
        taken = []
        total = 0
        for doc in docs:
            taken.append(doc)
            total += len(vocab.encode(doc.text))
            if total >= budget:
                break
        else:
            stats.exhausted_pools.append(name)
    stats.tokens[name] = sum(len(vocab.encode(d.text)) for d in taken)
    return taken


def mix_stage3(
    aug_docs: Iterable[Document],
    stage1_pool: Sequence[Document],
    stage2_pool: Sequence[Document],
    vocab: Vocab,
    budget: MixBudget | None = None,
    seed: int = 0,
) -> tuple[list[Document], MixStats]:
    """Interleave augmented docs with samples from earlier-stage pools.

    Returns the mixed document list (seed-shuffled); downstream packing
    applies stage-2 rules to docs with a task tag and stage-1 rules to
    the rest. A pool smaller than its budget is taken whole and recorded
    in ``exhausted_pools``.
    """
    budget = budget or MixBudget()
    stats = MixStats()
    rng = random.Random(seed)
    aug = _budget_sample(list(aug_docs), budget.augmented, vocab, rng, "augmented", stats)
    aug_tokens = stats.tokens["augmented"]
    s1_budget = budget.stage1 if budget.stage1 is not None else aug_tokens
    s2_budget = budget.stage2 if budget.stage2 is not None else aug_tokens
    s1 = _budget_sample(stage1_pool, s1_budget, vocab, rng, "stage1", stats)
    s2 = _budget_sample(stage2_pool, s2_budget, vocab, rng, "stage2", stats)
    mixed = aug + s1 + s2
    rng.shuffle(mixed)
    return mixed, stats


# -- shard io -----------------------------------------------------------------

def write_shard(
    path: Path | str,
    sequences: Iterable[PackedSequence],
    max_len: int,
    vocab_hash: int,
) -> Path:
    """Write sequences and the spans sidecar; returns the shard path."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".spans.jsonl")
    with open(path, "wb") as fh, open(sidecar, "w", encoding="utf-8") as sc:
        fh.write(_SHARD_MAGIC)
        fh.write(struct.pack("<IIQ", _SHARD_VERSION, max_len, vocab_hash))
        for i, seq in enumerate(sequences):
            ids = np.ascontiguousarray(seq.ids, dtype="<i4")
            fh.write(struct.pack("<I", len(ids)))
            fh.write(ids.tobytes())
            sc.write(
                json.dumps(
                    {
                        "index": i,
                        "kind": seq.kind,
                        "pad_count": seq.pad_count,
                        "spans": [[d, s, e] for d, s, e in seq.spans],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return path


@dataclass(frozen=True)
class ShardHeader:
    version: int
    max_len: int
    vocab_hash: int


def read_shard(path: Path | str) -> tuple[ShardHeader, list[np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _SHARD_MAGIC:
            raise ValueError(f"{path}: not a packed shard")
        version, max_len, vocab_hash = struct.unpack("<IIQ", fh.read(16))
        sequences = []
        while True:
            raw = fh.read(4)
            if not raw:
                break
            (n,) = struct.unpack("<I", raw)
            ids = np.frombuffer(fh.read(4 * n), dtype="<i4").copy()
            sequences.append(ids)
    return ShardHeader(version, max_len, vocab_hash), sequences


def iter_shard_spans(path: Path | str) -> Iterator[dict]:
    sidecar = Path(path)
    sidecar = sidecar.with_name(sidecar.name + ".spans.jsonl")
    with open(sidecar, "r", encoding="utf-8") as fh:
        for line in fh:
            yield json.loads(line)
