"""Reference n-gram language models and perplexity banding.

Two smoothing schemes are provided: interpolated Kneser-Ney (the default,
order 5) and add-k (whose probabilities are easy to check by hand in
tests). Documents are ranked by perplexity and banded high / medium /
discard at the 30% / 60% percentile boundaries; only high and medium
survive downstream.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus_io import Document
from .preprocess import detect_language

UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"

_MAGIC = b"DFNGLM\x01\x00"
_VERSION = 1


def tokenize(text: str, mode: str = "auto") -> list[str]:
    """LM tokenization: whitespace words (en) or single characters (zh)."""
    if mode == "auto":
        mode = "zh" if detect_language(text).tag == "zh" else "en"
    if mode == "en":
        return text.split()
    if mode == "zh":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenize mode {mode!r}")


class NGramLM:
    """Immutable n-gram model with normalized conditional probabilities.

    For every context, probabilities over the event vocabulary (all
    tokens except the sentence-start marker) sum to 1 and are strictly
    positive.
    """

    def __init__(
        self,
        order: int,
        counts: list[dict[tuple[str, ...], int]],
        vocab: set[str],
        smoothing: str,
        add_k: float = 0.1,
        tokenize_mode: str = "en",
    ):
        if smoothing not in ("interpolated-kneser-ney", "add-k"):
            raise ValueError(f"unknown smoothing {smoothing!r}")
        self.order = order
        self.smoothing = smoothing
        self.add_k = add_k
        self.tokenize_mode = tokenize_mode
        self.vocab = set(vocab) | {UNK, BOS, EOS}
        self.event_vocab = sorted(self.vocab - {BOS})
        self._build(counts)

    # -- count tables -----------------------------------------------------

    def _build(self, raw_counts: list[dict[tuple[str, ...], int]]) -> None:
        # Grams ending in <s> are contexts only, never predictions; drop
        # them so per-context probabilities sum to 1 over the event vocab.
        self.raw = [
            {g: c for g, c in table.items() if g[-1] != BOS} for table in raw_counts
        ]
        n = self.order
        # Context totals for the top order (raw counts).
        self.ctx_total: dict[tuple[str, ...], int] = Counter()
        self.ctx_distinct: dict[tuple[str, ...], int] = Counter()
        for gram, c in self.raw[n - 1].items():
            self.ctx_total[gram[:-1]] += c
            self.ctx_distinct[gram[:-1]] += 1
        # Continuation counts for levels 1..n-1: cont[k][gram] counts the
        # distinct left extensions of a k-gram among (k+1)-grams.
        self.cont: list[dict[tuple[str, ...], int]] = [dict() for _ in range(n)]
        self.cont_ctx_total: list[dict[tuple[str, ...], int]] = [dict() for _ in range(n)]
        self.cont_ctx_distinct: list[dict[tuple[str, ...], int]] = [dict() for _ in range(n)]
        for k in range(1, n):
            cc: Counter = Counter()
            for gram in self.raw[k].keys():  # (k+1)-grams
                cc[gram[1:]] += 1
            self.cont[k] = dict(cc)
            total: Counter = Counter()
            distinct: Counter = Counter()
            for gram, c in cc.items():
                total[gram[:-1]] += c
                distinct[gram[:-1]] += 1
            self.cont_ctx_total[k] = dict(total)
            self.cont_ctx_distinct[k] = dict(distinct)
        # Absolute discounts per level from count-of-counts.
        self.discounts = [0.0] * (n + 1)
        for k in range(1, n + 1):
            table = self.raw[n - 1] if k == n else self.cont[k]
            n1 = sum(1 for c in table.values() if c == 1)
            n2 = sum(1 for c in table.values() if c == 2)
            d = n1 / (n1 + 2.0 * n2) if (n1 + 2 * n2) > 0 else 0.5
            self.discounts[k] = min(max(d, 0.1), 0.9)
        self._uniform = 1.0 / len(self.event_vocab)
        self._uni_table = self.cont[1] if n > 1 else self.raw[0]
        self._uni_total = sum(self._uni_table.values())
        self._add_k_ctx_total: list[dict[tuple[str, ...], int]] = [dict() for _ in range(n)]
        for k in range(1, n + 1):
            total = Counter()
            for gram, c in self.raw[k - 1].items():
                total[gram[:-1]] += c
            self._add_k_ctx_total[k - 1] = dict(total)

    # -- probabilities ----------------------------------------------------

    def _map_token(self, tok: str) -> str:
        return tok if tok in self.vocab else UNK

    def prob(self, word: str, context: Sequence[str]) -> float:
        """P(word | context); context is the preceding order-1 tokens."""
        word = self._map_token(word)
        ctx = tuple(self._map_token(t) for t in context)[-(self.order - 1) :] if self.order > 1 else ()
        if self.smoothing == "add-k":
            return self._prob_add_k(word, ctx)
        return self._prob_kn(word, ctx)

    def _prob_add_k(self, word: str, ctx: tuple[str, ...]) -> float:
        k = self.add_k
        v = len(self.event_vocab)
        c_gram = self.raw[len(ctx)].get(ctx + (word,), 0)
        c_ctx = self._add_k_ctx_total[len(ctx)].get(ctx, 0)
        return (c_gram + k) / (c_ctx + k * v)

    def _prob_kn(self, word: str, ctx: tuple[str, ...]) -> float:
        level = len(ctx) + 1
        if level == 1:
            total = self._uni_total
            if total == 0:
                return self._uniform
            d = self.discounts[1]
            distinct = len(self._uni_table)
            top = max(self._uni_table.get((word,), 0) - d, 0.0)
            return top / total + (d * distinct / total) * self._uniform
        if level == self.order:
            table, totals, distincts = self.raw[level - 1], self.ctx_total, self.ctx_distinct
        else:
            table = self.cont[level]
            totals = self.cont_ctx_total[level]
            distincts = self.cont_ctx_distinct[level]
        ctx_total = totals.get(ctx, 0)
        if ctx_total == 0:
            return self._prob_kn(word, ctx[1:])
        d = self.discounts[level]
        c = table.get(ctx + (word,), 0)
        backoff_w = d * distincts.get(ctx, 0) / ctx_total
        return max(c - d, 0.0) / ctx_total + backoff_w * self._prob_kn(word, ctx[1:])

    def sequence_logprob(self, tokens: Sequence[str]) -> tuple[float, int]:
        """Sum of log P over tokens + </s>, with <s> padding. Returns (logp, T)."""
        ctx = [BOS] * (self.order - 1)
        total = 0.0
        for tok in list(tokens) + [EOS]:
            total += math.log(self.prob(tok, ctx))
            ctx = (ctx + [self._map_token(tok)])[-(self.order - 1) :] if self.order > 1 else []
        return total, len(tokens) + 1

    # -- serialization ----------------------------------------------------

    def save(self, path: Path | str) -> None:
        payload = {
            "order": self.order,
            "smoothing": self.smoothing,
            "add_k": self.add_k,
            "tokenize_mode": self.tokenize_mode,
            "vocab": sorted(self.vocab),
            "counts": [
                [[list(g), c] for g, c in sorted(table.items())] for table in self.raw
            ],
        }
        blob = zlib.compress(json.dumps(payload, ensure_ascii=False).encode("utf-8"))
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)

    @classmethod
    def load(cls, path: Path | str) -> "NGramLM":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise ValueError(f"{path}: not an n-gram model file (bad magic)")
            version, size = struct.unpack("<II", fh.read(8))
            if version != _VERSION:
                raise ValueError(f"{path}: unsupported model version {version}")
            payload = json.loads(zlib.decompress(fh.read(size)).decode("utf-8"))
        counts = [
            {tuple(g): c for g, c in table} for table in payload["counts"]
        ]
        return cls(
            order=payload["order"],
            counts=counts,
            vocab=set(payload["vocab"]),
            smoothing=payload["smoothing"],
            add_k=payload["add_k"],
            tokenize_mode=payload["tokenize_mode"],
        )


def train_lm(
    reference_docs: Iterable[Document | str],
    order: int = 5,
    min_count: int = 1,
    smoothing: str = "interpolated-kneser-ney",
    add_k: float = 0.1,
    tokenize_mode: str = "en",
) -> NGramLM:
    """Count n-grams over a reference corpus and build a smoothed model.

    Tokens occurring fewer than ``min_count`` times map to <unk> before
    counting. Each nonempty line of a document is one sentence.
    """
    if not 1 <= order <= 5:
        raise ValueError(f"order must be in [1, 5], got {order}")
    sentences: list[list[str]] = []
    freq: Counter = Counter()
    for doc in reference_docs:
        text = doc.text if isinstance(doc, Document) else doc
        for line in text.splitlines():
            toks = tokenize(line, tokenize_mode)
            if toks:
                sentences.append(toks)
                freq.update(toks)
    if not sentences:
        raise ValueError("reference corpus is empty")
    vocab = {t for t, c in freq.items() if c >= min_count}
    counts: list[dict[tuple[str, ...], int]] = [Counter() for _ in range(order)]
    for sent in sentences:
        toks = [t if t in vocab else UNK for t in sent]
        padded = [BOS] * (order - 1) + toks + [EOS]
        for k in range(1, order + 1):
            table = counts[k - 1]
            for i in range(len(padded) - k + 1):
                gram = tuple(padded[i : i + k])
                if gram[-1] == BOS:
                    continue
                table[gram] += 1
    return NGramLM(
        order=order,
        counts=[dict(c) for c in counts],
        vocab=vocab,
        smoothing=smoothing,
        add_k=add_k,
        tokenize_mode=tokenize_mode,
    )


def perplexity(lm: NGramLM, doc: Document | str) -> float:
    """exp(-(1/T) * sum log P(token | context)) over the document.

    Each nonempty line is scored as one sentence with <s> padding and a
    closing </s>; T counts tokens including each </s>. Invariant under
    re-chunking at sentence boundaries.
    """
    text = doc.text if isinstance(doc, Document) else doc
    total_logp = 0.0
    total_T = 0
    for line in text.splitlines() or [text]:
        toks = tokenize(line, lm.tokenize_mode)
        if not toks:
            continue
        logp, T = lm.sequence_logprob(toks)
        total_logp += logp
        total_T += T
    if total_T == 0:
        raise ValueError("document is empty after tokenization")
    return math.exp(-total_logp / total_T)


@dataclass(frozen=True)
class PplBand:
    band: str  # high | medium | discard
    ppl: float
    percentile: float


def band_by_ppl(
    scores: Sequence[tuple[str, float]],
    boundaries: tuple[float, float] = (0.30, 0.60),
) -> list[tuple[str, PplBand]]:
    """Band documents by ascending perplexity rank.

    The lowest ceil(b1*N) perplexities are high, the next ceil(b2*N) -
    ceil(b1*N) medium, the rest discard. Ties break by doc id so the
    result is a total, deterministic function of the input multiset.
    """
    if not scores:
        raise ValueError("no scores to band")
    b1, b2 = boundaries
    if not 0 <= b1 <= b2 <= 1:
        raise ValueError(f"invalid band boundaries {boundaries}")
    n = len(scores)
    n_high = math.ceil(b1 * n)
    n_medium = math.ceil(b2 * n) - n_high
    ranked = sorted(scores, key=lambda item: (item[1], item[0]))
    out = []
    for rank, (doc_id, ppl) in enumerate(ranked, start=1):
        if rank <= n_high:
            band = "high"
        elif rank <= n_high + n_medium:
            band = "medium"
        else:
            band = "discard"
        out.append((doc_id, PplBand(band=band, ppl=ppl, percentile=rank / n)))
    return out


def kept_ids(banded: Iterable[tuple[str, PplBand]]) -> set[str]:
    """Ids banded high or medium (what survives the scoring stage)."""
    return {doc_id for doc_id, b in banded if b.band in ("high", "medium")}
