"""Corpus quality evaluation and gating.

Computes the automatic metric table on a sample (regex rates at level 1,
perplexity/informativeness/readability at level 2, language/length/topic
distributions at level 3), ingests human evaluation labels, and gates the
corpus against thresholds.

Informativeness and readability are transparent proxies (unique-token
ratio; fraction of well-formed sentences) and the topic histogram uses
keyword buckets; reports mark them proxy-grade.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .corpus_io import Document, simple_tokens
from .lm_scoring import NGramLM, perplexity
from .preprocess import detect_language
from .rule_filter import Lexicon, RATE_CATEGORIES, split_sentences, word_rate

_TERMINAL = "。！？.!?…\"”’)】'"


@dataclass
class QualityMetrics:
    privacy_word_rate: float
    toxic_word_rate: float
    adv_word_rate: float
    webpage_funcword_rate: float
    perplexity: float | None
    informativeness: float
    readability: float
    language_hist: dict[str, float]
    length_hist: dict[str, float]
    topic_hist: dict[str, float]
    sample_size: int
    proxy_metrics: tuple[str, ...] = ("informativeness", "readability", "topic_hist")

    def level1_rates(self) -> dict[str, float]:
        return {
            "privacy_word_rate": self.privacy_word_rate,
            "toxic_word_rate": self.toxic_word_rate,
            "adv_word_rate": self.adv_word_rate,
            "webpage_funcword_rate": self.webpage_funcword_rate,
        }


@dataclass(frozen=True)
class HumanEvalReport:
    sample_size: int
    coherence: float
    readability: float
    toxic: float


@dataclass(frozen=True)
class GateFailure:
    metric: str
    observed: float
    threshold: float
    level: int


@dataclass
class GateVerdict:
    decision: str  # accept | reject
    failing_metrics: list[GateFailure] = field(default_factory=list)


_LENGTH_BUCKETS = ((100, "<100"), (1000, "100-999"), (10000, "1000-9999"))


def _length_bucket(n: int) -> str:
    for bound, name in _LENGTH_BUCKETS:
        if n < bound:
            return name
    return "10000+"


def _topic_keywords() -> dict[str, list[str]]:
    data = resources.files("datafactory").joinpath("data/topics.json").read_text("utf-8")
    return json.loads(data)


def _topic_of(text: str, keywords: dict[str, list[str]]) -> str:
    low = text.lower()
    best, best_hits = "other", 0
    for topic, words in keywords.items():
        hits = sum(low.count(w) for w in words)
        if hits > best_hits:
            best, best_hits = topic, hits
    return best


def auto_metrics(
    sample: Sequence[Document],
    lexicons: dict[str, Lexicon],
    lms: dict[str, NGramLM] | None = None,
) -> QualityMetrics:
    """Compute the automatic metric vector over a document sample.

    Level-1 rates are the fraction of documents with at least one lexicon
    match (the rate of unqualified examples). ``lms`` maps language tags
    to reference models; documents without a matching model are skipped
    for perplexity.
    """
    if not sample:
        raise ValueError("sample is empty")
    n = len(sample)
    violators = {cat: 0 for cat in RATE_CATEGORIES}
    ppls: list[float] = []
    uniq_ratios: list[float] = []
    sent_total = 0
    sent_ok = 0
    lang_counter: Counter = Counter()
    len_counter: Counter = Counter()
    topic_counter: Counter = Counter()
    keywords = _topic_keywords()

    for doc in sample:
        for cat in RATE_CATEGORIES:
            lex = lexicons.get(cat)
            if lex is not None and word_rate(doc, lex) > 0:
                violators[cat] += 1
        toks = simple_tokens(doc.text)
        uniq_ratios.append(len(set(toks)) / len(toks) if toks else 0.0)
        for sent in split_sentences(doc.text):
            stripped = sent.strip()
            if not stripped:
                continue
            sent_total += 1
            n_toks = len(simple_tokens(stripped))
            if stripped[-1] in _TERMINAL and 3 <= n_toks <= 120:
                sent_ok += 1
        lang = doc.language or detect_language(doc.text).tag
        lang_counter[lang] += 1
        len_counter[_length_bucket(len(doc.text))] += 1
        topic_counter[_topic_of(doc.text, keywords)] += 1
        if lms:
            lm = lms.get(lang)
            if lm is not None and doc.text.strip():
                ppls.append(perplexity(lm, doc))

    return QualityMetrics(
        privacy_word_rate=violators["privacy"] / n,
        toxic_word_rate=violators["toxic"] / n,
        adv_word_rate=violators["adv"] / n,
        webpage_funcword_rate=violators["webpage"] / n,
        perplexity=sum(ppls) / len(ppls) if ppls else None,
        informativeness=sum(uniq_ratios) / n,
        readability=sent_ok / sent_total if sent_total else 0.0,
        language_hist={k: v / n for k, v in sorted(lang_counter.items())},
        length_hist={k: v / n for k, v in sorted(len_counter.items())},
        topic_hist={k: v / n for k, v in sorted(topic_counter.items())},
        sample_size=n,
    )


def ingest_human_labels(path: Path | str) -> HumanEvalReport:
    """Read (doc_id, coherence, readability, toxic) CSV rows of 0/1 labels.

    Returns per-attribute compliant fractions. A header row is skipped
    when its label cells are not 0/1.
    """
    rows: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for i, row in enumerate(reader):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path}: row {i + 1}: expected 4 columns, got {len(row)}")
            doc_id, *labels = (cell.strip() for cell in row)
            if i == 0 and not all(cell in ("0", "1") for cell in labels):
                continue  # header
            if not doc_id:
                raise ValueError(f"{path}: row {i + 1}: missing doc_id")
            for cell in labels:
                if cell not in ("0", "1"):
                    raise ValueError(f"{path}: row {i + 1}: unknown label value {cell!r}")
            rows.append(tuple(int(cell) for cell in labels))
    if not rows:
        raise ValueError(f"{path}: no label rows")
    n = len(rows)
    return HumanEvalReport(
        sample_size=n,
        coherence=sum(r[0] for r in rows) / n,
        readability=sum(r[1] for r in rows) / n,
        toxic=sum(r[2] for r in rows) / n,
    )


@dataclass(frozen=True)
class GateThresholds:
    """Gate configuration.

    Level 1 is a hard ceiling on violation rates ("does not exceed" the
    threshold, i.e. observed <= threshold passes). Level 2 floors apply
    when configured; level 3 histograms are report-only.
    """

    level1_rate: float = 0.001
    coherence_floor: float | None = None
    readability_floor: float | None = None
    toxic_floor: float | None = None
    informativeness_floor: float | None = None
    readability_auto_floor: float | None = None
    perplexity_ceiling: float | None = None


def gate(
    metrics: QualityMetrics,
    human: HumanEvalReport | None,
    thresholds: GateThresholds | None = None,
) -> GateVerdict:
    """Accept the corpus iff no configured threshold is violated."""
    th = thresholds or GateThresholds()
    failing: list[GateFailure] = []
    for name, rate in metrics.level1_rates().items():
        if rate > th.level1_rate:
            failing.append(GateFailure(name, rate, th.level1_rate, 1))
    if th.informativeness_floor is not None and metrics.informativeness < th.informativeness_floor:
        failing.append(GateFailure("informativeness", metrics.informativeness, th.informativeness_floor, 2))
    if th.readability_auto_floor is not None and metrics.readability < th.readability_auto_floor:
        failing.append(GateFailure("readability_auto", metrics.readability, th.readability_auto_floor, 2))
    if (
        th.perplexity_ceiling is not None
        and metrics.perplexity is not None
        and metrics.perplexity > th.perplexity_ceiling
    ):
        failing.append(GateFailure("perplexity", metrics.perplexity, th.perplexity_ceiling, 2))
    if human is not None:
        for name, value, floor in (
            ("coherence", human.coherence, th.coherence_floor),
            ("readability", human.readability, th.readability_floor),
            ("toxic", human.toxic, th.toxic_floor),
        ):
            if floor is not None and value < floor:
                failing.append(GateFailure(name, value, floor, 1))
    decision = "accept" if not failing else "reject"
    return GateVerdict(decision=decision, failing_metrics=failing)
