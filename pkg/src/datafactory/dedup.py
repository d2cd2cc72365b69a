"""Three-pass deduplication: URL exact, content exact, content fuzzy.

URL and exact-content passes use Bloom filters (no false negatives; the
small false-positive rate drops a few unique documents, sized for a 1e-7
target by default). The fuzzy pass uses 64-bit SimHash fingerprints with
band bucketing: 4 bands of 16 bits guarantee by pigeonhole that any two
fingerprints within Hamming distance 3 share at least one band.

Fingerprint and Bloom inner loops live in ``_kernels`` (numba with a
numpy fallback).
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from hashlib import blake2b
from pathlib import Path
from typing import Iterable, Iterator
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

import numpy as np

from . import _kernels
from .corpus_io import Document

SHINGLE_WIDTH = 4
_BLOOM_MAGIC = b"DFBLOOM1"


def _key_hashes(key: str) -> tuple[int, int]:
    digest = blake2b(key.encode("utf-8"), digest_size=16).digest()
    h1, h2 = struct.unpack("<QQ", digest)
    return h1, h2 | 1  # odd step so double hashing cycles all positions


class BloomFilter:
    """Bit array with k double-hashed probes per key; no false negatives."""

    def __init__(self, capacity: int, fpr: float = 1e-7):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if not 0 < fpr < 1:
            raise ValueError("fpr must be in (0, 1)")
        self.capacity = capacity
        self.fpr = fpr
        self.bit_count = max(8, math.ceil(-capacity * math.log(fpr) / math.log(2) ** 2))
        self.hash_count = max(1, round(self.bit_count / capacity * math.log(2)))
        self.bits = np.zeros((self.bit_count + 7) // 8, dtype=np.uint8)
        self.inserted_count = 0

    def insert(self, key: str) -> None:
        h1, h2 = _key_hashes(key)
        _kernels.bloom_set(
            self.bits,
            np.array([h1], dtype=np.uint64),
            np.array([h2], dtype=np.uint64),
            self.hash_count,
            self.bit_count,
        )
        self.inserted_count += 1

    def contains(self, key: str) -> bool:
        h1, h2 = _key_hashes(key)
        out = _kernels.bloom_check(
            self.bits,
            np.array([h1], dtype=np.uint64),
            np.array([h2], dtype=np.uint64),
            self.hash_count,
            self.bit_count,
        )
        return bool(out[0])

    def insert_batch(self, keys: Iterable[str]) -> None:
        pairs = [_key_hashes(k) for k in keys]
        if not pairs:
            return
        h1 = np.array([p[0] for p in pairs], dtype=np.uint64)
        h2 = np.array([p[1] for p in pairs], dtype=np.uint64)
        _kernels.bloom_set(self.bits, h1, h2, self.hash_count, self.bit_count)
        self.inserted_count += len(pairs)

    def contains_batch(self, keys: Iterable[str]) -> np.ndarray:
        pairs = [_key_hashes(k) for k in keys]
        if not pairs:
            return np.zeros(0, dtype=np.uint8)
        h1 = np.array([p[0] for p in pairs], dtype=np.uint64)
        h2 = np.array([p[1] for p in pairs], dtype=np.uint64)
        return _kernels.bloom_check(self.bits, h1, h2, self.hash_count, self.bit_count)

    # -- snapshots --------------------------------------------------------

    def save(self, path: Path | str) -> None:
        with open(path, "wb") as fh:
            fh.write(_BLOOM_MAGIC)
            fh.write(
                struct.pack(
                    "<QQdI", self.capacity, self.inserted_count, self.fpr, self.hash_count
                )
            )
            fh.write(struct.pack("<Q", self.bit_count))
            fh.write(self.bits.tobytes())

    @classmethod
    def load(cls, path: Path | str) -> "BloomFilter":
        with open(path, "rb") as fh:
            if fh.read(8) != _BLOOM_MAGIC:
                raise ValueError(f"{path}: not a bloom snapshot")
            capacity, inserted, fpr, hash_count = struct.unpack("<QQdI", fh.read(28))
            (bit_count,) = struct.unpack("<Q", fh.read(8))
            bits = np.frombuffer(fh.read(), dtype=np.uint8).copy()
        bf = cls.__new__(cls)
        bf.capacity = capacity
        bf.fpr = fpr
        bf.hash_count = hash_count
        bf.bit_count = bit_count
        bf.bits = bits
        bf.inserted_count = inserted
        return bf


_WS_RUN = re.compile(r"\s+")


def canonicalize_text(text: str) -> str:
    """Lowercase and collapse whitespace runs to single spaces."""
    return _WS_RUN.sub(" ", text.lower()).strip()


def canonical_content_hash(text: str) -> int:
    """128-bit hash of the canonicalized text."""
    digest = blake2b(canonicalize_text(text).encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


_TRACKING_KEYS = {"fbclid", "gclid", "msclkid", "ref", "ref_src"}


def canonicalize_url(url: str) -> str:
    """Lowercase scheme/host, strip fragment and common tracking params."""
    parts = urlsplit(url.strip())
    query = [
        (k, v)
        for k, v in parse_qsl(parts.query, keep_blank_values=True)
        if not (k.lower().startswith("utm_") or k.lower() in _TRACKING_KEYS)
    ]
    return urlunsplit(
        (
            parts.scheme.lower(),
            parts.netloc.lower(),
            parts.path,
            urlencode(query),
            "",
        )
    )


@dataclass(frozen=True)
class SimHashFingerprint:
    bits: int
    feature_count: int

    @property
    def empty(self) -> bool:
        return self.feature_count == 0


def simhash(text: str) -> SimHashFingerprint:
    """64-bit fingerprint over weighted character 4-gram shingles.

    Each shingle occurrence votes its hash bits +1/-1, so a shingle's
    weight equals its frequency. Texts shorter than the shingle width use
    the whole text as a single feature; empty canonical text yields the
    zero fingerprint, flagged via feature_count == 0.
    """
    canon = canonicalize_text(text)
    if not canon:
        return SimHashFingerprint(bits=0, feature_count=0)
    cps = np.array([ord(ch) for ch in canon], dtype=np.uint64)
    width = min(SHINGLE_WIDTH, len(cps))
    fp = _kernels.simhash(cps, width)
    return SimHashFingerprint(bits=int(fp), feature_count=len(cps) - width + 1)


def hamming_distance(a: int, b: int) -> int:
    return (a ^ b).bit_count()


class BandedIndex:
    """SimHash fingerprints bucketed by band for near-duplicate lookup.

    With band_count b and threshold t < b, any two fingerprints within
    Hamming distance t collide in at least one band, so candidate lookup
    plus an exact Hamming check finds every near-duplicate pair.
    """

    def __init__(self, band_count: int = 4, hamming_threshold: int = 3, width_bits: int = 64):
        if width_bits % band_count != 0:
            raise ValueError("band_count must divide width_bits")
        if hamming_threshold >= band_count:
            raise ValueError(
                f"hamming_threshold ({hamming_threshold}) must be < band_count ({band_count}) "
                "for the pigeonhole guarantee"
            )
        self.band_count = band_count
        self.bits_per_band = width_bits // band_count
        self.hamming_threshold = hamming_threshold
        self.tables: list[dict[int, list[int]]] = [dict() for _ in range(band_count)]
        self.ids: list[str] = []
        self.fingerprints: list[int] = []

    def _band_values(self, fp: int) -> Iterator[tuple[int, int]]:
        mask = (1 << self.bits_per_band) - 1
        for b in range(self.band_count):
            yield b, (fp >> (b * self.bits_per_band)) & mask

    def candidates(self, fp: int) -> list[int]:
        seen: set[int] = set()
        for b, val in self._band_values(fp):
            seen.update(self.tables[b].get(val, ()))
        return sorted(seen)

    def match(self, fp: int) -> tuple[str, int] | None:
        """First indexed entry within the Hamming threshold, or None."""
        cand = self.candidates(fp)
        if not cand:
            return None
        fps = np.array([self.fingerprints[i] for i in cand], dtype=np.uint64)
        dists = _kernels.hamming_many(fp, fps)
        best = None
        for pos, dist in zip(cand, dists):
            if dist <= self.hamming_threshold and (best is None or pos < best[0]):
                best = (pos, int(dist))
        if best is None:
            return None
        return self.ids[best[0]], best[1]

    def insert(self, doc_id: str, fp: int) -> None:
        idx = len(self.ids)
        self.ids.append(doc_id)
        self.fingerprints.append(fp)
        for b, val in self._band_values(fp):
            self.tables[b].setdefault(val, []).append(idx)

    def save(self, path: Path | str) -> None:
        payload = {
            "band_count": self.band_count,
            "hamming_threshold": self.hamming_threshold,
            "ids": self.ids,
            "fingerprints": self.fingerprints,
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "BandedIndex":
        payload = json.loads(Path(path).read_text("utf-8"))
        index = cls(
            band_count=payload["band_count"],
            hamming_threshold=payload["hamming_threshold"],
        )
        for doc_id, fp in zip(payload["ids"], payload["fingerprints"]):
            index.insert(doc_id, fp)
        return index


def near_duplicate_pairs(
    fingerprints: list[int], band_count: int = 4, hamming_threshold: int = 3
) -> set[tuple[int, int]]:
    """All index pairs (i, j), i < j, within the Hamming threshold.

    Streaming banded candidate generation with exact confirmation; every
    fingerprint is indexed regardless of matches, so the result equals
    the brute-force pairwise scan.
    """
    index = BandedIndex(band_count=band_count, hamming_threshold=hamming_threshold)
    pairs: set[tuple[int, int]] = set()
    for j, fp in enumerate(fingerprints):
        cand = index.candidates(fp)
        if cand:
            fps = np.array([fingerprints[i] for i in cand], dtype=np.uint64)
            dists = _kernels.hamming_many(fp, fps)
            for i, dist in zip(cand, dists):
                if dist <= hamming_threshold:
                    pairs.add((i, j))
        index.insert(str(j), fp)
    return pairs


@dataclass
class DropLogEntry:
    kept_id: str
    dropped_id: str
    distance: int
    stage: str


@dataclass
class DedupStats:
    input_count: int = 0
    dropped_url: int = 0
    dropped_exact: int = 0
    dropped_fuzzy: int = 0

    @property
    def kept_count(self) -> int:
        return self.input_count - self.dropped_url - self.dropped_exact - self.dropped_fuzzy


def fuzzy_dedup(
    docs: Iterable[Document],
    index: BandedIndex | None = None,
    drop_log: list[DropLogEntry] | None = None,
) -> Iterator[Document]:
    """Keep the first-seen member of each near-duplicate class."""
    if index is None:
        index = BandedIndex()
    for doc in docs:
        fp = simhash(doc.text)
        hit = index.match(fp.bits)
        if hit is not None:
            kept_id, dist = hit
            if drop_log is not None:
                drop_log.append(DropLogEntry(kept_id, doc.id, dist, "fuzzy"))
            continue
        index.insert(doc.id, fp.bits)
        yield doc


@dataclass
class DedupConfig:
    capacity: int = 1_000_000
    bloom_fpr: float = 1e-7
    band_count: int = 4
    hamming_threshold: int = 3
    url_pass: bool = True
    exact_pass: bool = True
    fuzzy_pass: bool = True


class DedupPipeline:
    """URL Bloom -> exact-content Bloom -> SimHash fuzzy, in that order."""

    def __init__(self, config: DedupConfig | None = None):
        self.config = config or DedupConfig()
        self.url_bloom = BloomFilter(self.config.capacity, self.config.bloom_fpr)
        self.content_bloom = BloomFilter(self.config.capacity, self.config.bloom_fpr)
        self.index = BandedIndex(
            band_count=self.config.band_count,
            hamming_threshold=self.config.hamming_threshold,
        )
        self.stats = DedupStats()
        self.drop_log: list[DropLogEntry] = []

    def run(self, docs: Iterable[Document]) -> Iterator[Document]:
        cfg = self.config
        for doc in docs:
            self.stats.input_count += 1
            if cfg.url_pass and doc.url:
                key = canonicalize_url(doc.url)
                if self.url_bloom.contains(key):
                    self.stats.dropped_url += 1
                    self.drop_log.append(DropLogEntry("", doc.id, -1, "url"))
                    continue
                self.url_bloom.insert(key)
            if cfg.exact_pass:
                key = f"{canonical_content_hash(doc.text):032x}"
                if self.content_bloom.contains(key):
                    self.stats.dropped_exact += 1
                    self.drop_log.append(DropLogEntry("", doc.id, 0, "exact"))
                    continue
                self.content_bloom.insert(key)
            if cfg.fuzzy_pass:
                fp = simhash(doc.text)
                hit = self.index.match(fp.bits)
                if hit is not None:
                    kept_id, dist = hit
                    self.stats.dropped_fuzzy += 1
                    self.drop_log.append(DropLogEntry(kept_id, doc.id, dist, "fuzzy"))
                    continue
                self.index.insert(doc.id, fp.bits)
            yield doc

    def write_drop_log(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.drop_log:
                fh.write(
                    json.dumps(
                        {
                            "kept_id": entry.kept_id,
                            "dropped_id": entry.dropped_id,
                            "distance": entry.distance,
                            "stage": entry.stage,
                        }
                    )
                    + "\n"
                )
