"""Text embedding providers for similarity measurement.

``LocalHashEmbedder`` is deterministic and offline: character n-grams are
feature-hashed into a fixed number of dimensions and L2-normalized, which
is enough for tests and desk-scale similarity reports. ``RemoteEmbedder``
speaks a small HTTP JSON contract (POST {"texts": [...]} returning
{"embeddings": [[...], ...]}) with batching, retry with backoff, and a
response cache keyed by content hash.
"""

from __future__ import annotations

import os
import threading
import time
from hashlib import blake2b
from typing import Iterable, Sequence

import numpy as np

EMBED_URL_ENV = "DATAFACTORY_EMBED_URL"
EMBED_TOKEN_ENV = "DATAFACTORY_EMBED_TOKEN"


class EmbeddingProviderError(RuntimeError):
    pass


class LocalHashEmbedder:
    """Character n-gram feature hashing, L2-normalized."""

    def __init__(self, dim: int = 256, ngram: int = 3):
        self.dim = dim
        self.ngram = ngram

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            grams: Iterable[str]
            if len(text) < self.ngram:
                grams = [text] if text else []
            else:
                grams = (text[i : i + self.ngram] for i in range(len(text) - self.ngram + 1))
            for gram in grams:
                digest = blake2b(gram.encode("utf-8"), digest_size=8).digest()
                h = int.from_bytes(digest, "little")
                out[row, h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class RemoteEmbedder:
    """HTTP embedding client with batching, retries and caching.

    The endpoint and bearer token default to the DATAFACTORY_EMBED_URL /
    DATAFACTORY_EMBED_TOKEN environment variables. The cache supports
    concurrent reads with exclusive writes per key.
    """

    def __init__(
        self,
        url: str | None = None,
        token: str | None = None,
        batch_size: int = 64,
        max_retries: int = 3,
        backoff_seconds: float = 0.5,
        timeout: float = 30.0,
        session=None,
    ):
        self.url = url or os.environ.get(EMBED_URL_ENV)
        if not self.url:
            raise EmbeddingProviderError(
                f"no endpoint configured (set {EMBED_URL_ENV} or pass url=)"
            )
        self.token = token if token is not None else os.environ.get(EMBED_TOKEN_ENV)
        self.batch_size = batch_size
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self._cache: dict[bytes, np.ndarray] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(text: str) -> bytes:
        return blake2b(text.encode("utf-8"), digest_size=16).digest()

    def _post_batch(self, batch: list[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self.session.post(
                    self.url, json={"texts": batch}, headers=headers, timeout=self.timeout
                )
                if resp.status_code >= 500:
                    raise EmbeddingProviderError(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise EmbeddingProviderError(
                        f"embedding request failed with status {resp.status_code}"
                    )
                payload = resp.json()
                vectors = payload.get("embeddings")
                if not isinstance(vectors, list) or len(vectors) != len(batch):
                    raise EmbeddingProviderError("malformed embeddings response")
                return vectors
            except EmbeddingProviderError as exc:
                last_error = exc
                if "status" in str(exc):  # 4xx: do not retry
                    raise
            except Exception as exc:  # connection errors, timeouts
                last_error = exc
            if attempt < self.max_retries:
                time.sleep(self.backoff_seconds * (2**attempt))
        raise EmbeddingProviderError(f"embedding request failed: {last_error}")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        results: dict[int, np.ndarray] = {}
        missing: list[tuple[int, str]] = []
        for i, text in enumerate(texts):
            cached = self._cache.get(self._key(text))
            if cached is not None:
                results[i] = cached
            else:
                missing.append((i, text))
        dim: int | None = None
        for start in range(0, len(missing), self.batch_size):
            chunk = missing[start : start + self.batch_size]
            vectors = self._post_batch([t for _, t in chunk])
            for (i, text), vec in zip(chunk, vectors):
                arr = np.asarray(vec, dtype=np.float64)
                if dim is None:
                    dim = arr.shape[0]
                elif arr.shape[0] != dim:
                    raise EmbeddingProviderError(
                        f"dimension mismatch: got {arr.shape[0]}, expected {dim}"
                    )
                with self._lock:
                    self._cache[self._key(text)] = arr
                results[i] = arr
        if not results:
            return np.zeros((0, 0), dtype=np.float64)
        dims = {v.shape[0] for v in results.values()}
        if len(dims) != 1:
            raise EmbeddingProviderError(f"dimension mismatch across batches: {sorted(dims)}")
        return np.stack([results[i] for i in range(len(texts))])


def get_provider(name: str, **kwargs):
    if name == "local":
        return LocalHashEmbedder(**kwargs)
    if name == "remote":
        return RemoteEmbedder(**kwargs)
    raise ValueError(f"unknown embedding provider {name!r}")
