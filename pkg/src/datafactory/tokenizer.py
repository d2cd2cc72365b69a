"""Byte-level BPE vocabulary with extension tokens and embedding init.

The base vocabulary (256 byte tokens plus merge results plus specials) is
loaded from a standard vocab/merges file pair; merges are never trained
here. Extension tokens (e.g. common Chinese characters and words) match
longest-first before byte-level encoding, and their embedding rows are
initialized as the uniform mean of their base-token decomposition rows.

Byte-level fallback makes decode(encode(x)) == x for any UTF-8 text.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from hashlib import blake2b
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPECIALS = ("<eos>", "<pad>", "<unk>")

_EMB_MAGIC = b"DFEM"


def _bytes_to_unicode() -> dict[int, str]:
    """Reversible printable rendering for raw bytes (vocab files are text)."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


_BYTE_TO_CHAR = _bytes_to_unicode()
_CHAR_TO_BYTE = {c: b for b, c in _BYTE_TO_CHAR.items()}


@dataclass(frozen=True)
class ExtensionToken:
    token_id: int
    text: str
    decomposition: tuple[int, ...]  # base-vocab ids that re-encode to text


class Vocab:
    """Immutable token inventory: byte tokens, merges, specials, extensions."""

    def __init__(
        self,
        tokens: Sequence[str],
        merges: Sequence[tuple[str, str]],
        extensions: Sequence[tuple[str, tuple[int, ...]]] = (),
    ):
        self.tokens = list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate token in vocab")
        for sp in SPECIALS:
            if sp not in self.token_to_id:
                raise ValueError(f"vocab is missing special token {sp}")
        self.merges = list(merges)
        self.merge_rank = {pair: r for r, pair in enumerate(self.merges)}
        for a, b in self.merges:
            if a + b not in self.token_to_id:
                raise ValueError(f"merge result {a + b!r} not in vocab")
        self.eos_id = self.token_to_id["<eos>"]
        self.pad_id = self.token_to_id["<pad>"]
        self.unk_id = self.token_to_id["<unk>"]
        self.base_size = len(self.tokens)
        self.extensions: dict[str, ExtensionToken] = {}
        self._ext_by_first: dict[str, list[str]] = {}
        for text, decomp in extensions:
            ext_id = self.base_size + len(self.extensions)
            self.extensions[text] = ExtensionToken(ext_id, text, tuple(decomp))
            self._ext_by_first.setdefault(text[0], []).append(text)
        for bucket in self._ext_by_first.values():
            bucket.sort(key=len, reverse=True)
        self._ext_by_id = {e.token_id: e for e in self.extensions.values()}

    def __len__(self) -> int:
        return self.base_size + len(self.extensions)

    # -- encoding -----------------------------------------------------------

    def _apply_merges(self, parts: list[str]) -> list[str]:
        # Merges apply exhaustively in rank order over the whole segment.
        for a, b in self.merges:
            if len(parts) < 2:
                break
            out: list[str] = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == a and parts[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            parts = out
        return parts

    def encode_base(self, text: str) -> list[int]:
        """Byte-level encode, ignoring extension tokens."""
        if not text:
            return []
        parts = [_BYTE_TO_CHAR[b] for b in text.encode("utf-8")]
        return [self.token_to_id[p] for p in self._apply_merges(parts)]

    def encode(self, text: str) -> list[int]:
        """Extension tokens longest-first, byte-level BPE elsewhere."""
        if not self.extensions:
            return self.encode_base(text)
        ids: list[int] = []
        plain_start = 0
        i = 0
        n = len(text)
        while i < n:
            match = None
            for cand in self._ext_by_first.get(text[i], ()):
                if text.startswith(cand, i):
                    match = cand
                    break
            if match is None:
                i += 1
                continue
            if plain_start < i:
                ids.extend(self.encode_base(text[plain_start:i]))
            ids.append(self.extensions[match].token_id)
            i += len(match)
            plain_start = i
        if plain_start < n:
            ids.extend(self.encode_base(text[plain_start:]))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        byte_run: list[int] = []

        def flush() -> None:
            if byte_run:
                out.append(bytes(byte_run).decode("utf-8", errors="replace"))
                byte_run.clear()

        for token_id in ids:
            if token_id in self._ext_by_id:
                flush()
                out.append(self._ext_by_id[token_id].text)
            elif 0 <= token_id < self.base_size:
                tok = self.tokens[token_id]
                if tok in SPECIALS:
                    flush()
                    out.append(tok)
                else:
                    byte_run.extend(_CHAR_TO_BYTE[ch] for ch in tok)
            else:
                raise ValueError(f"unknown token id {token_id}")
        flush()
        return "".join(out)

    # -- persistence ----------------------------------------------------------

    @classmethod
    def load(
        cls,
        vocab_path: Path | str,
        merges_path: Path | str,
        extensions_path: Path | str | None = None,
    ) -> "Vocab":
        tokens = Path(vocab_path).read_text("utf-8").splitlines()
        merges: list[tuple[str, str]] = []
        for line in Path(merges_path).read_text("utf-8").splitlines():
            if not line or line.startswith("#"):
                continue
            a, b = line.split(" ")
            merges.append((a, b))
        vocab = cls(tokens, merges)
        if extensions_path is not None:
            ext_tokens = [
                ln for ln in Path(extensions_path).read_text("utf-8").splitlines() if ln
            ]
            vocab = extend_vocab(vocab, ext_tokens)
        return vocab

    def content_hash(self) -> int:
        h = blake2b(digest_size=8)
        for tok in self.tokens:
            h.update(tok.encode("utf-8") + b"\x00")
        for a, b in self.merges:
            h.update(f"{a} {b}".encode("utf-8") + b"\x01")
        for text in self.extensions:
            h.update(text.encode("utf-8") + b"\x02")
        return int.from_bytes(h.digest(), "little")


def bundled_base_vocab() -> Vocab:
    data = resources.files("datafactory").joinpath("data")
    return Vocab.load(str(data / "base_vocab.txt"), str(data / "base_merges.txt"))


def bundled_extension_tokens() -> list[str]:
    data = resources.files("datafactory").joinpath("data/zh_extension.txt")
    return [ln for ln in data.read_text("utf-8").splitlines() if ln]


def extend_vocab(base: Vocab, new_tokens: Sequence[str]) -> Vocab:
    """Append extension tokens, recording each one's base decomposition.

    Rejects duplicates and tokens that are already atomic (a single base
    token). Extending never changes the encoding of text containing no
    extension substring.
    """
    existing = dict.fromkeys(base.extensions)
    additions: list[tuple[str, tuple[int, ...]]] = [
        (text, base.extensions[text].decomposition) for text in existing
    ]
    seen = set(existing)
    for tok in new_tokens:
        if not tok:
            raise ValueError("extension token must be a nonempty string")
        if tok in seen:
            raise ValueError(f"duplicate extension token {tok!r}")
        decomp = base.encode_base(tok)
        if len(decomp) == 1:
            raise ValueError(f"token {tok!r} is already atomic in the base vocab")
        if not decomp:
            raise ValueError(f"token {tok!r} has an empty decomposition")
        additions.append((tok, tuple(decomp)))
        seen.add(tok)
    return Vocab(base.tokens, base.merges, additions)


def init_extension_embeddings(base_emb: np.ndarray, vocab: Vocab) -> np.ndarray:
    """Rows for extension tokens are the mean of their decomposition rows.

    Base rows are copied unchanged; weights are uniform over constituent
    tokens.
    """
    base_emb = np.asarray(base_emb)
    if base_emb.ndim != 2 or base_emb.shape[0] != vocab.base_size:
        raise ValueError(
            f"embedding rows ({base_emb.shape[0]}) must equal base vocab size ({vocab.base_size})"
        )
    full = np.empty((len(vocab), base_emb.shape[1]), dtype=base_emb.dtype)
    full[: vocab.base_size] = base_emb
    for ext in vocab.extensions.values():
        if not ext.decomposition:
            raise ValueError(f"extension {ext.text!r} has an empty decomposition")
        full[ext.token_id] = base_emb[list(ext.decomposition)].mean(axis=0)
    return full


def save_embeddings(path: Path | str, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())


def load_embeddings(path: Path | str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding file")
        rows, dim = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype=np.float32)
    return data.reshape(rows, dim).copy()


def encoding_efficiency(texts: Iterable[str], vocab_a: Vocab, vocab_b: Vocab) -> float:
    """tokens(a) / tokens(b) over identical text; > 1 means b is denser."""
    tokens_a = 0
    tokens_b = 0
    for text in texts:
        tokens_a += len(vocab_a.encode(text))
        tokens_b += len(vocab_b.encode(text))
    if tokens_b == 0:
        raise ValueError("corpus is empty under vocab_b")
    return tokens_a / tokens_b
