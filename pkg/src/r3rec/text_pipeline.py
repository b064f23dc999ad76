"""Review text to fixed-length token-ID sequences backed by pretrained word vectors.

Index 0 is reserved for padding and its embedding row is the zero vector;
no gradient ever flows into the embedding matrix (it is a frozen input).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import Parameter

log = logging.getLogger(__name__)

PAD_ID = 0
PAD_WORD = "<pad>"
MIN_REVIEW_TOKENS = 3  # entries below this floor carry no usable signal

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class VectorFormatError(ValueError):
    """Word-vector file does not match the declared format."""


@dataclass
class Vocab:
    """word -> contiguous index table; index 0 is padding only."""

    index: dict

    def __len__(self) -> int:
        return len(self.index) + 1  # plus the padding slot

    def get(self, word: str):
        return self.index.get(word)

    def words(self) -> list:
        return sorted(self.index, key=self.index.get)

    @classmethod
    def from_words(cls, words) -> "Vocab":
        index = {}
        for w in words:
            if w not in index:
                index[w] = len(index) + 1
        return cls(index)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w in self.words():
                f.write(f"{w}\t{self.index[w]}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        index = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                word, idx = line.rstrip("\n").split("\t")
                index[word] = int(idx)
        return cls(index)


@dataclass
class ReviewEntry:
    """One regularization record: item, padded token ids, validity mask, rating."""

    item: int
    tokens: np.ndarray  # (L,) int64, 0-padded
    mask: np.ndarray  # (L,) bool, True at real tokens
    rating: float


def tokenize(text: str) -> list:
    """Lowercase and split on any non-alphanumeric run."""
    return _TOKEN_RE.findall(text.lower())


def encode_review(text: str, vocab: Vocab, max_len: int):
    """Token ids + mask for one review, or None if fewer than 3 known words survive.

    Out-of-vocabulary words are dropped (not mapped to an UNK id), then the
    sequence is truncated to max_len and right-padded with 0.
    """
    if max_len < MIN_REVIEW_TOKENS:
        raise ValueError(f"encode_review: max_len must be >= {MIN_REVIEW_TOKENS}")
    ids = [vocab.index[w] for w in tokenize(text) if w in vocab.index]
    if len(ids) < MIN_REVIEW_TOKENS:
        return None
    ids = ids[:max_len]
    tokens = np.zeros(max_len, dtype=np.int64)
    tokens[: len(ids)] = ids
    mask = tokens != PAD_ID
    return tokens, mask


def build_review_set(splits, vocab: Vocab, max_len: int) -> list:
    """One ReviewEntry per train-split rating whose text encodes successfully.

    Validation/test reviews are never included (no leakage into training).
    """
    out = []
    texts = getattr(splits, "train_texts", None)
    if texts is None:
        return out
    for triple, text in zip(splits.train, texts):
        if not text:
            continue
        enc = encode_review(text, vocab, max_len)
        if enc is None:
            continue
        tokens, mask = enc
        out.append(ReviewEntry(item=triple.item, tokens=tokens, mask=mask, rating=triple.rating))
    return out


def review_store_by_item(entries) -> dict:
    """Item-keyed view of the regularization set."""
    store: dict = {}
    for e in entries:
        store.setdefault(e.item, []).append(e)
    return store


def save_review_store(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            rec = {"item": e.item, "tokens": e.tokens.tolist(), "rating": e.rating}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_review_store(path) -> list:
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            tokens = np.asarray(rec["tokens"], dtype=np.int64)
            entries.append(
                ReviewEntry(
                    item=int(rec["item"]),
                    tokens=tokens,
                    mask=tokens != PAD_ID,
                    rating=float(rec["rating"]),
                )
            )
    return entries


# --- word-vector sources ------------------------------------------------------


def _with_padding_row(words, rows, dim: int):
    matrix = np.zeros((len(rows) + 1, dim), dtype=np.float64)
    for i, row in enumerate(rows):
        matrix[i + 1] = row
    vocab = Vocab({w: i + 1 for i, w in enumerate(words)})
    emb = Parameter(matrix, trainable=False, name="word_embeddings")
    return vocab, emb


def load_word_vectors(path, fmt: str = "text", expect_dim: int | None = None):
    """Load a word2vec file; returns (Vocab, frozen embedding Parameter).

    Text format: header "count dim", then "word v1 ... v_dim" lines.
    Binary format: same header line, then word bytes terminated by a space
    followed by dim little-endian float32 values per record.
    """
    if fmt == "text":
        words, rows, dim = _read_vec_text(path)
    elif fmt == "binary":
        words, rows, dim = _read_vec_binary(path)
    else:
        raise ValueError(f"load_word_vectors: unknown format {fmt!r}")
    if expect_dim is not None and dim != expect_dim:
        raise VectorFormatError(
            f"{path}: vector dim {dim} does not match configured dim {expect_dim}"
        )
    return _with_padding_row(words, rows, dim)


def _dedup(words, rows, path):
    seen = {}
    for w, r in zip(words, rows):
        if w in seen:
            log.warning("%s: duplicate word %r, last occurrence wins", path, w)
        seen[w] = r
    return list(seen.keys()), list(seen.values())


def _read_vec_text(path):
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise VectorFormatError(f"{path}: malformed header {header!r}")
        count, dim = int(header[0]), int(header[1])
        words, rows = [], []
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise VectorFormatError(
                    f"{path}:{lineno}: expected word + {dim} floats, got {len(parts) - 1}"
                )
            words.append(parts[0])
            rows.append(np.array([float(v) for v in parts[1:]], dtype=np.float64))
    if len(words) != count:
        raise VectorFormatError(f"{path}: header says {count} words, file has {len(words)}")
    words, rows = _dedup(words, rows, path)
    return words, rows, dim


def _read_vec_binary(path):
    with open(path, "rb") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise VectorFormatError(f"{path}: malformed binary header {header!r}")
        count, dim = int(header[0]), int(header[1])
        vec_bytes = 4 * dim
        words, rows = [], []
        for n in range(count):
            chars = []
            while True:
                ch = f.read(1)
                if not ch:
                    raise VectorFormatError(f"{path}: truncated at record {n}")
                if ch == b" ":
                    break
                if ch != b"\n":  # newlines between records are layout, not word chars
                    chars.append(ch)
            raw = f.read(vec_bytes)
            if len(raw) != vec_bytes:
                raise VectorFormatError(f"{path}: truncated vector at record {n}")
            words.append(b"".join(chars).decode("utf-8"))
            rows.append(
                np.array(struct.unpack(f"<{dim}f", raw), dtype=np.float64)
            )
    words, rows = _dedup(words, rows, path)
    return words, rows, dim


def write_vec_binary(path, words, matrix) -> None:
    """Write the binary word2vec layout (test fixtures and round-trip checks)."""
    matrix = np.asarray(matrix, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(f"{len(words)} {matrix.shape[1]}\n".encode())
        for w, row in zip(words, matrix):
            f.write(w.encode("utf-8") + b" ")
            f.write(struct.pack(f"<{matrix.shape[1]}f", *row))
            f.write(b"\n")


def pseudo_vectors(words, dim: int, seed: int = 0):
    """Deterministic stand-in for pretrained vectors: hash of word -> unit-norm row.

    Lets the full stack run without the multi-gigabyte pretrained file; the
    same word always maps to the same vector for a given seed.
    """
    words = sorted(set(words))
    rows = []
    for w in words:
        digest = hashlib.sha256(f"{seed}:{w}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(dim)
        rows.append(v / np.linalg.norm(v))
    return _with_padding_row(words, rows, dim)


def corpus_words(texts) -> list:
    """All distinct tokens across a text corpus (pseudo-embedding vocabulary)."""
    seen = set()
    for t in texts:
        if t:
            seen.update(tokenize(t))
    return sorted(seen)
