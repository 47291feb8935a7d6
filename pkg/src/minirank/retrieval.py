"""Inverted-index BM25 first-stage retriever.

Terms are lowercased word characters (split on whitespace and punctuation),
deliberately decoupled from the subword tokenizer. The idf uses the
non-negative variant ln(1 + (N - df + 0.5)/(df + 0.5)).

Index file layout (little-endian, see docs/file-formats.md):
  magic b"MRIX" | version u32 | num_docs u32 | k1 f64 | b f64
  per doc:  id_len u32, id utf-8, doc_length u32
  num_terms u32
  per term: term_len u32, term utf-8, n_postings u32, n x (doc_idx u32, tf u32)
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from typing import Iterable

from .corpus import Passage, Query


MAGIC = b"MRIX"
VERSION = 1

_TERM_RE = re.compile(r"\w+")


def index_terms(text: str) -> list[str]:
    """Lowercased word-character runs; whitespace and punctuation split."""
    return _TERM_RE.findall(text.lower())


@dataclass(frozen=True)
class Candidates:
    """Per-query first-stage result: (passage_id, bm25_score), best first."""

    query_id: str
    ranked: list[tuple[str, float]]

    def passage_ids(self) -> list[str]:
        return [pid for pid, _ in self.ranked]


class InvertedIndex:
    def __init__(self, k1: float = 1.2, b: float = 0.75):
        if k1 <= 0:
            raise ValueError(f"k1 must be positive, got {k1}")
        if not 0.0 <= b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {b}")
        self.k1 = float(k1)
        self.b = float(b)
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_lengths: dict[str, int] = {}
        self.avg_doc_length = 0.0

    @property
    def num_docs(self) -> int:
        return len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.num_docs
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def term_frequency(self, term: str, passage_id: str) -> int:
        for pid, tf in self.postings.get(term, ()):
            if pid == passage_id:
                return tf
        return 0


def build_index(passages: Iterable[Passage], k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    idx = InvertedIndex(k1=k1, b=b)
    term_docs: dict[str, dict[str, int]] = {}
    for p in passages:
        if p.id in idx.doc_lengths:
            raise ValueError(f"duplicate passage id {p.id!r}")
        terms = index_terms(p.text)
        idx.doc_lengths[p.id] = len(terms)
        for t in terms:
            term_docs.setdefault(t, {}).setdefault(p.id, 0)
            term_docs[t][p.id] += 1
    for t in sorted(term_docs):
        idx.postings[t] = sorted(term_docs[t].items())
    if idx.doc_lengths:
        idx.avg_doc_length = sum(idx.doc_lengths.values()) / len(idx.doc_lengths)
    return idx


def _term_weight(idx: InvertedIndex, tf: int, doc_len: int) -> float:
    norm = 1.0 - idx.b + idx.b * (doc_len / idx.avg_doc_length)
    return tf * (idx.k1 + 1.0) / (tf + idx.k1 * norm)


def bm25_score(idx: InvertedIndex, query_terms: list[str], passage_id: str) -> float:
    """BM25 score of one passage for a bag of query terms (repeats count)."""
    if passage_id not in idx.doc_lengths:
        raise ValueError(f"unknown passage id {passage_id!r}")
    doc_len = idx.doc_lengths[passage_id]
    score = 0.0
    for term in query_terms:
        tf = idx.term_frequency(term, passage_id)
        if tf == 0:
            continue
        score += idx.idf(term) * _term_weight(idx, tf, doc_len)
    return score


def top_k(idx: InvertedIndex, query: Query, k: int) -> Candidates:
    """The k highest-scoring passages; zero-score passages excluded.

    Ordering: score descending, ties by ascending passage id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores: dict[str, float] = {}
    for term in index_terms(query.text):
        postings = idx.postings.get(term)
        if not postings:
            continue
        w_idf = idx.idf(term)
        for pid, tf in postings:
            scores[pid] = scores.get(pid, 0.0) + w_idf * _term_weight(
                idx, tf, idx.doc_lengths[pid]
            )
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return Candidates(query_id=query.id, ranked=ranked)


def save_index(idx: InvertedIndex, path) -> None:
    doc_ids = list(idx.doc_lengths)
    doc_pos = {pid: i for i, pid in enumerate(doc_ids)}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIdd", VERSION, len(doc_ids), idx.k1, idx.b))
        for pid in doc_ids:
            raw = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", idx.doc_lengths[pid]))
        fh.write(struct.pack("<I", len(idx.postings)))
        for term, postings in idx.postings.items():
            raw = term.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", len(postings)))
            for pid, tf in postings:
                fh.write(struct.pack("<II", doc_pos[pid], tf))


def load_index(path) -> InvertedIndex:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not an index file (bad magic {magic!r})")
        version, num_docs, k1, b = struct.unpack("<IIdd", fh.read(24))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        idx = InvertedIndex(k1=k1, b=b)
        doc_ids = []
        for _ in range(num_docs):
            (id_len,) = struct.unpack("<I", fh.read(4))
            pid = fh.read(id_len).decode("utf-8")
            (doc_len,) = struct.unpack("<I", fh.read(4))
            idx.doc_lengths[pid] = doc_len
            doc_ids.append(pid)
        (num_terms,) = struct.unpack("<I", fh.read(4))
        for _ in range(num_terms):
            (term_len,) = struct.unpack("<I", fh.read(4))
            term = fh.read(term_len).decode("utf-8")
            (n_postings,) = struct.unpack("<I", fh.read(4))
            postings = []
            for _ in range(n_postings):
                doc_idx, tf = struct.unpack("<II", fh.read(8))
                postings.append((doc_ids[doc_idx], tf))
            idx.postings[term] = postings
    if idx.doc_lengths:
        idx.avg_doc_length = sum(idx.doc_lengths.values()) / len(idx.doc_lengths)
    return idx
