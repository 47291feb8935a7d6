"""Chunk segmentation and aggregation for long passages.

A passage's subword sequence is split into equal contiguous chunks, each
(query, chunk) pair is encoded at its own sequence budget, and the pooled
chunk vectors are combined by additive attention (learned) or
component-wise max before the usual dot-product scoring.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import encoder as enc
from .encoder import EncoderParams, truncated_normal
from .tokenizer import EncodedPair, Vocabulary, encode_ids_pair, tokenize


AGGREGATORS = ("attention", "max")

DEFAULT_ATTENTION_SIZE = 192


@dataclass(frozen=True)
class SegmentationConfig:
    num_chunks: int = 2
    chunk_seq_len: int = 128
    aggregator: str = "attention"
    attention_size: int = DEFAULT_ATTENTION_SIZE

    def __post_init__(self):
        if self.num_chunks < 1:
            raise ValueError(f"num_chunks must be >= 1, got {self.num_chunks}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.attention_size < 1:
            raise ValueError(f"attention_size must be >= 1, got {self.attention_size}")


@dataclass(frozen=True)
class ChunkSet:
    """Contiguous, non-overlapping spans covering a subword sequence."""

    passage_id: str
    spans: tuple[tuple[int, int], ...]
    num_chunks: int


def chunk_sizes(total: int, num_chunks: int) -> list[int]:
    """Equal split with the remainder going to the earliest chunks."""
    base, extra = divmod(total, num_chunks)
    return [base + 1 if i < extra else base for i in range(num_chunks)]


def chunk_passage(subword_ids: Sequence[int], num_chunks: int, passage_id: str = "") -> ChunkSet:
    n = len(subword_ids)
    if n == 0:
        raise ValueError("cannot chunk an empty subword sequence")
    if num_chunks < 1:
        raise ValueError(f"num_chunks must be >= 1, got {num_chunks}")
    if num_chunks > n:
        raise ValueError(f"num_chunks {num_chunks} exceeds sequence length {n}")
    spans = []
    start = 0
    for size in chunk_sizes(n, num_chunks):
        spans.append((start, start + size))
        start += size
    return ChunkSet(passage_id=passage_id, spans=tuple(spans), num_chunks=num_chunks)


class AttentionPoolParams:
    """Additive-attention pooling parameters: context u, projection W, bias b."""

    def __init__(self, hidden_dim: int, attention_size: int = DEFAULT_ATTENTION_SIZE, seed: int = 0):
        if attention_size < 1:
            raise ValueError(f"attention_size must be >= 1, got {attention_size}")
        rng = np.random.default_rng(seed)
        self.attention_size = attention_size
        self.hidden_dim = hidden_dim
        self.W_a = truncated_normal(rng, (attention_size, hidden_dim))
        self.b_a = np.zeros(attention_size)
        self.u_a = truncated_normal(rng, (attention_size,))

    def tensors(self) -> dict[str, np.ndarray]:
        return {"seg.W_a": self.W_a, "seg.b_a": self.b_a, "seg.u_a": self.u_a}


def attention_weights(ap: AttentionPoolParams, chunk_vectors: np.ndarray) -> np.ndarray:
    """Softmax weights alpha_i from u . tanh(W h_i + b)."""
    h = np.atleast_2d(np.asarray(chunk_vectors, dtype=np.float64))
    if h.shape[0] < 1:
        raise ValueError("attention pooling needs at least one chunk vector")
    scores = np.tanh(h @ ap.W_a.T + ap.b_a) @ ap.u_a
    m = scores.max()
    e = np.exp(scores - m)
    return e / e.sum()


def attention_pool(ap: AttentionPoolParams, chunk_vectors: np.ndarray) -> np.ndarray:
    """Convex combination of chunk vectors under the learned weights."""
    h = np.atleast_2d(np.asarray(chunk_vectors, dtype=np.float64))
    return attention_weights(ap, h) @ h


def attention_pool_grads(
    ap: AttentionPoolParams, chunk_vectors: np.ndarray, dout: np.ndarray
):
    """Backward pass of attention_pool.

    Returns (dchunks, dW_a, db_a, du_a) for upstream gradient ``dout`` on
    the pooled vector.
    """
    h = np.atleast_2d(np.asarray(chunk_vectors, dtype=np.float64))
    pre = h @ ap.W_a.T + ap.b_a  # (C, A)
    t = np.tanh(pre)
    scores = t @ ap.u_a
    m = scores.max()
    e = np.exp(scores - m)
    alphas = e / e.sum()

    dalphas = h @ dout
    dchunks = alphas[:, None] * dout[None, :]
    dscores = alphas * (dalphas - float(alphas @ dalphas))
    du_a = t.T @ dscores
    dpre = dscores[:, None] * ap.u_a[None, :] * (1.0 - t * t)
    dW_a = dpre.T @ h
    db_a = dpre.sum(axis=0)
    dchunks += dpre @ ap.W_a
    return dchunks, dW_a, db_a, du_a


def max_pool(chunk_vectors: np.ndarray) -> np.ndarray:
    """Component-wise maximum over chunk vectors."""
    h = np.atleast_2d(np.asarray(chunk_vectors, dtype=np.float64))
    if h.shape[0] < 1:
        raise ValueError("max pooling needs at least one chunk vector")
    return h.max(axis=0)


def max_pool_grads(chunk_vectors: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Subgradient of max_pool: routes to the first maximizer per component."""
    h = np.atleast_2d(np.asarray(chunk_vectors, dtype=np.float64))
    winners = h.argmax(axis=0)
    dchunks = np.zeros_like(h)
    dchunks[winners, np.arange(h.shape[1])] = dout
    return dchunks


def aggregate(
    ap: AttentionPoolParams | None, chunk_vectors: np.ndarray, aggregator: str
) -> np.ndarray:
    if aggregator == "attention":
        if ap is None:
            raise ValueError("attention aggregation requires AttentionPoolParams")
        return attention_pool(ap, chunk_vectors)
    if aggregator == "max":
        return max_pool(chunk_vectors)
    raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")


def encode_chunks(
    query_ids: list[int],
    passage_ids: list[int],
    num_chunks: int,
    chunk_seq_len: int,
    query_name: str | None = None,
) -> list[EncodedPair]:
    """Encode one (query, chunk) pair per chunk.

    ``num_chunks`` is clamped to the passage length so very short passages
    still encode (with fewer chunks).
    """
    if not passage_ids:
        return [encode_ids_pair(query_ids, [], chunk_seq_len, query_name)]
    chunks = chunk_passage(passage_ids, min(num_chunks, len(passage_ids)))
    return [
        encode_ids_pair(query_ids, passage_ids[a:b], chunk_seq_len, query_name)
        for a, b in chunks.spans
    ]


def score_segmented(
    params: EncoderParams,
    head,
    ap: AttentionPoolParams | None,
    vocab: Vocabulary,
    query_text: str,
    passage_text: str,
    num_chunks: int,
    chunk_seq_len: int,
    aggregator: str = "attention",
    query_name: str | None = None,
) -> float:
    """Score one passage through the chunk-and-aggregate path.

    With one chunk and the full sequence budget this reduces exactly to
    the unsegmented pair score.
    """
    head.require_pairwise()
    pairs = encode_chunks(
        tokenize(vocab, query_text),
        tokenize(vocab, passage_text),
        num_chunks,
        chunk_seq_len,
        query_name,
    )
    pooled, _ = enc.forward_pooled(params, pairs)
    return float(aggregate(ap, pooled, aggregator) @ head.v)


def score_candidates_segmented(
    params: EncoderParams,
    head,
    ap: AttentionPoolParams | None,
    vocab: Vocabulary,
    query_text: str,
    passage_texts: Sequence[str],
    num_chunks: int,
    chunk_seq_len: int,
    aggregator: str = "attention",
    query_name: str | None = None,
) -> np.ndarray:
    """Segmented scores for a whole candidate list (one forward per passage)."""
    return np.array(
        [
            score_segmented(
                params, head, ap, vocab, query_text, text,
                num_chunks, chunk_seq_len, aggregator, query_name,
            )
            for text in passage_texts
        ]
    )
