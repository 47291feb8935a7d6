"""Corpus-trained subword vocabulary and pair encoding.

The vocabulary holds frequent whole words plus character-level subwords
(continuations carry a ``##`` prefix) so any string is encodable. Encoding
a (query, passage) pair produces the fixed-length frame
``[CLS] q-tokens [SEP] p-tokens [SEP] [PAD]*`` with segment ids and a
padding mask.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np


PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
CONTINUATION = "##"


class EncodingError(ValueError):
    """A pair cannot be framed within the requested sequence length."""


class Vocabulary:
    """Dense token-id table with reserved ids 0..3 for [PAD]/[UNK]/[CLS]/[SEP]."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index[token]

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.tokens:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


def _words(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(texts: Iterable[str], max_size: int, min_freq: int = 1) -> Vocabulary:
    """Train a vocabulary: character subwords first, then frequent whole words.

    Character tokens (word-initial chars plus ``##``-prefixed continuation
    chars) guarantee coverage; remaining budget goes to whole words with
    frequency >= min_freq, most frequent first (ties by first occurrence).
    """
    if max_size < 4:
        raise ValueError(f"max_size must be at least 4, got {max_size}")
    word_counts: Counter[str] = Counter()
    char_counts: Counter[str] = Counter()
    for text in texts:
        for word in _words(text):
            word_counts[word] += 1
            for pos, ch in enumerate(word):
                char_counts[ch if pos == 0 else CONTINUATION + ch] += 1

    tokens = list(RESERVED_TOKENS)
    budget = max_size - len(tokens)
    present = set(tokens)
    for ch, _ in char_counts.most_common():
        if budget <= 0:
            break
        if ch not in present:
            tokens.append(ch)
            present.add(ch)
            budget -= 1
    for word, count in word_counts.most_common():
        if budget <= 0:
            break
        if count < min_freq or word in present:
            continue
        tokens.append(word)
        present.add(word)
        budget -= 1
    return Vocabulary(tokens)


def _match_word(vocab: Vocabulary, word: str) -> list[int]:
    """Greedy longest-match-first segmentation of one word into subword ids."""
    ids = []
    start = 0
    n = len(word)
    while start < n:
        end = n
        found = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            idx = vocab.index.get(piece)
            if idx is not None and idx > SEP_ID:
                found = idx
                break
            end -= 1
        if found is None:
            ids.append(UNK_ID)
            start += 1
        else:
            ids.append(found)
            start = end
    return ids


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    """Lowercase, split on whitespace, and segment each word greedily.

    Characters with no vocabulary entry map to [UNK]; never emits
    [CLS]/[SEP]/[PAD].
    """
    ids: list[int] = []
    for word in _words(text):
        ids.extend(_match_word(vocab, word))
    return ids


def decode_tokens(vocab: Vocabulary, ids: Iterable[int]) -> list[str]:
    return [vocab.token_of(i) for i in ids]


@dataclass(frozen=True)
class EncodedPair:
    """One framed (query, passage-or-chunk) pair at a fixed sequence length."""

    token_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray
    seq_len: int

    @property
    def num_real(self) -> int:
        return int(self.mask.sum())


def encode_ids_pair(
    query_ids: list[int], passage_ids: list[int], seq_len: int, query_name: str | None = None
) -> EncodedPair:
    """Frame pre-tokenized query and passage ids at ``seq_len``.

    The passage is truncated from the tail to fit; the query is never
    truncated and the final [SEP] is always kept.
    """
    budget = seq_len - 3 - len(query_ids)
    if budget < 1:
        who = f"query {query_name!r}" if query_name is not None else "query"
        raise EncodingError(
            f"{who} with {len(query_ids)} tokens leaves no passage budget at seq_len {seq_len}"
        )
    kept = passage_ids[:budget]
    real = [CLS_ID] + list(query_ids) + [SEP_ID] + list(kept) + [SEP_ID]
    n = len(real)
    token_ids = np.full(seq_len, PAD_ID, dtype=np.int64)
    token_ids[:n] = real
    segment_ids = np.ones(seq_len, dtype=np.int64)
    segment_ids[: len(query_ids) + 2] = 0
    mask = np.zeros(seq_len, dtype=np.int64)
    mask[:n] = 1
    return EncodedPair(token_ids=token_ids, segment_ids=segment_ids, mask=mask, seq_len=seq_len)


def encode_pair(
    vocab: Vocabulary,
    query: str,
    passage: str,
    seq_len: int,
    query_name: str | None = None,
) -> EncodedPair:
    """Tokenize and frame one (query, passage) pair."""
    return encode_ids_pair(tokenize(vocab, query), tokenize(vocab, passage), seq_len, query_name)
