"""Synthetic token-overlap corpus for end-to-end training checks.

Each query gets a fixed-size candidate pool; the single relevant candidate
is the one sharing the most tokens with the query (all of them, by
construction), the rest share at most one. Candidate order is shuffled so
an untrained scorer sits at the random-guess floor.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import Dataset, Judgment, Passage, Query
from .retrieval import Candidates


@dataclass(frozen=True)
class SyntheticCorpus:
    dataset: Dataset
    candidates: dict[str, Candidates]


def generate_overlap_corpus(
    num_queries: int = 200,
    num_candidates: int = 10,
    vocab_words: int = 25,
    query_len: int = 5,
    passage_len: int = 6,
    seed: int = 0,
) -> SyntheticCorpus:
    if query_len >= vocab_words:
        raise ValueError("query_len must be smaller than vocab_words")
    rng = random.Random(seed)
    words = [f"w{i:02d}" for i in range(vocab_words)]

    queries, passages, judgments = [], [], []
    candidates: dict[str, Candidates] = {}
    for qi in range(num_queries):
        qid = f"q{qi:04d}"
        q_words = rng.sample(words, query_len)
        queries.append(Query(qid, " ".join(q_words)))
        others = [w for w in words if w not in q_words]

        pool = []
        for ci in range(num_candidates):
            pid = f"{qid}-p{ci}"
            if ci == 0:
                # relevant candidate keeps the query's word order (echoes
                # how answers restate the question) and pads with noise
                body = list(q_words) + rng.sample(others, passage_len - query_len)
                grade = 1
            else:
                overlap = rng.choice((0, 1))
                body = rng.sample(q_words, overlap) + rng.sample(
                    others, passage_len - overlap
                )
                rng.shuffle(body)
                grade = 0
            passages.append(Passage(pid, " ".join(body)))
            judgments.append(Judgment(qid, pid, grade))
            pool.append(pid)

        rng.shuffle(pool)
        ranked = [(pid, float(num_candidates - i)) for i, pid in enumerate(pool)]
        candidates[qid] = Candidates(query_id=qid, ranked=ranked)

    dataset = Dataset(queries, passages, judgments)
    return SyntheticCorpus(dataset=dataset, candidates=candidates)
