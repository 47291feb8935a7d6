"""Data model and file ingestion for re-ranking datasets.

Queries and passages live in JSON-lines files (one object per line with
``id`` and ``text`` fields); judgments live in a tab-separated qrels file
``query_id<TAB>passage_id<TAB>grade``, one row per judged pair. All files
are UTF-8; ids must not contain tabs or newlines.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Iterable


GRADES = (0, 1, 2, 3, 4)


class ParseError(ValueError):
    """A data file line could not be parsed."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class IntegrityError(ValueError):
    """Records violate dataset-level constraints (duplicates, dangling ids)."""


def _check_id(record_id: str, what: str) -> str:
    if not record_id:
        raise ValueError(f"{what} id must be non-empty")
    if "\t" in record_id or "\n" in record_id or "\r" in record_id:
        raise ValueError(f"{what} id {record_id!r} contains tab or newline")
    return record_id


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        _check_id(self.id, "query")
        if not self.text:
            raise ValueError(f"query {self.id!r} has empty text")


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    token_count: int = field(init=False, default=0)

    def __post_init__(self):
        _check_id(self.id, "passage")
        if not self.text:
            raise ValueError(f"passage {self.id!r} has empty text")
        object.__setattr__(self, "token_count", len(self.text.split()))


@dataclass(frozen=True)
class Judgment:
    query_id: str
    passage_id: str
    grade: int

    def __post_init__(self):
        if self.grade not in GRADES:
            raise ValueError(
                f"grade {self.grade!r} for ({self.query_id}, {self.passage_id}) "
                f"outside {GRADES[0]}..{GRADES[-1]}"
            )


class Dataset:
    """Immutable collection of queries, passages, and graded judgments.

    A passage counts as positive for a query when its grade is at least
    ``positivity_threshold`` (default 1, i.e. any grade above zero).
    """

    def __init__(
        self,
        queries: Iterable[Query],
        passages: Iterable[Passage],
        judgments: Iterable[Judgment],
        positivity_threshold: int = 1,
    ):
        self.queries: dict[str, Query] = {}
        self.passages: dict[str, Passage] = {}
        for q in queries:
            if q.id in self.queries:
                raise IntegrityError(f"duplicate query id {q.id!r}")
            self.queries[q.id] = q
        for p in passages:
            if p.id in self.passages:
                raise IntegrityError(f"duplicate passage id {p.id!r}")
            self.passages[p.id] = p

        self.judgments: list[Judgment] = []
        self._grades: dict[str, dict[str, int]] = {}
        for j in judgments:
            if j.query_id not in self.queries:
                raise IntegrityError(f"judgment references unknown query {j.query_id!r}")
            if j.passage_id not in self.passages:
                raise IntegrityError(f"judgment references unknown passage {j.passage_id!r}")
            per_query = self._grades.setdefault(j.query_id, {})
            if j.passage_id in per_query:
                raise IntegrityError(
                    f"duplicate judgment for ({j.query_id!r}, {j.passage_id!r})"
                )
            per_query[j.passage_id] = j.grade
            self.judgments.append(j)

        self.positivity_threshold = int(positivity_threshold)

    def query_ids(self) -> list[str]:
        return list(self.queries)

    def grades_for(self, query_id: str) -> dict[str, int]:
        """Judged passage ids and grades for one query (may be empty)."""
        return dict(self._grades.get(query_id, {}))

    def positive_ids(self, query_id: str) -> list[str]:
        thr = self.positivity_threshold
        return [p for p, g in self._grades.get(query_id, {}).items() if g >= thr]

    def is_positive(self, query_id: str, passage_id: str) -> bool:
        return self._grades.get(query_id, {}).get(passage_id, 0) >= self.positivity_threshold


@dataclass(frozen=True)
class CorpusStats:
    num_queries: int
    num_passages: int
    min_tokens: int | None
    max_tokens: int | None
    avg_tokens: float | None


@dataclass(frozen=True)
class FoldAssignment:
    """Total map query_id -> fold index, balanced to within one query."""

    num_folds: int
    assignment: dict[str, int]
    seed: int

    def fold_of(self, query_id: str) -> int:
        return self.assignment[query_id]

    def queries_in_fold(self, fold: int) -> list[str]:
        return sorted(q for q, f in self.assignment.items() if f == fold)

    def queries_outside_fold(self, fold: int) -> list[str]:
        return sorted(q for q, f in self.assignment.items() if f != fold)


def _parse_record_line(path, line_no: int, line: str, seen: set[str], what: str):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
        raise ParseError(path, line_no, "record must be an object with 'id' and 'text'")
    rid, text = obj["id"], obj["text"]
    if not isinstance(rid, str) or not isinstance(text, str):
        raise ParseError(path, line_no, "'id' and 'text' must be strings")
    if rid in seen:
        raise ParseError(path, line_no, f"duplicate {what} id {rid!r}")
    seen.add(rid)
    return rid, text


def _load_records(path, what: str, factory):
    out = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip("\n")
            if not line.strip():
                continue
            rid, text = _parse_record_line(path, line_no, line, seen, what)
            try:
                out.append(factory(rid, text))
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from exc
    return out


def load_dataset(
    queries_path,
    passages_path,
    qrels_path,
    positivity_threshold: int = 1,
) -> Dataset:
    """Load a dataset from its three files, validating ids and references."""
    queries = _load_records(queries_path, "query", Query)
    passages = _load_records(passages_path, "passage", Passage)

    judgments = []
    with open(qrels_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(qrels_path, line_no, "expected query_id<TAB>passage_id<TAB>grade")
            qid, pid, grade_str = parts
            try:
                grade = int(grade_str)
            except ValueError as exc:
                raise ParseError(qrels_path, line_no, f"grade {grade_str!r} is not an integer") from exc
            try:
                judgments.append(Judgment(qid, pid, grade))
            except ValueError as exc:
                raise ParseError(qrels_path, line_no, str(exc)) from exc

    return Dataset(queries, passages, judgments, positivity_threshold)


def save_dataset(dataset: Dataset, queries_path, passages_path, qrels_path) -> None:
    """Write a dataset back to the three documented file formats."""
    with open(queries_path, "w", encoding="utf-8") as fh:
        for q in dataset.queries.values():
            fh.write(json.dumps({"id": q.id, "text": q.text}, ensure_ascii=False) + "\n")
    with open(passages_path, "w", encoding="utf-8") as fh:
        for p in dataset.passages.values():
            fh.write(json.dumps({"id": p.id, "text": p.text}, ensure_ascii=False) + "\n")
    with open(qrels_path, "w", encoding="utf-8") as fh:
        for j in dataset.judgments:
            fh.write(f"{j.query_id}\t{j.passage_id}\t{j.grade}\n")


def stats(dataset: Dataset) -> CorpusStats:
    """Counts and passage-length summary (whitespace tokens)."""
    counts = [p.token_count for p in dataset.passages.values()]
    if not counts:
        return CorpusStats(len(dataset.queries), 0, None, None, None)
    return CorpusStats(
        num_queries=len(dataset.queries),
        num_passages=len(counts),
        min_tokens=min(counts),
        max_tokens=max(counts),
        avg_tokens=sum(counts) / len(counts),
    )


def split_folds(dataset: Dataset, num_folds: int, seed: int) -> FoldAssignment:
    """Deterministic balanced partition of query ids into folds."""
    qids = sorted(dataset.queries)
    if num_folds < 2:
        raise ValueError(f"num_folds must be >= 2, got {num_folds}")
    if num_folds > len(qids):
        raise ValueError(f"num_folds {num_folds} exceeds query count {len(qids)}")
    rng = random.Random(seed)
    rng.shuffle(qids)
    assignment = {qid: i % num_folds for i, qid in enumerate(qids)}
    return FoldAssignment(num_folds=num_folds, assignment=assignment, seed=seed)


def estimate_length_distribution(positives: list[Passage]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation of positive passage lengths."""
    if len(positives) < 2:
        raise ValueError("need at least 2 passages to estimate a length distribution")
    counts = [p.token_count for p in positives]
    mu = sum(counts) / len(counts)
    var = sum((c - mu) ** 2 for c in counts) / (len(counts) - 1)
    return mu, math.sqrt(var)


def split_negative_sequences(
    sequence: Passage, mu: float, sigma: float, seed: int
) -> list[Passage]:
    """Cut a long irrelevant sequence into passage-sized chunks.

    Chunk lengths are drawn from Normal(mu, sigma), rounded to the nearest
    integer, and clipped to [1, tokens remaining]; the chunks concatenate
    back to the original token stream.
    """
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    tokens = sequence.text.split()
    if not tokens:
        return []
    rng = random.Random(seed)
    out = []
    pos = 0
    while pos < len(tokens):
        remaining = len(tokens) - pos
        size = int(math.floor(rng.gauss(mu, sigma) + 0.5))
        size = max(1, min(size, remaining))
        out.append(tokens[pos : pos + size])
        pos += size
    return [
        Passage(id=f"{sequence.id}#{i}", text=" ".join(chunk))
        for i, chunk in enumerate(out)
    ]
