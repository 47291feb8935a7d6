"""IR metrics, the re-ranking evaluation protocol, and run-file IO.

Per-query metrics are P@1, average precision (denominator = all relevant
passages judged for the query, the TREC convention), and reciprocal rank.
Means are taken over queries with at least one relevant passage; the rest
are reported separately. Run files use the standard six-column format
``query_id Q0 passage_id rank score tag``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import Dataset, FoldAssignment


class CrossValidationError(RuntimeError):
    """Training failed inside a cross-validation fold."""


@dataclass(frozen=True)
class RankedEntry:
    passage_id: str
    score: float
    relevant: bool


@dataclass(frozen=True)
class RankedList:
    """One query's ranking under evaluation.

    ``num_relevant`` is the total number of relevant passages judged for
    the query (retrieved or not); it defaults to the count in the list.
    """

    query_id: str
    entries: tuple[RankedEntry, ...]
    num_relevant: int = -1

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.passage_id in seen:
                raise ValueError(f"duplicate passage {e.passage_id!r} in ranking for {self.query_id!r}")
            seen.add(e.passage_id)
        if self.num_relevant < 0:
            object.__setattr__(self, "num_relevant", sum(e.relevant for e in self.entries))


def make_ranked_list(
    query_id: str,
    scored: Sequence[tuple[str, float]],
    relevant_ids: set[str],
    num_relevant: int | None = None,
) -> RankedList:
    entries = tuple(
        RankedEntry(pid, float(score), pid in relevant_ids) for pid, score in scored
    )
    total = len(relevant_ids) if num_relevant is None else num_relevant
    return RankedList(query_id=query_id, entries=entries, num_relevant=total)


def inject_gold(ranked: RankedList, gold_ids: set[str], k: int) -> RankedList:
    """Place one known-relevant passage at position k when the top-k missed all.

    The lowest gold id is injected (determinism); it replaces the k-th
    entry, or is appended when the list is shorter than k. Lists already
    containing a gold passage in the top-k pass through unchanged.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not gold_ids:
        return ranked
    if any(e.passage_id in gold_ids for e in ranked.entries[:k]):
        return ranked
    gold = min(gold_ids)
    if len(ranked.entries) >= k:
        kept = ranked.entries[: k - 1]
    else:
        kept = ranked.entries
    score = kept[-1].score if kept else 0.0
    entries = kept + (RankedEntry(gold, score, True),)
    return RankedList(query_id=ranked.query_id, entries=entries, num_relevant=ranked.num_relevant)


def precision_at_1(ranked: RankedList) -> float:
    """1.0 when the top entry is relevant; 0.0 otherwise (also when empty)."""
    if not ranked.entries:
        return 0.0
    return 1.0 if ranked.entries[0].relevant else 0.0


def average_precision(ranked: RankedList) -> float:
    """Mean precision at each relevant rank, over all relevant for the query.

    Relevant passages missing from the list contribute zero; a query with
    no relevant passages at all scores 0 (callers exclude such queries
    from means).
    """
    if ranked.num_relevant <= 0:
        return 0.0
    hits = 0
    total = 0.0
    for rank, entry in enumerate(ranked.entries, start=1):
        if entry.relevant:
            hits += 1
            total += hits / rank
    return total / ranked.num_relevant


def reciprocal_rank(ranked: RankedList) -> float:
    """1/rank of the first relevant entry; 0 when none is retrieved."""
    for rank, entry in enumerate(ranked.entries, start=1):
        if entry.relevant:
            return 1.0 / rank
    return 0.0


@dataclass(frozen=True)
class QueryMetrics:
    p_at_1: float
    average_precision: float
    reciprocal_rank: float


@dataclass(frozen=True)
class MetricReport:
    per_query: dict[str, QueryMetrics]
    mean_p_at_1: float | None
    mean_average_precision: float | None
    mean_reciprocal_rank: float | None
    num_queries: int
    skipped_queries: tuple[str, ...] = ()


def evaluate_run(lists: Iterable[RankedList]) -> MetricReport:
    """Per-query metrics and arithmetic means over evaluable queries.

    Queries with zero relevant passages are skipped and listed in
    ``skipped_queries``; an empty run yields None means.
    """
    per_query: dict[str, QueryMetrics] = {}
    skipped = []
    for ranked in lists:
        if ranked.num_relevant <= 0:
            skipped.append(ranked.query_id)
            continue
        per_query[ranked.query_id] = QueryMetrics(
            p_at_1=precision_at_1(ranked),
            average_precision=average_precision(ranked),
            reciprocal_rank=reciprocal_rank(ranked),
        )
    n = len(per_query)
    if n == 0:
        return MetricReport({}, None, None, None, 0, tuple(skipped))
    return MetricReport(
        per_query=per_query,
        mean_p_at_1=sum(m.p_at_1 for m in per_query.values()) / n,
        mean_average_precision=sum(m.average_precision for m in per_query.values()) / n,
        mean_reciprocal_rank=sum(m.reciprocal_rank for m in per_query.values()) / n,
        num_queries=n,
        skipped_queries=tuple(skipped),
    )


@dataclass(frozen=True)
class CrossValidationResult:
    fold_reports: tuple[MetricReport, ...]
    pooled: MetricReport


def cross_validate(
    dataset: Dataset,
    folds: FoldAssignment,
    train_fn: Callable[[list[str], int], object],
    eval_fn: Callable[[object, list[str]], list[RankedList]],
) -> CrossValidationResult:
    """Train on the complement of each fold and evaluate on the fold.

    The pooled report concatenates per-query results across folds so each
    query counts exactly once and all queries weigh equally.
    """
    fold_reports = []
    all_lists: list[RankedList] = []
    for fold in range(folds.num_folds):
        train_qids = folds.queries_outside_fold(fold)
        test_qids = folds.queries_in_fold(fold)
        try:
            model = train_fn(train_qids, fold)
        except Exception as exc:
            raise CrossValidationError(f"training failed in fold {fold}: {exc}") from exc
        lists = eval_fn(model, test_qids)
        fold_reports.append(evaluate_run(lists))
        all_lists.extend(lists)
    return CrossValidationResult(tuple(fold_reports), evaluate_run(all_lists))


# ------------------------------------------------------------- file IO


def write_run(path, lists: Iterable[RankedList], tag: str = "minirank") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in lists:
            for rank, entry in enumerate(ranked.entries, start=1):
                fh.write(
                    f"{ranked.query_id} Q0 {entry.passage_id} {rank} {entry.score:.6f} {tag}\n"
                )


def read_run(path) -> dict[str, list[tuple[str, float]]]:
    """Parse a run file into query_id -> [(passage_id, score)] in rank order."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{line_no}: expected 6 columns, got {len(parts)}")
            qid, _, pid, rank_str, score_str, _ = parts
            try:
                rank_val = int(rank_str)
                score = float(score_str)
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: bad rank or score") from exc
            rows.setdefault(qid, []).append((rank_val, pid, score))
    out = {}
    for qid, entries in rows.items():
        entries.sort(key=lambda r: r[0])
        out[qid] = [(pid, score) for _, pid, score in entries]
    return out


METRIC_COLUMNS = {
    "p1": ("p_at_1", "P@1"),
    "map": ("average_precision", "MAP"),
    "mrr": ("reciprocal_rank", "MRR"),
}


def report_table(report: MetricReport, metrics: Sequence[str] = ("p1", "map", "mrr")) -> str:
    """Tab-separated table: one row per query plus a mean row."""
    for m in metrics:
        if m not in METRIC_COLUMNS:
            raise ValueError(f"unknown metric {m!r}; expected one of {sorted(METRIC_COLUMNS)}")
    header = ["query"] + [METRIC_COLUMNS[m][1] for m in metrics]
    lines = ["\t".join(header)]
    for qid in sorted(report.per_query):
        qm = report.per_query[qid]
        cells = [f"{getattr(qm, METRIC_COLUMNS[m][0]):.6f}" for m in metrics]
        lines.append("\t".join([qid] + cells))
    mean_names = {
        "p1": report.mean_p_at_1,
        "map": report.mean_average_precision,
        "mrr": report.mean_reciprocal_rank,
    }
    cells = [
        "n/a" if mean_names[m] is None else f"{mean_names[m]:.6f}" for m in metrics
    ]
    lines.append("\t".join(["MEAN"] + cells))
    return "\n".join(lines) + "\n"


def report_json(report: MetricReport) -> str:
    payload = {
        "num_queries": report.num_queries,
        "skipped_queries": sorted(report.skipped_queries),
        "means": {
            "p_at_1": report.mean_p_at_1,
            "average_precision": report.mean_average_precision,
            "reciprocal_rank": report.mean_reciprocal_rank,
        },
        "per_query": {
            qid: {
                "p_at_1": qm.p_at_1,
                "average_precision": qm.average_precision,
                "reciprocal_rank": qm.reciprocal_rank,
            }
            for qid, qm in sorted(report.per_query.items())
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
