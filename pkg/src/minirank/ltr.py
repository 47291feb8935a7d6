"""Learning-to-rank heads, losses, example construction, and training.

Three heads over the pooled pair vector:

* ``pointwise``      -- two-class classifier; the positive-class
  probability is the ranking score, trained with cross-entropy.
* ``pairwise_hinge`` -- score = pooled . v; triplets trained with a hinge
  on softmax-normalized positive/negative scores.
* ``pairwise_ce``    -- same score, trained with the negative
  log-likelihood of the positive pair in the two-way softmax.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from . import segmentation as seg
from .corpus import Dataset, Passage
from .encoder import AdamState, EncoderParams, TrainingError, truncated_normal
from .retrieval import Candidates
from .tokenizer import EncodedPair, Vocabulary, encode_ids_pair, tokenize


HEAD_KINDS = ("pointwise", "pairwise_hinge", "pairwise_ce")
PAIRWISE_KINDS = ("pairwise_hinge", "pairwise_ce")


class RankHead:
    """Scoring head; exactly the tensors for its kind are allocated."""

    def __init__(self, kind: str, hidden_dim: int, seed: int = 0):
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
        self.kind = kind
        self.hidden_dim = hidden_dim
        rng = np.random.default_rng(seed)
        if kind == "pointwise":
            # antisymmetric rows: the logit difference starts as a fixed
            # random direction (like v), which stabilizes from-scratch
            # training; softmax only ever sees the row difference
            direction = truncated_normal(rng, (hidden_dim,))
            self.W_cls = np.stack([-0.5 * direction, 0.5 * direction])
            self.b_cls = np.zeros(2)
            self.v = None
        else:
            self.v = truncated_normal(rng, (hidden_dim,))
            self.W_cls = None
            self.b_cls = None

    def tensors(self) -> dict[str, np.ndarray]:
        if self.kind == "pointwise":
            return {"head.W_cls": self.W_cls, "head.b_cls": self.b_cls}
        return {"head.v": self.v}

    def require_pairwise(self):
        if self.kind not in PAIRWISE_KINDS:
            raise ValueError(f"head kind {self.kind!r} has no scoring vector v")

    def require_pointwise(self):
        if self.kind != "pointwise":
            raise ValueError(f"head kind {self.kind!r} has no classifier weights")


@dataclass(frozen=True)
class Triplet:
    query_id: str
    positive_id: str
    negative_id: str

    def __post_init__(self):
        if self.positive_id == self.negative_id:
            raise ValueError(f"triplet for {self.query_id!r} repeats {self.positive_id!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs. ``learning_rate`` defaults to the desk-scale value;
    the full-scale default from the original setup is 2e-5. ``adam_beta2``
    below 0.999 adapts the step scale faster, which matters for the short
    (hundreds of steps) desk-scale runs."""

    margin: float = 0.2
    epochs: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 8
    seq_len: int = 256
    neg_per_pos_cap: int | None = None
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.neg_per_pos_cap is not None and self.neg_per_pos_cap < 1:
            raise ValueError(f"neg_per_pos_cap must be >= 1 or None, got {self.neg_per_pos_cap}")
        for name, beta in (("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)):
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {beta}")


FULL_SCALE_LEARNING_RATE = 2e-5


# ---------------------------------------------------------------- scoring


def score_pair(params: EncoderParams, head: RankHead, pair: EncodedPair) -> float:
    """Pair score: dot product of the pooled vector with v (no bias)."""
    head.require_pairwise()
    pooled, _ = enc.forward_pooled(params, [pair])
    return float(pooled[0] @ head.v)


def pointwise_score(params: EncoderParams, head: RankHead, pair: EncodedPair) -> float:
    """Positive-class probability of the two-way classifier, in (0, 1)."""
    head.require_pointwise()
    pooled, _ = enc.forward_pooled(params, [pair])
    logits = head.W_cls @ pooled[0] + head.b_cls
    m = logits.max()
    e = np.exp(logits - m)
    return float(e[1] / e.sum())


# ---------------------------------------------------------------- losses


def normalize_pair(s_plus: float, s_minus: float) -> tuple[float, float]:
    """Two-way softmax of a positive and a negative score; sums to 1."""
    m = max(s_plus, s_minus)
    e_plus = math.exp(s_plus - m)
    e_minus = math.exp(s_minus - m)
    total = e_plus + e_minus
    return e_plus / total, e_minus / total


def hinge_loss(s_hat_plus: float, s_hat_minus: float, margin: float) -> float:
    """max(margin - (s_hat_plus - s_hat_minus), 0)."""
    return max(margin - (s_hat_plus - s_hat_minus), 0.0)


def nll_loss(s_hat_plus: float) -> float:
    """-ln of the normalized positive score, clamped away from log(0)."""
    return -math.log(max(s_hat_plus, 1e-300))


def pointwise_loss(logits: Sequence[float], label: int) -> float:
    """Cross-entropy of softmax(logits) against label in {0, 1}."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    return float(lse - z[label])


# ------------------------------------------------- example construction


def build_triplets(
    query_id: str,
    positives: Sequence[str],
    negatives: Sequence[str],
    cap: int | None,
    seed: int,
) -> list[Triplet]:
    """Round-robin the negatives over the positives, then cap per positive.

    Every negative lands in exactly one pre-cap triplet; each positive
    gets floor(n/m) or ceil(n/m) of them. ``cap`` randomly subsamples each
    positive's negatives (seeded), mirroring per-dataset down-sampling.
    """
    if not positives or not negatives:
        return []
    buckets: list[list[str]] = [[] for _ in positives]
    for i, neg in enumerate(negatives):
        buckets[i % len(positives)].append(neg)
    rng = random.Random(seed)
    out = []
    for pos, bucket in zip(positives, buckets):
        chosen = bucket if cap is None or len(bucket) <= cap else rng.sample(bucket, cap)
        out.extend(Triplet(query_id, pos, neg) for neg in chosen)
    return out


def build_pointwise_examples(
    query_id: str,
    positives: Sequence[str],
    negatives: Sequence[str],
    cap: int | None,
    seed: int,
) -> list[tuple[str, str, int]]:
    """(query_id, passage_id, label) rows: label 1 per positive, 0 per negative.

    Negatives are capped at cap x max(1, #positives) by seeded subsampling.
    """
    rng = random.Random(seed)
    negs = list(negatives)
    if cap is not None:
        limit = cap * max(1, len(positives))
        if len(negs) > limit:
            negs = rng.sample(negs, limit)
    rows = [(query_id, pid, 1) for pid in positives]
    rows.extend((query_id, pid, 0) for pid in negs)
    return rows


def query_seed(base_seed: int, query_id: str) -> int:
    """Stable per-query seed (independent of hash randomization)."""
    digest = hashlib.blake2b(query_id.encode("utf-8"), digest_size=8).digest()
    return (base_seed * 0x9E3779B97F4A7C15 + int.from_bytes(digest, "little")) % 2**63


# ------------------------------------------------------- loss gradients


def _pairwise_loss_terms(score_diff: np.ndarray, margin: float, kind: str):
    """Per-triplet loss and d(loss)/d(score_diff) for both pairwise heads.

    score_diff is s+ - s-; the normalized positive score is
    sigmoid(score_diff).
    """
    sp = 1.0 / (1.0 + np.exp(-score_diff))
    if kind == "pairwise_hinge":
        gap = margin - (2.0 * sp - 1.0)
        losses = np.maximum(gap, 0.0)
        dd = np.where(gap > 0.0, -2.0 * sp * (1.0 - sp), 0.0)
    elif kind == "pairwise_ce":
        # -log sigmoid(d) = softplus(-d), computed stably
        losses = np.logaddexp(0.0, -score_diff)
        dd = sp - 1.0
    else:
        raise ValueError(f"not a pairwise head kind: {kind!r}")
    return losses, dd


def pairwise_loss_and_grads(
    params: EncoderParams,
    head: RankHead,
    pos_pairs: Sequence[EncodedPair],
    neg_pairs: Sequence[EncodedPair],
    margin: float,
    train_mode: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean triplet loss and gradients for encoder tensors plus head.v."""
    head.require_pairwise()
    if len(pos_pairs) != len(neg_pairs):
        raise ValueError("positive and negative batches must have equal length")
    n = len(pos_pairs)
    pooled, cache = enc.forward_pooled(
        params, list(pos_pairs) + list(neg_pairs), train_mode=train_mode, rng=rng
    )
    scores = pooled @ head.v
    diff = scores[:n] - scores[n:]
    losses, dd = _pairwise_loss_terms(diff, margin, head.kind)
    loss = float(losses.mean())
    coeff = dd / n
    dv = (pooled[:n] - pooled[n:]).T @ coeff
    upstream = np.concatenate([coeff[:, None] * head.v, -coeff[:, None] * head.v])
    grads = enc.backward(params, cache, upstream)
    grads["head.v"] = dv
    return loss, grads


def segmented_pairwise_loss_and_grads(
    params: EncoderParams,
    head: RankHead,
    ap: "seg.AttentionPoolParams | None",
    pos_chunks: Sequence[Sequence[EncodedPair]],
    neg_chunks: Sequence[Sequence[EncodedPair]],
    margin: float,
    aggregator: str,
    train_mode: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Pairwise loss through the chunk-and-aggregate scorer.

    Gradients flow into the encoder, head.v, and (for the attention
    aggregator) the pooling parameters.
    """
    head.require_pairwise()
    if len(pos_chunks) != len(neg_chunks):
        raise ValueError("positive and negative batches must have equal length")
    n = len(pos_chunks)
    sides = list(pos_chunks) + list(neg_chunks)
    flat: list[EncodedPair] = [pair for side in sides for pair in side]
    offsets = np.cumsum([0] + [len(side) for side in sides])
    pooled, cache = enc.forward_pooled(params, flat, train_mode=train_mode, rng=rng)

    agg = np.empty((2 * n, params.config.hidden_dim))
    for i in range(2 * n):
        agg[i] = seg.aggregate(ap, pooled[offsets[i] : offsets[i + 1]], aggregator)
    scores = agg @ head.v
    diff = scores[:n] - scores[n:]
    losses, dd = _pairwise_loss_terms(diff, margin, head.kind)
    loss = float(losses.mean())
    coeff = np.concatenate([dd, -dd]) / n

    dv = agg.T @ coeff
    upstream = np.zeros_like(pooled)
    dW_a = db_a = du_a = None
    if aggregator == "attention":
        dW_a = np.zeros_like(ap.W_a)
        db_a = np.zeros_like(ap.b_a)
        du_a = np.zeros_like(ap.u_a)
    for i in range(2 * n):
        vectors = pooled[offsets[i] : offsets[i + 1]]
        dagg = coeff[i] * head.v
        if aggregator == "attention":
            dchunks, dw, db, du = seg.attention_pool_grads(ap, vectors, dagg)
            dW_a += dw
            db_a += db
            du_a += du
        else:
            dchunks = seg.max_pool_grads(vectors, dagg)
        upstream[offsets[i] : offsets[i + 1]] = dchunks
    grads = enc.backward(params, cache, upstream)
    grads["head.v"] = dv
    if aggregator == "attention":
        grads["seg.W_a"] = dW_a
        grads["seg.b_a"] = db_a
        grads["seg.u_a"] = du_a
    return loss, grads


def pointwise_loss_and_grads(
    params: EncoderParams,
    head: RankHead,
    pairs: Sequence[EncodedPair],
    labels: Sequence[int],
    train_mode: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and gradients for encoder tensors plus classifier."""
    head.require_pointwise()
    n = len(pairs)
    if n != len(labels):
        raise ValueError("pairs and labels must have equal length")
    pooled, cache = enc.forward_pooled(params, list(pairs), train_mode=train_mode, rng=rng)
    logits = pooled @ head.W_cls.T + head.b_cls
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=1, keepdims=True)
    y = np.asarray(labels, dtype=np.int64)
    loss = float(-np.log(probs[np.arange(n), y]).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = enc.backward(params, cache, dlogits @ head.W_cls)
    grads["head.W_cls"] = dlogits.T @ pooled
    grads["head.b_cls"] = dlogits.sum(axis=0)
    return loss, grads


# --------------------------------------------------------------- ranking


def order_by_score(
    candidate_ids: Sequence[str], scores: Sequence[float]
) -> list[tuple[str, float]]:
    """Sort candidates by score descending; ties keep the input (first-stage)
    order, then ascending passage id."""
    rows = [
        (pid, float(s), rank) for rank, (pid, s) in enumerate(zip(candidate_ids, scores))
    ]
    rows.sort(key=lambda r: (-r[1], r[2], r[0]))
    return [(pid, s) for pid, s, _ in rows]


def score_candidates(
    params: EncoderParams,
    head: RankHead,
    vocab: Vocabulary,
    query_text: str,
    passage_texts: Sequence[str],
    seq_len: int,
    batch_size: int = 32,
    query_name: str | None = None,
) -> np.ndarray:
    """Head scores for each candidate passage (unsegmented path)."""
    q_ids = tokenize(vocab, query_text)
    pairs = [
        encode_ids_pair(q_ids, tokenize(vocab, text), seq_len, query_name)
        for text in passage_texts
    ]
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        pooled, _ = enc.forward_pooled(params, chunk)
        if head.kind == "pointwise":
            logits = pooled @ head.W_cls.T + head.b_cls
            m = logits.max(axis=1, keepdims=True)
            e = np.exp(logits - m)
            out[start : start + len(chunk)] = e[:, 1] / e.sum(axis=1)
        else:
            out[start : start + len(chunk)] = pooled @ head.v
    return out


def rank(
    params: EncoderParams,
    head: RankHead,
    vocab: Vocabulary,
    query_text: str,
    candidates: Sequence[tuple[str, Passage]],
    seq_len: int,
    batch_size: int = 32,
    query_name: str | None = None,
) -> list[tuple[str, float]]:
    """Re-rank first-stage candidates; returns (passage_id, score), best first.

    ``candidates`` is the first-stage list in its original order, which
    also serves as the tie-break.
    """
    if not candidates:
        return []
    scores = score_candidates(
        params,
        head,
        vocab,
        query_text,
        [p.text for _, p in candidates],
        seq_len,
        batch_size,
        query_name,
    )
    return order_by_score([pid for pid, _ in candidates], scores)


# -------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: EncoderParams
    head: RankHead
    seg_params: "seg.AttentionPoolParams | None"
    epoch_losses: list[float]
    steps: int
    adam_state: AdamState


def training_pools(
    dataset: Dataset, candidates: Mapping[str, Candidates]
) -> dict[str, tuple[list[str], list[str]]]:
    """Per-query (positives, negatives) drawn from the candidate pool.

    Candidates judged positive are positives; the rest of the pool are
    negatives. Queries without a positive candidate are dropped (they
    cannot form an example).
    """
    pools: dict[str, tuple[list[str], list[str]]] = {}
    for qid in dataset.query_ids():
        cand = candidates.get(qid)
        if cand is None:
            continue
        positives = [pid for pid in cand.passage_ids() if dataset.is_positive(qid, pid)]
        negatives = [pid for pid in cand.passage_ids() if not dataset.is_positive(qid, pid)]
        if positives:
            pools[qid] = (positives, negatives)
    return pools


def _encode_cache(vocab: Vocabulary, dataset: Dataset, seq_len: int):
    q_tokens: dict[str, list[int]] = {}
    p_tokens: dict[str, list[int]] = {}
    pair_cache: dict[tuple[str, str], EncodedPair] = {}

    def get(qid: str, pid: str) -> EncodedPair:
        key = (qid, pid)
        pair = pair_cache.get(key)
        if pair is None:
            if qid not in q_tokens:
                q_tokens[qid] = tokenize(vocab, dataset.queries[qid].text)
            if pid not in p_tokens:
                p_tokens[pid] = tokenize(vocab, dataset.passages[pid].text)
            pair = encode_ids_pair(q_tokens[qid], p_tokens[pid], seq_len, qid)
            pair_cache[key] = pair
        return pair

    return get


def _pack_groups(groups: list[list], batch_size: int) -> list[list]:
    """Merge consecutive whole groups into batches of about batch_size.

    Groups are never split; a single oversized group forms its own batch.
    """
    batches: list[list] = []
    current: list = []
    for group in groups:
        if current and len(current) + len(group) > batch_size:
            batches.append(current)
            current = []
        current.extend(group)
    if current:
        batches.append(current)
    return batches


def _chunked_encode_cache(vocab: Vocabulary, dataset: Dataset, seg_cfg: "seg.SegmentationConfig"):
    q_tokens: dict[str, list[int]] = {}
    cache: dict[tuple[str, str], list[EncodedPair]] = {}

    def get(qid: str, pid: str) -> list[EncodedPair]:
        key = (qid, pid)
        pairs = cache.get(key)
        if pairs is None:
            if qid not in q_tokens:
                q_tokens[qid] = tokenize(vocab, dataset.queries[qid].text)
            pairs = seg.encode_chunks(
                q_tokens[qid],
                tokenize(vocab, dataset.passages[pid].text),
                seg_cfg.num_chunks,
                seg_cfg.chunk_seq_len,
                query_name=qid,
            )
            cache[key] = pairs
        return pairs

    return get


def train(
    dataset: Dataset,
    candidates: Mapping[str, Candidates],
    vocab: Vocabulary,
    params: EncoderParams,
    head: RankHead,
    cfg: TrainConfig,
    seg_cfg: "seg.SegmentationConfig | None" = None,
    seg_params: "seg.AttentionPoolParams | None" = None,
) -> TrainResult:
    """Train encoder and head jointly; deterministic for a given seed.

    Examples are rebuilt per query with seeded down-sampling, shuffled per
    epoch, and consumed in mini-batches. With ``seg_cfg`` the segmented
    scorer is trained instead (pairwise heads only) and the attention-pool
    parameters learn jointly.
    """
    if cfg.seq_len > params.config.max_seq_len:
        raise ValueError(
            f"seq_len {cfg.seq_len} exceeds encoder max_seq_len {params.config.max_seq_len}"
        )
    if seg_cfg is not None:
        head.require_pairwise()
        if seg_cfg.aggregator == "attention" and seg_params is None:
            raise ValueError("segmented training with attention needs AttentionPoolParams")

    pools = training_pools(dataset, candidates)
    pointwise = head.kind == "pointwise"
    # pointwise examples stay grouped per query: a mini-batch holding a
    # query's positive together with its negatives keeps the classifier
    # gradient free of cross-query common-mode noise, which otherwise
    # drowns the from-scratch signal
    groups: list[list] = []
    for qid, (positives, negatives) in pools.items():
        per_query_seed = query_seed(cfg.seed, qid)
        if pointwise:
            group = build_pointwise_examples(
                qid, positives, negatives, cfg.neg_per_pos_cap, per_query_seed
            )
        else:
            group = build_triplets(qid, positives, negatives, cfg.neg_per_pos_cap, per_query_seed)
        if group:
            groups.append(group)
    if not groups:
        raise ValueError("no training examples: no query has a positive candidate")
    flat = [ex for group in groups for ex in group]

    if seg_cfg is None:
        encode = _encode_cache(vocab, dataset, cfg.seq_len)
    else:
        encode_chunks = _chunked_encode_cache(vocab, dataset, seg_cfg)

    all_tensors = dict(params.tensors)
    all_tensors.update(head.tensors())
    if seg_cfg is not None and seg_cfg.aggregator == "attention":
        all_tensors.update(seg_params.tensors())

    state = AdamState()
    dropout = params.config.dropout_rate > 0.0
    epoch_losses: list[float] = []
    steps = 0
    for epoch in range(cfg.epochs):
        shuffle_rng = np.random.default_rng([cfg.seed, 100 + epoch])
        if pointwise:
            order = shuffle_rng.permutation(len(groups))
            batches = _pack_groups([groups[i] for i in order], cfg.batch_size)
        else:
            order = shuffle_rng.permutation(len(flat))
            batches = [
                [flat[i] for i in order[s : s + cfg.batch_size]]
                for s in range(0, len(flat), cfg.batch_size)
            ]
        total, count = 0.0, 0
        for batch in batches:
            rng = np.random.default_rng([cfg.seed, epoch, steps]) if dropout else None
            if pointwise:
                pairs = [encode(q, p) for q, p, _ in batch]
                labels = [label for _, _, label in batch]
                loss, grads = pointwise_loss_and_grads(
                    params, head, pairs, labels, train_mode=True, rng=rng
                )
            elif seg_cfg is None:
                pos = [encode(tr.query_id, tr.positive_id) for tr in batch]
                neg = [encode(tr.query_id, tr.negative_id) for tr in batch]
                loss, grads = pairwise_loss_and_grads(
                    params, head, pos, neg, cfg.margin, train_mode=True, rng=rng
                )
            else:
                pos = [encode_chunks(tr.query_id, tr.positive_id) for tr in batch]
                neg = [encode_chunks(tr.query_id, tr.negative_id) for tr in batch]
                loss, grads = segmented_pairwise_loss_and_grads(
                    params, head, seg_params, pos, neg, cfg.margin,
                    seg_cfg.aggregator, train_mode=True, rng=rng,
                )
            if not math.isfinite(loss):
                ids = sorted({getattr(b, "query_id", b[0]) for b in batch})
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {steps} (queries: {', '.join(ids)})"
                )
            enc.adam_step(
                all_tensors, grads, state, cfg.learning_rate,
                beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
            )
            total += loss * len(batch)
            count += len(batch)
            steps += 1
        epoch_losses.append(total / count)
    return TrainResult(
        params=params,
        head=head,
        seg_params=seg_params,
        epoch_losses=epoch_losses,
        steps=steps,
        adam_state=state,
    )
