"""Compact transformer cross-encoder with exact analytic gradients.

Maps a batch of encoded (query, passage) pairs to pooled H-dimensional
vectors: token+position+segment embeddings, post-norm transformer layers
with padding-masked self-attention, and a tanh pooler over the [CLS]
position of the last layer. ``backward`` returns gradients for every
parameter given upstream gradients on the pooled outputs; ``adam_step``
applies the bias-corrected Adam update.

All math runs in float64. The row-wise inner loops (layer norm, GELU,
masked softmax) dispatch through :mod:`minirank.kernels`, which picks the
compiled backend when built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .tokenizer import EncodedPair


class ConfigError(ValueError):
    """Encoder configuration violates a shape constraint."""


class ShapeError(ValueError):
    """An input batch does not fit the configured shapes."""


class CacheError(RuntimeError):
    """backward() called without a fresh train-mode forward cache."""


class TrainingError(RuntimeError):
    """A training step produced non-finite values."""


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 4096
    max_seq_len: int = 128
    dropout_rate: float = 0.1
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_seq_len < 8:
            raise ConfigError(f"max_seq_len must be >= 8, got {self.max_seq_len}")
        if self.ffn_dim < self.hidden_dim:
            raise ConfigError(f"ffn_dim {self.ffn_dim} smaller than hidden_dim {self.hidden_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must cover the reserved tokens, got {self.vocab_size}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


INIT_STD = 0.02


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until all values lie within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class EncoderParams:
    """Named float64 parameter tensors plus the config that shaped them."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)


def init_params(config: EncoderConfig) -> EncoderParams:
    """Deterministic initialization: truncated normal weights, unit LN gains."""
    rng = np.random.default_rng(config.seed)
    h, f = config.hidden_dim, config.ffn_dim
    t: dict[str, np.ndarray] = {}
    t["emb.tok"] = truncated_normal(rng, (config.vocab_size, h))
    t["emb.pos"] = truncated_normal(rng, (config.max_seq_len, h))
    t["emb.seg"] = truncated_normal(rng, (2, h))
    t["emb.ln_g"] = np.ones(h)
    t["emb.ln_b"] = np.zeros(h)
    for i in range(config.num_layers):
        p = f"layer{i}."
        for name in ("Wq", "Wk", "Wv", "Wo"):
            t[p + "attn." + name] = truncated_normal(rng, (h, h))
        for name in ("bq", "bk", "bv", "bo"):
            t[p + "attn." + name] = np.zeros(h)
        t[p + "ln1_g"] = np.ones(h)
        t[p + "ln1_b"] = np.zeros(h)
        t[p + "ffn.W1"] = truncated_normal(rng, (h, f))
        t[p + "ffn.b1"] = np.zeros(f)
        t[p + "ffn.W2"] = truncated_normal(rng, (f, h))
        t[p + "ffn.b2"] = np.zeros(h)
        t[p + "ln2_g"] = np.ones(h)
        t[p + "ln2_b"] = np.zeros(h)
    t["pool.W"] = truncated_normal(rng, (h, h))
    t["pool.b"] = np.zeros(h)
    return EncoderParams(config, t)


def _batch_arrays(batch: Sequence[EncodedPair], max_seq_len: int):
    if not batch:
        raise ShapeError("empty batch")
    length = max(p.seq_len for p in batch)
    if length > max_seq_len:
        raise ShapeError(f"pair seq_len {length} exceeds max_seq_len {max_seq_len}")
    n = len(batch)
    ids = np.zeros((n, length), dtype=np.int64)
    segs = np.ones((n, length), dtype=np.int64)
    mask = np.zeros((n, length), dtype=np.float64)
    for row, pair in enumerate(batch):
        ids[row, : pair.seq_len] = pair.token_ids
        segs[row, : pair.seq_len] = pair.segment_ids
        mask[row, : pair.seq_len] = pair.mask
    return ids, segs, mask


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    b, l, h = x.shape
    return x.reshape(b, l, num_heads, h // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, nh, l, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, l, nh * dh)


def _dropout(x: np.ndarray, rate: float, rng):
    """Inverted dropout; returns (dropped, scaled keep mask or None)."""
    if rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * keep, keep


def _activation_forward(u: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        return kernels.gelu_forward(u)
    return np.maximum(u, 0.0)


def _activation_backward(u: np.ndarray, da: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        return kernels.gelu_backward(u, da)
    return da * (u > 0.0)


def forward_pooled(
    params: EncoderParams,
    batch: Sequence[EncodedPair],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """Encode a batch to pooled vectors.

    Returns (pooled, cache); cache is None unless train_mode. Dropout is
    active only in train_mode and then requires ``rng``.
    """
    cfg = params.config
    t = params.tensors
    rate = cfg.dropout_rate if train_mode else 0.0
    if rate > 0.0 and rng is None:
        raise ValueError("train_mode forward with dropout requires an rng")
    ids, segs, mask = _batch_arrays(batch, cfg.max_seq_len)
    n, length = ids.shape
    h = cfg.hidden_dim

    x = t["emb.tok"][ids] + t["emb.pos"][:length][None, :, :] + t["emb.seg"][segs]
    x_flat = np.ascontiguousarray(x.reshape(n * length, h))
    h0_flat, emb_mean, emb_rstd = kernels.layer_norm_forward(x_flat, t["emb.ln_g"], t["emb.ln_b"])
    hidden = h0_flat.reshape(n, length, h)
    hidden, emb_drop = _dropout(hidden, rate, rng)

    scale = 1.0 / np.sqrt(cfg.head_dim)
    layers = []
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        hin = hidden
        q = hin @ t[p + "attn.Wq"] + t[p + "attn.bq"]
        k = hin @ t[p + "attn.Wk"] + t[p + "attn.bk"]
        v = hin @ t[p + "attn.Wv"] + t[p + "attn.bv"]
        qh = _split_heads(q, cfg.num_heads)
        kh = _split_heads(k, cfg.num_heads)
        vh = _split_heads(v, cfg.num_heads)
        scores = np.ascontiguousarray(qh @ kh.transpose(0, 1, 3, 2)) * scale
        probs = kernels.masked_softmax_forward(scores, mask)
        probs_drop, probs_mask = _dropout(probs, rate, rng)
        ctx = probs_drop @ vh
        ctxm = _merge_heads(ctx)
        attn = ctxm @ t[p + "attn.Wo"] + t[p + "attn.bo"]
        attn, attn_mask = _dropout(attn, rate, rng)
        r1 = hin + attn
        r1_flat = np.ascontiguousarray(r1.reshape(n * length, h))
        n1_flat, ln1_mean, ln1_rstd = kernels.layer_norm_forward(
            r1_flat, t[p + "ln1_g"], t[p + "ln1_b"]
        )
        n1 = n1_flat.reshape(n, length, h)
        u = n1 @ t[p + "ffn.W1"] + t[p + "ffn.b1"]
        a = _activation_forward(u, cfg.activation)
        f_out = a @ t[p + "ffn.W2"] + t[p + "ffn.b2"]
        f_out, ffn_mask = _dropout(f_out, rate, rng)
        r2 = n1 + f_out
        r2_flat = np.ascontiguousarray(r2.reshape(n * length, h))
        out_flat, ln2_mean, ln2_rstd = kernels.layer_norm_forward(
            r2_flat, t[p + "ln2_g"], t[p + "ln2_b"]
        )
        hidden = out_flat.reshape(n, length, h)
        if train_mode:
            layers.append(
                dict(
                    hin=hin, qh=qh, kh=kh, vh=vh, probs=probs, probs_mask=probs_mask,
                    probs_drop=probs_drop if probs_mask is not None else probs,
                    ctxm=ctxm, attn_mask=attn_mask, r1_flat=r1_flat,
                    ln1_mean=ln1_mean, ln1_rstd=ln1_rstd, n1=n1, u=u, a=a,
                    ffn_mask=ffn_mask, r2_flat=r2_flat, ln2_mean=ln2_mean, ln2_rstd=ln2_rstd,
                )
            )

    cls = hidden[:, 0, :]
    pooled = np.tanh(cls @ t["pool.W"] + t["pool.b"])

    if not train_mode:
        return pooled, None
    cache = dict(
        ids=ids, segs=segs, mask=mask, x_flat=x_flat, emb_mean=emb_mean, emb_rstd=emb_rstd,
        emb_drop=emb_drop, layers=layers, cls=cls, pooled=pooled, shape=(n, length),
        consumed=False,
    )
    return pooled, cache


def backward(params: EncoderParams, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss for every parameter.

    ``upstream`` is dLoss/dpooled with shape (batch, hidden_dim); ``cache``
    must come from a train_mode forward pass and is consumed.
    """
    if cache is None:
        raise CacheError("backward requires the cache from a train_mode forward pass")
    if cache["consumed"]:
        raise CacheError("forward cache already consumed by a previous backward")
    cache["consumed"] = True

    cfg = params.config
    t = params.tensors
    n, length = cache["shape"]
    h = cfg.hidden_dim
    scale = 1.0 / np.sqrt(cfg.head_dim)
    g: dict[str, np.ndarray] = {}

    pooled = cache["pooled"]
    dz = upstream * (1.0 - pooled * pooled)
    g["pool.W"] = cache["cls"].T @ dz
    g["pool.b"] = dz.sum(axis=0)
    dhidden = np.zeros((n, length, h))
    dhidden[:, 0, :] = dz @ t["pool.W"].T

    for i in reversed(range(cfg.num_layers)):
        p = f"layer{i}."
        lc = cache["layers"][i]
        dout_flat = np.ascontiguousarray(dhidden.reshape(n * length, h))
        dr2_flat, g[p + "ln2_g"], g[p + "ln2_b"] = kernels.layer_norm_backward(
            dout_flat, lc["r2_flat"], lc["ln2_mean"], lc["ln2_rstd"], t[p + "ln2_g"]
        )
        dr2 = np.asarray(dr2_flat).reshape(n, length, h)
        df = dr2 if lc["ffn_mask"] is None else dr2 * lc["ffn_mask"]
        f_dim = cfg.ffn_dim
        g[p + "ffn.W2"] = lc["a"].reshape(-1, f_dim).T @ df.reshape(-1, h)
        g[p + "ffn.b2"] = df.sum(axis=(0, 1))
        da = df @ t[p + "ffn.W2"].T
        du = _activation_backward(lc["u"], da, cfg.activation)
        g[p + "ffn.W1"] = lc["n1"].reshape(-1, h).T @ du.reshape(-1, f_dim)
        g[p + "ffn.b1"] = du.sum(axis=(0, 1))
        dn1 = dr2 + du @ t[p + "ffn.W1"].T

        dn1_flat = np.ascontiguousarray(dn1.reshape(n * length, h))
        dr1_flat, g[p + "ln1_g"], g[p + "ln1_b"] = kernels.layer_norm_backward(
            dn1_flat, lc["r1_flat"], lc["ln1_mean"], lc["ln1_rstd"], t[p + "ln1_g"]
        )
        dr1 = np.asarray(dr1_flat).reshape(n, length, h)
        dattn = dr1 if lc["attn_mask"] is None else dr1 * lc["attn_mask"]
        g[p + "attn.Wo"] = lc["ctxm"].reshape(-1, h).T @ dattn.reshape(-1, h)
        g[p + "attn.bo"] = dattn.sum(axis=(0, 1))
        dctx = _split_heads(dattn @ t[p + "attn.Wo"].T, cfg.num_heads)
        dprobs = np.ascontiguousarray(dctx @ lc["vh"].transpose(0, 1, 3, 2))
        dvh = lc["probs_drop"].transpose(0, 1, 3, 2) @ dctx
        if lc["probs_mask"] is not None:
            dprobs = dprobs * lc["probs_mask"]
        dscores = np.asarray(
            kernels.masked_softmax_backward(lc["probs"], np.ascontiguousarray(dprobs))
        )
        dqh = (dscores @ lc["kh"]) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ lc["qh"]) * scale
        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        hin_flat = lc["hin"].reshape(-1, h)
        for name, grad in (("q", dq), ("k", dk), ("v", dv)):
            g[p + "attn.W" + name] = hin_flat.T @ grad.reshape(-1, h)
            g[p + "attn.b" + name] = grad.sum(axis=(0, 1))
        dhidden = (
            dr1
            + dq @ t[p + "attn.Wq"].T
            + dk @ t[p + "attn.Wk"].T
            + dv @ t[p + "attn.Wv"].T
        )

    dh0 = dhidden if cache["emb_drop"] is None else dhidden * cache["emb_drop"]
    dh0_flat = np.ascontiguousarray(dh0.reshape(n * length, h))
    dx_flat, g["emb.ln_g"], g["emb.ln_b"] = kernels.layer_norm_backward(
        dh0_flat, cache["x_flat"], cache["emb_mean"], cache["emb_rstd"], t["emb.ln_g"]
    )
    dx = np.asarray(dx_flat).reshape(n, length, h)
    dtok = np.zeros_like(t["emb.tok"])
    np.add.at(dtok, cache["ids"].reshape(-1), dx.reshape(-1, h))
    g["emb.tok"] = dtok
    dpos = np.zeros_like(t["emb.pos"])
    dpos[:length] = dx.sum(axis=0)
    g["emb.pos"] = dpos
    dseg = np.zeros_like(t["emb.seg"])
    np.add.at(dseg, cache["segs"].reshape(-1), dx.reshape(-1, h))
    g["emb.seg"] = dseg
    return g


class AdamState:
    """First and second moment accumulators keyed by tensor name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place bias-corrected Adam update over named tensors."""
    state.step += 1
    step = state.step
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, tensor in tensors.items():
        grad = grads[name]
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m.setdefault(name, np.zeros_like(tensor))
        v = state.v.setdefault(name, np.zeros_like(tensor))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        tensor -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
