"""Self-contained model checkpoints.

Layout (little-endian): magic ``MRCK``, version u32, a length-prefixed
UTF-8 JSON header (encoder config, head kind, optional segmentation
attention size, training step), then a u32 tensor count followed by named
tensor records: name (u16 length + UTF-8), ndim u8, dims u32 each, and the
raw float32 data. Parameters load back as float64. Optimizer moments are
stored under ``adam.m.*`` / ``adam.v.*`` when provided so training can
resume deterministically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import AdamState, EncoderConfig, EncoderParams
from .ltr import RankHead
from .segmentation import AttentionPoolParams


MAGIC = b"MRCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: EncoderParams
    head: RankHead
    seg_params: AttentionPoolParams | None
    step: int
    adam_state: AdamState | None


def _write_tensor(fh, name: str, tensor: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    arr = np.asarray(tensor, dtype="<f4")
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes(order="C"))


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(
    path,
    params: EncoderParams,
    head: RankHead,
    seg_params: AttentionPoolParams | None = None,
    step: int = 0,
    adam_state: AdamState | None = None,
) -> None:
    cfg = params.config
    header = {
        "encoder": {
            "num_layers": cfg.num_layers,
            "hidden_dim": cfg.hidden_dim,
            "num_heads": cfg.num_heads,
            "ffn_dim": cfg.ffn_dim,
            "vocab_size": cfg.vocab_size,
            "max_seq_len": cfg.max_seq_len,
            "dropout_rate": cfg.dropout_rate,
            "activation": cfg.activation,
            "seed": cfg.seed,
        },
        "head_kind": head.kind,
        "attention_size": seg_params.attention_size if seg_params else None,
        "step": step,
        "has_optimizer_state": adam_state is not None,
    }
    tensors: dict[str, np.ndarray] = dict(params.tensors)
    tensors.update(head.tensors())
    if seg_params is not None:
        tensors.update(seg_params.tensors())
    if adam_state is not None:
        for name, val in adam_state.m.items():
            tensors["adam.m." + name] = val
        for name, val in adam_state.v.items():
            tensors["adam.v." + name] = val
        header["adam_step"] = adam_state.step

    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(raw_header)))
        fh.write(raw_header)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        (num_tensors,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(num_tensors))

    config = EncoderConfig(**header["encoder"])
    enc_tensors = {
        name: val
        for name, val in tensors.items()
        if not name.startswith(("head.", "seg.", "adam."))
    }
    params = EncoderParams(config, enc_tensors)

    head = RankHead(header["head_kind"], config.hidden_dim)
    if head.kind == "pointwise":
        head.W_cls = tensors["head.W_cls"]
        head.b_cls = tensors["head.b_cls"]
    else:
        head.v = tensors["head.v"]

    seg_params = None
    if header.get("attention_size"):
        seg_params = AttentionPoolParams(config.hidden_dim, header["attention_size"])
        seg_params.W_a = tensors["seg.W_a"]
        seg_params.b_a = tensors["seg.b_a"]
        seg_params.u_a = tensors["seg.u_a"]

    adam_state = None
    if header.get("has_optimizer_state"):
        adam_state = AdamState()
        adam_state.step = int(header.get("adam_step", 0))
        for name, val in tensors.items():
            if name.startswith("adam.m."):
                adam_state.m[name[len("adam.m.") :]] = val
            elif name.startswith("adam.v."):
                adam_state.v[name[len("adam.v.") :]] = val

    return Checkpoint(
        config=config,
        params=params,
        head=head,
        seg_params=seg_params,
        step=int(header.get("step", 0)),
        adam_state=adam_state,
    )
