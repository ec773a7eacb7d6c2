"""Binary formats: model checkpoints (``DSCK``) and layer trace dumps (``LTRC``).

Checkpoint layout, little-endian::

    b"DSCK" | u16 version | u32 n | n bytes UTF-8 JSON {config, layer_ids}
    | u32 tensor count | per tensor:
        u16 name length | name | u8 rank | rank x u32 extents | f32 payload

Trace dump layout, little-endian::

    b"LTRC" | u16 version | u16 L | u16 H | u32 N_p | u32 d_model | u32 B
    | u8 dtype (1 = f32)
    | (L + 1) hidden states, each B x N_p x d_model
    | L attention tensors, each B x H x N_p x N_p

``L`` counts blocks; hidden state 0 is the embedding output.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ForecastModel, LayerTrace, ModelConfig
from .tensor import Tensor

CKPT_MAGIC = b"DSCK"
CKPT_VERSION = 1
DUMP_MAGIC = b"LTRC"
DUMP_VERSION = 1
DTYPE_F32 = 1
_DUMP_HEADER = struct.Struct("<4sHHHIIIB")


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(f"{msg} (at byte offset {offset})" if offset is not None else msg)
        self.offset = offset


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ForecastModel, path) -> None:
    meta = json.dumps(
        {"config": model.config.to_dict(), "layer_ids": list(model.layer_ids)}, sort_keys=True
    ).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta)), meta, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, dtype=np.float64) -> ForecastModel:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("not a DSCK checkpoint", 0)
    (version, meta_len) = r.unpack("<HI", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "config block").decode("utf-8"))
        config = ModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad config block: {e}", at) from None
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        (rank,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{rank}I", "extents") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n, f"payload of {name}"), dtype="<f4").reshape(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name, dtype=dtype)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return ForecastModel(config, params, meta["layer_ids"])


# ---------------------------------------------------------------------------
# trace dumps


def dump_bytes(L: int, H: int, n_p: int, d_model: int, b: int) -> int:
    return 4 * ((L + 1) * b * n_p * d_model + L * b * H * n_p * n_p)


def write_trace_dump(trace: LayerTrace, path) -> None:
    L = len(trace.attn)
    b, n_p, d = trace.hidden[0].shape
    h = trace.attn[0].shape[1] if L else 0
    header = _DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, L, h, n_p, d, b, DTYPE_F32)
    with open(path, "wb") as fh:
        fh.write(header)
        for x in trace.hidden:
            fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
        for a in trace.attn:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_trace_dump(path) -> LayerTrace:
    buf = Path(path).read_bytes()
    if len(buf) < _DUMP_HEADER.size:
        raise FormatError(f"file shorter than the {_DUMP_HEADER.size}-byte header", len(buf))
    magic, version, L, h, n_p, d, b, dtype = _DUMP_HEADER.unpack_from(buf, 0)
    if magic != DUMP_MAGIC:
        raise FormatError("not an LTRC trace dump", 0)
    if version != DUMP_VERSION:
        raise FormatError(f"unsupported dump version {version}", 4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", _DUMP_HEADER.size - 1)
    expect = dump_bytes(L, h, n_p, d, b)
    payload = len(buf) - _DUMP_HEADER.size
    if payload != expect:
        raise FormatError(f"payload is {payload} bytes, header implies {expect}", _DUMP_HEADER.size + min(payload, expect))
    data = np.frombuffer(buf, dtype="<f4", offset=_DUMP_HEADER.size)
    pos = 0
    hidden, attn = [], []
    step = b * n_p * d
    for _ in range(L + 1):
        hidden.append(data[pos : pos + step].reshape(b, n_p, d))
        pos += step
    step = b * h * n_p * n_p
    for _ in range(L):
        attn.append(data[pos : pos + step].reshape(b, h, n_p, n_p))
        pos += step
    return LayerTrace(hidden, attn, list(range(L)), batch=b, channels=1)


def concat_traces(traces: list[LayerTrace]) -> LayerTrace:
    """Stack traces of the same model along the sample axis."""
    first = traces[0]
    hidden = [np.concatenate([t.hidden[i] for t in traces]) for i in range(first.n_states)]
    attn = [np.concatenate([t.attn[i] for t in traces]) for i in range(len(first.attn))]
    return LayerTrace(hidden, attn, list(first.layer_ids), batch=hidden[0].shape[0], channels=1)
