"""Standalone reader/writer for the RSAT ensemble-trace container.

This is an independent implementation of the published byte layout so the
extractor stays decoupled from the scoring engine (the file format is the
contract between them). All integers are little-endian u32 unless stated,
strings are u32-length-prefixed UTF-8, probabilities are little-endian f32.

    magic "RSAT" | version u32 | doc_id str | M u32 | N u32 | T u32
    | M x model_id str | storage_mode u8 (0 dense, 1 topk) | float_width u8
    | K u32 (topk only)

Body, per position: observed token u32, then per model either N f32 (dense)
or K (token u32, prob f32) pairs in descending probability, a tail-mass f32,
and the model's exact f32 probability of the observed token.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RSAT"
FORMAT_VERSION = 1
MODE_DENSE = 0
MODE_TOPK = 1

_U32 = struct.Struct("<I")


class RsatError(Exception):
    """Corrupt or inconsistent RSAT data."""


@dataclass
class TopkRows:
    """One model's stored per-position data: (T, K) ids/probs plus tails."""

    ids: np.ndarray
    probs: np.ndarray
    tail: np.ndarray
    observed_prob: np.ndarray


@dataclass
class RawTrace:
    """A parsed RSAT file with stored values left untouched (no tail fill)."""

    doc_id: str
    model_ids: list[str]
    vocab_size: int
    observed: np.ndarray
    mode: int
    k: int | None
    topk: list[TopkRows] | None
    dense: np.ndarray | None


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _pair_dtype(k: int) -> np.dtype:
    pair = np.dtype([("id", "<u4"), ("p", "<f4")])
    return np.dtype([("pairs", pair, (k,)), ("tail", "<f4"), ("obsp", "<f4")])


def write_topk_trace(
    path,
    doc_id: str,
    model_ids: list[str],
    vocab_size: int,
    observed: np.ndarray,
    models: list[TopkRows],
) -> Path:
    """Write a top-K trace; every model block must share (T, K) shapes."""
    path = Path(path)
    observed = np.asarray(observed, dtype=np.int64)
    t = observed.size
    m = len(models)
    if m < 1 or len(model_ids) != m:
        raise RsatError(f"need one id per model block, got {len(model_ids)} for {m}")
    k = models[0].ids.shape[1]
    if not 1 <= k <= vocab_size:
        raise RsatError(f"top-K width {k} outside [1, {vocab_size}]")
    for block in models:
        if block.ids.shape != (t, k) or block.probs.shape != (t, k):
            raise RsatError("model block shape mismatch")

    header = bytearray()
    header += MAGIC
    header += _U32.pack(FORMAT_VERSION)
    header += _pack_str(doc_id)
    header += _U32.pack(m) + _U32.pack(vocab_size) + _U32.pack(t)
    for model_id in model_ids:
        header += _pack_str(model_id)
    header += bytes([MODE_TOPK, 32])
    header += _U32.pack(k)

    record = np.dtype([("obs", "<u4"), ("models", _pair_dtype(k), (m,))])
    body = np.empty(t, dtype=record)
    body["obs"] = observed.astype("<u4")
    for mi, block in enumerate(models):
        entry = body["models"][:, mi]
        entry["pairs"]["id"] = block.ids
        entry["pairs"]["p"] = block.probs
        entry["tail"] = block.tail
        entry["obsp"] = block.observed_prob

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(body.tobytes())
    return path


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise RsatError(f"{self.path}: truncated file")
        out = self.data[self.offset : end]
        self.offset = end
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RsatError(f"{self.path}: invalid UTF-8 string") from exc


def read_trace(path) -> RawTrace:
    """Parse an RSAT file, returning stored values verbatim."""
    path = Path(path)
    cur = _Cursor(path.read_bytes(), path)
    if cur.take(4) != MAGIC:
        raise RsatError(f"{path}: bad magic")
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise RsatError(f"{path}: unsupported version {version}")
    doc_id = cur.string()
    m, n, t = cur.u32(), cur.u32(), cur.u32()
    model_ids = [cur.string() for _ in range(m)]
    mode, float_width = cur.take(1)[0], cur.take(1)[0]
    if float_width != 32:
        raise RsatError(f"{path}: unsupported float width {float_width}")
    if mode == MODE_TOPK:
        k = cur.u32()
        expected = t * (4 + m * (k * 8 + 8))
        if len(cur.data) - cur.offset != expected:
            raise RsatError(f"{path}: body size does not match layout")
        record = np.dtype([("obs", "<u4"), ("models", _pair_dtype(k), (m,))])
        body = np.frombuffer(cur.take(expected), dtype=record)
        topk = [
            TopkRows(
                ids=body["models"][:, mi]["pairs"]["id"].astype(np.int64),
                probs=body["models"][:, mi]["pairs"]["p"].astype(np.float64),
                tail=body["models"][:, mi]["tail"].astype(np.float64),
                observed_prob=body["models"][:, mi]["obsp"].astype(np.float64),
            )
            for mi in range(m)
        ]
        dense = None
    elif mode == MODE_DENSE:
        k = None
        expected = t * (4 + m * n * 4)
        if len(cur.data) - cur.offset != expected:
            raise RsatError(f"{path}: body size does not match layout")
        record = np.dtype([("obs", "<u4"), ("rows", "<f4", (m, n))])
        body = np.frombuffer(cur.take(expected), dtype=record)
        topk = None
        dense = body["rows"].astype(np.float64)
    else:
        raise RsatError(f"{path}: unknown storage mode {mode}")
    if cur.offset != len(cur.data):
        raise RsatError(f"{path}: trailing bytes")
    return RawTrace(
        doc_id=doc_id,
        model_ids=model_ids,
        vocab_size=n,
        observed=body["obs"].astype(np.int64),
        mode=mode,
        k=k,
        topk=topk,
        dense=dense,
    )


def stored_observed_prob(trace: RawTrace, model_index: int, position: int) -> float:
    """The stored probability of the observed token at one position."""
    if trace.mode == MODE_TOPK:
        return float(trace.topk[model_index].observed_prob[position])
    observed = int(trace.observed[position])
    return float(trace.dense[position, model_index, observed])
