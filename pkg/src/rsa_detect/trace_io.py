"""Bit-exact storage of ensemble traces, dataset manifests, and channels.

Trace files use the RSAT binary container. All integers are little-endian
unsigned 32-bit unless stated, strings are length-prefixed UTF-8, and stored
probabilities are little-endian float32.

Header layout:

    magic           4 bytes, b"RSAT"
    format_version  u32 (currently 1)
    doc_id          u32 length + bytes
    M, N, T         u32 each (models, vocabulary, positions)
    model_ids       M x (u32 length + bytes)
    storage_mode    u8, 0 = dense, 1 = topk
    float_width     u8, always 32
    K               u32, topk mode only

Body, per position t: the observed token id (u32), then per model either the
full row of N float32 probabilities (dense) or K (token id u32, probability
f32) pairs sorted by descending probability, one tail-mass f32, and one f32
holding the model's exact probability of the observed token even when it falls
outside the top K. Storing that value keeps the observed token's probability
exact relative to the stored entries (the loader's final renormalization
rescales the whole row by one recorded factor); only cross-entropy sums are
approximated, and how the unlisted tail was reconstructed is recorded in the
loaded trace's provenance.

Dense full-vocabulary storage at realistic sizes (N around 32k, T around 700,
M of 4) runs to hundreds of megabytes per document, hence the topk default.
Row mass is validated to 1e-4 at this 32-bit boundary and rows are then
renormalized exactly, so in-memory traces meet the 1e-9 internal tolerance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .info import TokenChannel
from .scoring import EnsembleTrace, UnigramModel
from .validation import TraceFormatError, ValidationError

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "ManifestRecord",
    "write_trace",
    "load_trace",
    "restrict_trace_topk",
    "load_manifest",
    "write_manifest",
    "load_channel_json",
    "save_unigram_model",
    "load_unigram_model",
]

MAGIC = b"RSAT"
FORMAT_VERSION = 1
_MODE_DENSE = 0
_MODE_TOPK = 1
_MODES = {"dense": _MODE_DENSE, "topk": _MODE_TOPK}
_FILE_MASS_ATOL = 1e-4
_TAIL_POLICIES = ("uniform_spread", "truncate_renormalize")

_U32 = struct.Struct("<I")
LABELS = ("human", "artificial")


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise TraceFormatError(f"{self.path}: truncated file")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        length = self.u32()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceFormatError(f"{self.path}: invalid UTF-8 string") from exc


def _topk_row_dtype(k: int) -> np.dtype:
    pair = np.dtype([("id", "<u4"), ("p", "<f4")])
    return np.dtype([("pairs", pair, (k,)), ("tail", "<f4"), ("obsp", "<f4")])


def write_trace(trace: EnsembleTrace, path, mode: str = "topk", k: int = 1024) -> Path:
    """Serialize a trace; in topk mode K must not exceed the vocabulary."""
    if mode not in _MODES:
        raise ValidationError(f"storage mode must be one of {sorted(_MODES)}, got {mode!r}")
    t, m, n = trace.distributions.shape
    if mode == "topk" and not 1 <= k <= n:
        raise ValidationError(f"topk width {k} outside [1, {n}]")

    path = Path(path)
    header = bytearray()
    header += MAGIC
    header += _U32.pack(FORMAT_VERSION)
    header += _pack_str(trace.doc_id)
    header += _U32.pack(m) + _U32.pack(n) + _U32.pack(t)
    for model_id in trace.model_ids:
        header += _pack_str(model_id)
    header += bytes([_MODES[mode], 32])
    if mode == "topk":
        header += _U32.pack(k)

    observed = trace.observed_tokens.astype("<u4")
    if mode == "dense":
        record = np.dtype([("obs", "<u4"), ("rows", "<f4", (m, n))])
        body = np.empty(t, dtype=record)
        body["obs"] = observed
        body["rows"] = trace.distributions
    else:
        record = np.dtype([("obs", "<u4"), ("models", _topk_row_dtype(k), (m,))])
        body = np.empty(t, dtype=record)
        body["obs"] = observed
        for ti in range(t):
            for mi in range(m):
                row = trace.distributions[ti, mi]
                order = np.argsort(-row, kind="stable")[:k]
                kept = row[order]
                entry = body["models"][ti, mi]
                entry["pairs"]["id"] = order
                entry["pairs"]["p"] = kept
                entry["tail"] = max(0.0, 1.0 - float(kept.sum()))
                entry["obsp"] = row[int(observed[ti])]

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(body.tobytes())
    return path


def _expand_topk_row(
    ids: np.ndarray,
    probs: np.ndarray,
    tail: float,
    observed_prob: float,
    observed: int,
    n: int,
    tail_policy: str,
    where: str,
) -> np.ndarray:
    if tail < 0:
        raise TraceFormatError(f"{where}: negative tail mass {tail!r}")
    if observed_prob < 0:
        raise TraceFormatError(f"{where}: negative observed probability {observed_prob!r}")
    if np.any(np.diff(probs) > 0):
        raise TraceFormatError(f"{where}: probabilities not sorted descending")
    if ids.size and (ids.max() >= n or np.unique(ids).size != ids.size):
        raise TraceFormatError(f"{where}: invalid or duplicate token ids")
    total = float(probs.sum()) + tail
    if abs(total - 1.0) > _FILE_MASS_ATOL:
        raise TraceFormatError(f"{where}: stored mass {total!r} outside 1 +- {_FILE_MASS_ATOL}")

    row = np.zeros(n)
    row[ids] = probs
    if tail_policy == "uniform_spread" and ids.size < n:
        unlisted = np.ones(n, dtype=bool)
        unlisted[ids] = False
        row[unlisted] = tail / (n - ids.size)
    row[observed] = observed_prob
    total = row.sum()
    if total <= 0:
        raise TraceFormatError(f"{where}: row has no probability mass")
    return row / total


def load_trace(path, tail_policy: str = "uniform_spread") -> EnsembleTrace:
    """Load an RSAT file, widening to float64 and renormalizing each row.

    ``tail_policy`` controls how topk rows reconstruct unlisted tokens:
    ``uniform_spread`` shares the stored tail mass equally among them (keeping
    rows strictly positive), ``truncate_renormalize`` drops the tail. Either
    way the observed token is reset to its stored exact probability before the
    final renormalization, and the policy is recorded in trace provenance.
    """
    if tail_policy not in _TAIL_POLICIES:
        raise ValidationError(
            f"tail_policy must be one of {_TAIL_POLICIES}, got {tail_policy!r}"
        )
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)

    if reader.take(4) != MAGIC:
        raise TraceFormatError(f"{path}: bad magic, not an RSAT file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"{path}: unsupported format version {version}")
    doc_id = reader.string()
    m, n, t = reader.u32(), reader.u32(), reader.u32()
    if min(m, n, t) < 1:
        raise TraceFormatError(f"{path}: degenerate dimensions M={m} N={n} T={t}")
    model_ids = tuple(reader.string() for _ in range(m))
    mode = reader.u8()
    float_width = reader.u8()
    if mode not in (_MODE_DENSE, _MODE_TOPK):
        raise TraceFormatError(f"{path}: unknown storage mode {mode}")
    if float_width != 32:
        raise TraceFormatError(f"{path}: unsupported float width {float_width}")
    k = None
    if mode == _MODE_TOPK:
        k = reader.u32()
        if not 1 <= k <= n:
            raise TraceFormatError(f"{path}: topk width {k} outside [1, {n}]")

    # size arithmetic before any dtype construction, so absurd header
    # dimensions from a corrupt file fail cleanly here
    if mode == _MODE_DENSE:
        expected = t * (4 + m * n * 4)
    else:
        expected = t * (4 + m * (k * 8 + 8))
    remaining = len(reader.data) - reader.offset
    if remaining != expected:
        raise TraceFormatError(
            f"{path}: body holds {remaining} bytes, layout requires {expected}"
        )
    if mode == _MODE_DENSE:
        record = np.dtype([("obs", "<u4"), ("rows", "<f4", (m, n))])
    else:
        record = np.dtype([("obs", "<u4"), ("models", _topk_row_dtype(k), (m,))])
    body = np.frombuffer(reader.take(expected), dtype=record)

    observed = body["obs"].astype(np.int64)
    if observed.size and observed.max() >= n:
        raise TraceFormatError(f"{path}: observed token outside vocabulary")

    if mode == _MODE_DENSE:
        dist = body["rows"].astype(np.float64)
        sums = dist.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > _FILE_MASS_ATOL):
            worst = float(np.abs(sums - 1.0).max())
            raise TraceFormatError(
                f"{path}: dense row mass off by {worst:.3e}, beyond {_FILE_MASS_ATOL}"
            )
        dist /= sums[:, :, None]
    else:
        dist = np.empty((t, m, n))
        for ti in range(t):
            for mi in range(m):
                entry = body["models"][ti, mi]
                dist[ti, mi] = _expand_topk_row(
                    entry["pairs"]["id"].astype(np.int64),
                    entry["pairs"]["p"].astype(np.float64),
                    float(entry["tail"]),
                    float(entry["obsp"]),
                    int(observed[ti]),
                    n,
                    tail_policy,
                    f"{path} position {ti} model {mi}",
                )

    provenance = {
        "path": str(path),
        "storage_mode": "dense" if mode == _MODE_DENSE else "topk",
        "tail_policy": tail_policy if mode == _MODE_TOPK else None,
        "k": k,
        "float_width": 32,
    }
    return EnsembleTrace(
        doc_id=doc_id,
        model_ids=model_ids,
        observed_tokens=observed,
        distributions=dist,
        provenance=provenance,
    )


def restrict_trace_topk(trace: EnsembleTrace, k: int, tail_policy: str = "uniform_spread") -> EnsembleTrace:
    """In-memory top-K truncation mirroring the storage round trip.

    Unlike the file path this stays in float64; it exists to quantify what
    narrower storage would do to scores without writing files.
    """
    if tail_policy not in _TAIL_POLICIES:
        raise ValidationError(
            f"tail_policy must be one of {_TAIL_POLICIES}, got {tail_policy!r}"
        )
    t, m, n = trace.distributions.shape
    if not 1 <= k <= n:
        raise ValidationError(f"topk width {k} outside [1, {n}]")
    dist = np.empty_like(trace.distributions)
    for ti in range(t):
        observed = int(trace.observed_tokens[ti])
        for mi in range(m):
            row = trace.distributions[ti, mi]
            order = np.argsort(-row, kind="stable")[:k]
            dist[ti, mi] = _expand_topk_row(
                order,
                row[order],
                max(0.0, 1.0 - float(row[order].sum())),
                float(row[observed]),
                observed,
                n,
                tail_policy,
                f"position {ti} model {mi}",
            )
    provenance = dict(trace.provenance or {})
    provenance.update({"restricted_k": k, "tail_policy": tail_policy})
    return EnsembleTrace(
        doc_id=trace.doc_id,
        model_ids=trace.model_ids,
        observed_tokens=trace.observed_tokens,
        distributions=dist,
        provenance=provenance,
    )


@dataclass
class ManifestRecord:
    """One labeled document in a dataset manifest (JSON-lines)."""

    trace_path: Path
    label: str
    generator: str | None
    language: str
    source_corpus: str
    doc_id: str | None = None
    prompt_len: int | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        self.trace_path = Path(self.trace_path)
        if self.doc_id is None:
            self.doc_id = self.trace_path.stem


_MANIFEST_REQUIRED = ("trace_path", "label", "generator", "language", "source_corpus")


def load_manifest(path) -> list[ManifestRecord]:
    """Parse a JSON-lines manifest, resolving trace paths against its parent."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(raw, dict):
                raise TraceFormatError(f"{path}:{lineno}: expected an object")
            missing = [key for key in _MANIFEST_REQUIRED if key not in raw]
            if missing:
                raise TraceFormatError(f"{path}:{lineno}: missing fields {missing}")
            records.append(
                ManifestRecord(
                    trace_path=path.parent / raw["trace_path"],
                    label=raw["label"],
                    generator=raw["generator"],
                    language=raw["language"],
                    source_corpus=raw["source_corpus"],
                    doc_id=raw.get("doc_id"),
                    prompt_len=raw.get("prompt_len"),
                )
            )
    return records


def write_manifest(records, path, base_dir=None) -> Path:
    """Write manifest records as JSON-lines with paths relative to base_dir."""
    path = Path(path)
    base = Path(base_dir) if base_dir is not None else path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            trace_path = Path(rec.trace_path)
            try:
                rel = trace_path.relative_to(base)
            except ValueError:
                rel = trace_path
            payload = {
                "trace_path": str(rel),
                "label": rec.label,
                "generator": rec.generator,
                "language": rec.language,
                "source_corpus": rec.source_corpus,
                "doc_id": rec.doc_id,
            }
            if rec.prompt_len is not None:
                payload["prompt_len"] = rec.prompt_len
            fh.write(json.dumps(payload, sort_keys=True) + "\n")
    return path


def load_channel_json(path) -> TokenChannel:
    """Parse {"rows": [[...]], "model_ids": [...]} into a TokenChannel."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(raw, dict) or "rows" not in raw:
        raise TraceFormatError(f"{path}: expected an object with a 'rows' field")
    return TokenChannel(np.asarray(raw["rows"], dtype=np.float64), tuple(raw.get("model_ids", ())))


def save_unigram_model(model: UnigramModel, path) -> Path:
    path = Path(path)
    payload = {
        "vocab_size": model.vocab_size,
        "token_probs": model.token_probs.tolist(),
        "training_token_count": model.training_token_count,
        "eps": model.eps,
    }
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def load_unigram_model(path) -> UnigramModel:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"{path}: malformed JSON: {exc}") from exc
    for key in ("token_probs", "training_token_count", "eps"):
        if key not in raw:
            raise TraceFormatError(f"{path}: missing field {key!r}")
    return UnigramModel(
        token_probs=np.asarray(raw["token_probs"], dtype=np.float64),
        training_token_count=int(raw["training_token_count"]),
        eps=float(raw["eps"]),
    )
