"""Run a set of causal LMs over a corpus and emit RSAT trace files.

All models must share one tokenizer (same event space); this is verified by
comparing vocabulary sizes and a probe-sentence round trip across every
model's tokenizer before any forward pass. Each document is tokenized once; a
BOS anchor is prepended unless the tokenization already starts with one, so a
document with T real tokens contributes T scoring positions, position t
holding every model's next-token distribution given tokens < t.

Models are loaded one at a time (one model in device memory); documents run
in padded batches. An out-of-memory error halves the batch and retries once
before failing the affected documents with diagnostics. Optionally one
designated model's logits are distorted (temperature, nucleus filter,
smoothing) before writing, to mimic a generator's sampling policy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

from .rsat import TopkRows, write_topk_trace

logger = logging.getLogger("trace_extractor")

PROBE_SENTENCE = "The 3 quick brown foxes jumped over 12 lazy dogs -- probe #7!"


class ExtractionError(Exception):
    """Extraction cannot proceed (tokenizer mismatch, model failure)."""


@dataclass
class DocumentSpec:
    doc_id: str
    text: str
    label: str = "human"
    generator: str | None = None
    language: str = "en"
    source_corpus: str = "unknown"
    prompt_len: int | None = None


@dataclass
class DistortionSettings:
    temperature: float = 1.0
    top_p: float = 1.0
    smoothing_eps: float = 0.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ExtractionError(f"temperature must be positive, got {self.temperature!r}")
        if not 0 < self.top_p <= 1:
            raise ExtractionError(f"top_p must be in (0, 1], got {self.top_p!r}")
        if self.smoothing_eps < 0:
            raise ExtractionError(f"smoothing_eps must be >= 0, got {self.smoothing_eps!r}")


@dataclass
class ExtractionJob:
    models: list[str]
    documents: list[DocumentSpec]
    out_dir: Path
    top_k: int = 1024
    device: str = "cpu"
    batch_size: int = 4
    max_positions: int = 512
    distort_model: str | None = None
    distortion: DistortionSettings = field(default_factory=DistortionSettings)

    def __post_init__(self):
        if not self.models:
            raise ExtractionError("at least one model is required")
        if not self.documents:
            raise ExtractionError("no documents to extract")
        self.out_dir = Path(self.out_dir)


def model_label(ref: str) -> str:
    """Stable trace label for a model path or hub id (its last component)."""
    return str(ref).rstrip("/").split("/")[-1]


def check_tokenizer_consistency(model_refs: list[str]):
    """Verify all models share one tokenizer; returns the first one.

    Compares vocabulary sizes and round-trips a probe sentence through every
    tokenizer, requiring identical token ids and identical decoded text.
    Runs before any forward pass.
    """
    reference = AutoTokenizer.from_pretrained(model_refs[0])
    ref_ids = reference.encode(PROBE_SENTENCE, add_special_tokens=False)
    ref_text = reference.decode(ref_ids)
    for ref in model_refs[1:]:
        other = AutoTokenizer.from_pretrained(ref)
        if len(other) != len(reference):
            raise ExtractionError(
                f"tokenizer mismatch: {model_refs[0]} has vocabulary {len(reference)}, "
                f"{ref} has {len(other)}"
            )
        ids = other.encode(PROBE_SENTENCE, add_special_tokens=False)
        if ids != ref_ids or other.decode(ids) != ref_text:
            raise ExtractionError(
                f"tokenizer mismatch: probe round trip differs between "
                f"{model_refs[0]} and {ref}"
            )
    return reference


def apply_distortion(logits: np.ndarray, settings: DistortionSettings) -> np.ndarray:
    """Temperature-scale, softmax, nucleus-filter, and smooth one logit row."""
    scaled = logits.astype(np.float64) / settings.temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    if settings.top_p >= 1.0 and settings.smoothing_eps == 0.0:
        return probs
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    cut = int(np.searchsorted(cumulative, settings.top_p - 1e-12, side="left"))
    kept = order[: min(cut + 1, probs.size)]
    n_filtered = probs.size - kept.size
    eps = settings.smoothing_eps
    out = np.full(probs.size, eps)
    out[kept] = (probs[kept] / probs[kept].sum()) * (1.0 - eps * n_filtered)
    return out


def _bos_id(tokenizer) -> int:
    for candidate in (tokenizer.bos_token_id, tokenizer.eos_token_id):
        if candidate is not None:
            return int(candidate)
    raise ExtractionError("tokenizer defines neither BOS nor EOS to anchor position 0")


def tokenize_document(tokenizer, text: str, max_positions: int) -> list[int]:
    """Token ids with a BOS anchor prepended (unless already present)."""
    ids = tokenizer.encode(text, add_special_tokens=False)
    bos = _bos_id(tokenizer)
    if not ids or ids[0] != bos:
        ids = [bos] + ids
    if len(ids) < 2:
        raise ExtractionError("document has no scorable tokens")
    return ids[: max_positions + 1]


def top_k_rows(probs: np.ndarray, observed: np.ndarray, k: int) -> TopkRows:
    """Select per-position top-K entries (ties toward lower token index)."""
    t, n = probs.shape
    k = min(k, n)
    ids = np.empty((t, k), dtype=np.int64)
    kept = np.empty((t, k))
    for ti in range(t):
        row = probs[ti]
        part = np.argpartition(-row, k - 1)[:k]
        order = part[np.lexsort((part, -row[part]))]
        ids[ti] = order
        kept[ti] = row[order]
    tail = np.maximum(0.0, 1.0 - kept.sum(axis=1))
    observed_prob = probs[np.arange(t), observed]
    return TopkRows(ids=ids, probs=kept, tail=tail, observed_prob=observed_prob)


def _forward_probs(model, batch_ids: list[list[int]], device: str) -> list[np.ndarray]:
    """Next-token distributions for each document of a padded batch.

    Returns, per document with ids [bos, w_1, ..., w_T], a (T, N) float64
    array where row t-1 is the model's distribution for w_t given ids < t.
    """
    lengths = [len(ids) for ids in batch_ids]
    width = max(lengths)
    input_ids = torch.zeros((len(batch_ids), width), dtype=torch.long)
    attention = torch.zeros((len(batch_ids), width), dtype=torch.long)
    for i, ids in enumerate(batch_ids):
        input_ids[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        attention[i, : len(ids)] = 1
    with torch.no_grad():
        logits = model(
            input_ids=input_ids.to(device), attention_mask=attention.to(device)
        ).logits
    out = []
    for i, length in enumerate(lengths):
        doc_logits = logits[i, : length - 1, :].double()
        out.append(torch.softmax(doc_logits, dim=-1).cpu().numpy())
    return out


def _forward_with_retry(model, batch_ids, device):
    """Halve the batch and retry once on out-of-memory, then give up."""
    try:
        return _forward_probs(model, batch_ids, device)
    except (torch.cuda.OutOfMemoryError, RuntimeError) as exc:
        if "out of memory" not in str(exc).lower():
            raise
        logger.warning("out of memory on batch of %d; halving and retrying", len(batch_ids))
        if torch.cuda.is_available():
            torch.cuda.empty_cache()
        half = max(1, len(batch_ids) // 2)
        results = []
        for lo in range(0, len(batch_ids), half):
            results.extend(_forward_probs(model, batch_ids[lo : lo + half], device))
        return results


def extract(job: ExtractionJob) -> tuple[list[Path], Path]:
    """Run every model over every document and write RSAT traces + manifest."""
    tokenizer = check_tokenizer_consistency(job.models)
    job.out_dir.mkdir(parents=True, exist_ok=True)

    token_ids = [
        tokenize_document(tokenizer, doc.text, job.max_positions)
        for doc in job.documents
    ]
    model_ids = [model_label(ref) for ref in job.models]
    if len(set(model_ids)) != len(model_ids):
        raise ExtractionError(f"model labels collide: {model_ids}")

    distort_label = model_label(job.distort_model) if job.distort_model else None
    per_doc_blocks: list[list[TopkRows]] = [[] for _ in job.documents]
    vocab_size = None

    for ref, label in zip(job.models, model_ids):
        logger.info("loading %s", ref)
        model = AutoModelForCausalLM.from_pretrained(ref).to(job.device).eval()
        for lo in range(0, len(job.documents), job.batch_size):
            batch = token_ids[lo : lo + job.batch_size]
            try:
                probs_list = _forward_with_retry(model, batch, job.device)
            except Exception as exc:
                raise ExtractionError(
                    f"model {label} failed on documents "
                    f"{[d.doc_id for d in job.documents[lo : lo + job.batch_size]]}: {exc}"
                ) from exc
            for offset, probs in enumerate(probs_list):
                doc_index = lo + offset
                if vocab_size is None:
                    vocab_size = probs.shape[1]
                elif vocab_size != probs.shape[1]:
                    raise ExtractionError(
                        f"model {label} emits vocabulary {probs.shape[1]}, "
                        f"expected {vocab_size}"
                    )
                if label == distort_label:
                    # log of an underflowed probability is -inf; the distortion
                    # softmax maps it straight back to 0
                    with np.errstate(divide="ignore"):
                        probs = np.stack(
                            [apply_distortion(np.log(row), job.distortion) for row in probs]
                        )
                observed = np.asarray(token_ids[doc_index][1:], dtype=np.int64)
                per_doc_blocks[doc_index].append(
                    top_k_rows(probs, observed, job.top_k)
                )
        del model

    trace_paths = []
    manifest_rows = []
    for doc, ids, blocks in zip(job.documents, token_ids, per_doc_blocks):
        observed = np.asarray(ids[1:], dtype=np.int64)
        path = job.out_dir / f"{doc.doc_id}.rsat"
        write_topk_trace(
            path,
            doc_id=doc.doc_id,
            model_ids=model_ids,
            vocab_size=vocab_size,
            observed=observed,
            models=blocks,
        )
        trace_paths.append(path)
        row = {
            "trace_path": path.name,
            "label": doc.label,
            "generator": doc.generator,
            "language": doc.language,
            "source_corpus": doc.source_corpus,
            "doc_id": doc.doc_id,
        }
        if doc.prompt_len is not None:
            row["prompt_len"] = doc.prompt_len
        manifest_rows.append(row)

    manifest_path = job.out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for row in manifest_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return trace_paths, manifest_path


def load_corpus(path, default_label: str = "human") -> list[DocumentSpec]:
    """Read document specs from a JSON-lines corpus description.

    Each record carries ``text`` or ``text_path`` (relative to the corpus
    file) plus optional label/generator/language/source_corpus/doc_id/
    prompt_len fields.
    """
    path = Path(path)
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            if "text" in raw:
                text = raw["text"]
            elif "text_path" in raw:
                text = (path.parent / raw["text_path"]).read_text(encoding="utf-8")
            else:
                raise ExtractionError(f"{path}:{lineno}: record needs text or text_path")
            doc_id = raw.get("doc_id")
            if doc_id is None:
                doc_id = (
                    Path(raw["text_path"]).stem if "text_path" in raw else f"doc{lineno:05d}"
                )
            docs.append(
                DocumentSpec(
                    doc_id=doc_id,
                    text=text,
                    label=raw.get("label", default_label),
                    generator=raw.get("generator"),
                    language=raw.get("language", "en"),
                    source_corpus=raw.get("source_corpus", path.stem),
                    prompt_len=raw.get("prompt_len"),
                )
            )
    if not docs:
        raise ExtractionError(f"{path}: empty corpus")
    return docs
