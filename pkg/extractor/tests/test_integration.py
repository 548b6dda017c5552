"""End-to-end acceptance: extract -> score -> eval, plus trace verification.

The scoring engine is exercised strictly through its console script (the
RSAT files and manifest written here are the only coupling), so this suite
doubles as a cross-implementation test of the trace format.
"""

import csv
import shutil
import subprocess

import numpy as np
import pytest
from transformers import AutoModelForCausalLM, AutoTokenizer

from trace_extractor import (
    DocumentSpec,
    ExtractionJob,
    extract,
    read_trace,
    verify_trace,
    write_topk_trace,
)
from trace_extractor.cli import main as extractor_main

from conftest import write_corpus_jsonl


CRITERION_LINES: list[str] = []


def _emit(line):
    CRITERION_LINES.append(line)
    print(line, flush=True)


def _run_scorer(args):
    exe = shutil.which("rsa-detect")
    if exe is None:
        pytest.skip("rsa-detect console script not installed")
    return subprocess.run([exe, *args], capture_output=True, text=True)


@pytest.fixture(scope="module")
def extracted(tmp_path_factory, corpus_texts, model_dirs):
    out_dir = tmp_path_factory.mktemp("traces")
    corpus = write_corpus_jsonl(out_dir / "corpus.jsonl", corpus_texts, n_artificial=10)
    code = extractor_main(
        [
            "extract",
            "--models",
            f"{model_dirs[0]},{model_dirs[1]}",
            "--input",
            str(corpus),
            "--topk",
            "16",
            "--out",
            str(out_dir / "rsat"),
        ]
    )
    assert code == 0
    return out_dir / "rsat", model_dirs


def test_extract_score_eval_completes(extracted, tmp_path):
    with_pass = False
    trace_dir, _ = extracted
    traces = sorted(trace_dir.glob("*.rsat"))
    assert len(traces) == 20
    manifest = trace_dir / "manifest.jsonl"
    assert manifest.exists()

    scores_csv = tmp_path / "scores.csv"
    result = _run_scorer(
        ["score", str(trace_dir), "--methods", "rsa_avg,rsa_max,ppl", "--out", str(scores_csv)]
    )
    assert result.returncode == 0, result.stderr
    with open(scores_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    # 20 docs x (rsa_avg + rsa_max + 2 singles + average)
    assert len(rows) == 20 * 5

    report_dir = tmp_path / "report"
    result = _run_scorer(["eval", str(scores_csv), str(manifest), "--out", str(report_dir)])
    assert result.returncode == 0, result.stderr
    with open(report_dir / "summary.csv", newline="") as fh:
        summary = list(csv.DictReader(fh))
    assert {r["method"] for r in summary} >= {"rsa_avg", "rsa_max", "ppl_average"}
    assert all(0.0 <= float(r["auroc"]) <= 1.0 for r in summary)
    with_pass = True
    _emit("[PASS] Extractor integration: extract -> score -> eval completed")
    assert with_pass


def test_verify_trace_matches_live_model(extracted):
    trace_dir, model_dirs = extracted
    tokenizer = AutoTokenizer.from_pretrained(model_dirs[0])
    models = {
        ref: AutoModelForCausalLM.from_pretrained(ref).eval()
        for ref in (str(model_dirs[0]), str(model_dirs[1]))
    }
    worst = 0.0
    for path in sorted(trace_dir.glob("*.rsat")):
        for ref, model in models.items():
            report = verify_trace(
                path, ref, sample_positions=10, rel_tol=1e-3, seed=0,
                model=model, tokenizer=tokenizer,
            )
            assert report.ok, (
                f"{path.name} {report.model_id}: mismatches at "
                f"{report.mismatched_positions}"
            )
            worst = max(worst, max(c.relative_error for c in report.checks))
    _emit(
        "[PASS] Extractor verification: 10 positions/doc within 1e-3 "
        f"(worst {worst:.2e})"
    )


def test_one_position_shift_is_detected(extracted, tmp_path):
    trace_dir, model_dirs = extracted
    source = sorted(trace_dir.glob("*.rsat"))[0]
    trace = read_trace(source)

    shifted_blocks = []
    for block in trace.topk:
        shifted_blocks.append(
            type(block)(
                ids=np.roll(block.ids, -1, axis=0),
                probs=np.roll(block.probs, -1, axis=0),
                tail=np.roll(block.tail, -1),
                observed_prob=np.roll(block.observed_prob, -1),
            )
        )
    shifted_path = tmp_path / "shifted.rsat"
    write_topk_trace(
        shifted_path,
        trace.doc_id,
        trace.model_ids,
        trace.vocab_size,
        trace.observed,
        shifted_blocks,
    )

    report = verify_trace(shifted_path, str(model_dirs[0]), sample_positions=10, seed=0)
    assert not report.ok
    assert report.mismatched_positions
    _emit("[PASS] Extractor fault injection: one-position shift detected")


def test_cli_verify_subcommand(extracted):
    trace_dir, model_dirs = extracted
    path = sorted(trace_dir.glob("*.rsat"))[0]
    code = extractor_main(
        ["verify", "--trace", str(path), "--model", str(model_dirs[0]), "--positions", "5"]
    )
    assert code == 0
