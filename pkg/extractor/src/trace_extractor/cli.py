"""Command line for trace extraction and verification.

    trace-extract extract --models a,b --input corpus.jsonl --topk 1024 --out dir
    trace-extract verify --trace dir/doc.rsat --model a --positions 10

Extraction writes one RSAT file per document plus a dataset manifest
(JSON-lines) consumable by the scoring engine's `eval` command.
"""

from __future__ import annotations

import logging
import os
import sys

import click

from .extraction import (
    DistortionSettings,
    ExtractionError,
    ExtractionJob,
    extract,
    load_corpus,
)
from .rsat import RsatError
from .verify import verify_trace


@click.group()
def cli():
    """Emit and verify ensemble trace files from causal language models."""
    level = os.environ.get("TRACE_EXTRACT_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO))


@cli.command("extract")
@click.option("--models", required=True, help="Comma-separated model paths or hub ids sharing one tokenizer.")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False), help="JSON-lines corpus (text or text_path per record).")
@click.option("--topk", type=int, default=1024, show_default=True, help="Stored top-K width (clamped to the vocabulary).")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory for traces and manifest.")
@click.option("--device", default="cpu", show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--max-positions", type=int, default=512, show_default=True, help="Truncate documents to this many scoring positions.")
@click.option("--distort-model", default=None, help="Apply the sampling distortion to this model's logits before writing.")
@click.option("--temperature", type=float, default=0.6, show_default=True)
@click.option("--top-p", type=float, default=0.9, show_default=True)
@click.option("--smoothing-eps", type=float, default=1e-6, show_default=True)
def extract_cmd(models, input_path, topk, out, device, batch_size, max_positions,
                distort_model, temperature, top_p, smoothing_eps):
    """Run the models over a corpus and write RSAT traces + manifest."""
    job = ExtractionJob(
        models=[m.strip() for m in models.split(",") if m.strip()],
        documents=load_corpus(input_path),
        out_dir=out,
        top_k=topk,
        device=device,
        batch_size=batch_size,
        max_positions=max_positions,
        distort_model=distort_model,
        distortion=DistortionSettings(temperature, top_p, smoothing_eps),
    )
    trace_paths, manifest = extract(job)
    click.echo(f"wrote {len(trace_paths)} traces and {manifest}")


@cli.command("verify")
@click.option("--trace", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_ref", required=True, help="Model path or hub id present in the trace.")
@click.option("--positions", type=int, default=10, show_default=True)
@click.option("--rel-tol", type=float, default=1e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def verify_cmd(trace, model_ref, positions, rel_tol, seed):
    """Recompute sampled positions with the live model and compare."""
    report = verify_trace(trace, model_ref, positions, rel_tol, seed)
    for check in report.checks:
        status = "ok" if check.ok else "MISMATCH"
        click.echo(
            f"position {check.position}: stored {check.stored:.6g} "
            f"recomputed {check.recomputed:.6g} rel {check.relative_error:.2e} {status}"
        )
    if not report.ok:
        click.echo(
            f"mismatches at positions {report.mismatched_positions}", err=True
        )
        raise SystemExit(1)
    click.echo(f"all {len(report.checks)} sampled positions match")


def main(argv=None) -> int:
    try:
        return cli.main(args=argv, standalone_mode=False) or 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except (ExtractionError, RsatError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except OSError as exc:
        click.echo(f"io error: {exc}", err=True)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
