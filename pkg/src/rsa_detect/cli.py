"""Command-line entry point: score traces, evaluate, solve channels.

Subcommands: ``score``, ``eval``, ``ba``, ``unigram-train``, ``distort``.
Outputs are deterministic for identical inputs and configuration (no
timestamps in data files); document order in outputs follows input order
regardless of scheduling. The ``RSA_DETECT_LOG`` environment variable sets the
log level.

Exit codes are a stable contract for scripting:

    0  success
    1  validation error (bad arguments, invalid values, bad labels)
    2  I/O error (unreadable or corrupt files)
    3  internal numeric failure (undefined scores, non-finite results)
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import metrics, scoring, trace_io
from .capacity import SolverConfig, solve
from .validation import TraceFormatError, UndefinedScoreError, ValidationError

logger = logging.getLogger("rsa_detect")

_BINOCULARS_RE = re.compile(r"^binoculars\(obs=([^,)]+),perf=([^)]+)\)$")


@dataclass
class RunConfig:
    """Resolved options for one invocation; validated before any work."""

    variant: str = "avg"
    tolerance: float = 1e-9
    max_iterations: int = 1000
    tail_policy: str = "uniform_spread"
    topk: int | None = None
    target_fpr: float = 0.05
    threads: int = 0
    seed: int | None = None
    per_token: bool = False
    methods: list[str] = field(default_factory=list)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(tolerance=self.tolerance, max_iterations=self.max_iterations)


def _configure_logging():
    level = os.environ.get("RSA_DETECT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _float_str(value) -> str:
    return repr(float(value))


@click.group()
@click.option("--seed", type=int, default=None, help="Seed for randomized utilities; the scoring pipeline itself is deterministic.")
@click.pass_context
def cli(ctx, seed):
    """Ensemble artificial-text detection scoring and evaluation."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    if seed is not None:
        np.random.seed(seed)


def _collect_trace_paths(inputs) -> list[Path]:
    # existence is validated up front; per-file load errors surface later
    # with diagnostics so one corrupt trace cannot hide partial results
    paths: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            found = sorted(p.glob("*.rsat"))
            if not found:
                raise ValidationError(f"no .rsat files found in directory {p}")
            paths.extend(found)
        elif p.exists():
            paths.append(p)
        else:
            raise ValidationError(f"trace path {p} does not exist")
    if not paths:
        raise ValidationError("no trace inputs given")
    return paths


def _split_method_tokens(spec: str) -> list[str]:
    # commas inside binoculars(obs=...,perf=...) do not separate methods
    tokens, depth, current = [], 0, []
    for ch in spec:
        if ch == "," and depth == 0:
            tokens.append("".join(current).strip())
            current = []
        else:
            depth += ch == "("
            depth -= ch == ")"
            current.append(ch)
    tokens.append("".join(current).strip())
    return [tok for tok in tokens if tok]


def _parse_methods(spec: str | None, variant: str) -> list[str]:
    if not spec:
        return [f"rsa_{variant}"]
    methods = _split_method_tokens(spec)
    for token in methods:
        if token in ("rsa", "rsa_avg", "rsa_max", "ppl", "qstar"):
            continue
        if _BINOCULARS_RE.match(token):
            continue
        raise ValidationError(
            f"unknown method {token!r}; expected rsa, rsa_avg, rsa_max, ppl, qstar, "
            "or binoculars(obs=<model>,perf=<model>)"
        )
    return methods


def _score_one(path: Path, cfg: RunConfig):
    trace = trace_io.load_trace(path, tail_policy=cfg.tail_policy)
    if cfg.topk is not None:
        trace = trace_io.restrict_trace_topk(trace, cfg.topk, cfg.tail_policy)
    solver = cfg.solver_config()
    records = []
    for token in cfg.methods:
        if token in ("rsa", "rsa_avg", "rsa_max"):
            variant = cfg.variant if token == "rsa" else token.removeprefix("rsa_")
            records.append(
                scoring.rsa_score(
                    trace, variant=variant, config=solver, per_token=cfg.per_token
                )
            )
        elif token == "ppl":
            for rec in scoring.ppl_scores(trace, config=solver):
                if rec.method != scoring.METHOD_QSTAR_LOGPROB:
                    records.append(rec)
        elif token == "qstar":
            for rec in scoring.ppl_scores(trace, config=solver):
                if rec.method == scoring.METHOD_QSTAR_LOGPROB:
                    records.append(rec)
        else:
            observer, performer = _BINOCULARS_RE.match(token).groups()
            records.append(scoring.binoculars_score(trace, observer, performer))
    return trace, records


@cli.command()
@click.argument("traces", nargs=-1, required=True)
@click.option("--methods", default=None, help="Comma-separated method list: rsa, rsa_avg, rsa_max, ppl, qstar, binoculars(obs=A,perf=B).")
@click.option("--variant", type=click.Choice(["avg", "max"]), default="avg", show_default=True, help="Aggregation used by the plain 'rsa' method token and the default method.")
@click.option("--tolerance", type=float, default=1e-9, show_default=True, help="Mixture-solver capacity increment threshold in bits.")
@click.option("--max-iter", type=int, default=1000, show_default=True, help="Mixture-solver iteration budget per position.")
@click.option("--tail-policy", type=click.Choice(["uniform_spread", "truncate_renormalize"]), default="uniform_spread", show_default=True)
@click.option("--topk", type=int, default=None, help="Re-truncate loaded rows to their top K before scoring (storage-width study).")
@click.option("--threads", type=int, default=0, help="Worker threads; 0 means one per CPU.")
@click.option("--per-token", is_flag=True, help="Also write per-token breakdowns (scores, capacities, weights) as JSON-lines.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Scores CSV path; defaults to stdout.")
def score(traces, methods, variant, tolerance, max_iter, tail_policy, topk, threads, per_token, out):
    """Score trace files (or directories of .rsat files) with the chosen methods."""
    cfg = RunConfig(
        variant=variant,
        tolerance=tolerance,
        max_iterations=max_iter,
        tail_policy=tail_policy,
        topk=topk,
        threads=threads,
        per_token=per_token,
        methods=_parse_methods(methods, variant),
    )
    cfg.solver_config()  # validate numeric options up front
    paths = _collect_trace_paths(traces)
    if per_token and out is None:
        raise ValidationError("--per-token requires --out to name the CSV file")

    def worker(path):
        try:
            return _score_one(path, cfg)
        except (TraceFormatError, OSError, ValidationError, UndefinedScoreError) as exc:
            return exc

    workers = cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)
    if workers == 1 or len(paths) == 1:
        results = [worker(p) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(worker, paths))

    failures = [(p, r) for p, r in zip(paths, results) if isinstance(r, Exception)]
    successes = [(p, r) for p, r in zip(paths, results) if not isinstance(r, Exception)]

    rows = []
    token_lines = []
    for _, (trace, records) in successes:
        for rec in records:
            rows.append(
                [
                    rec.doc_id,
                    rec.method,
                    _float_str(rec.score_bits),
                    trace.num_tokens,
                    rec.n_clamped,
                    rec.n_zero_observed,
                    rec.n_unconverged,
                ]
            )
            if per_token and rec.per_token is not None:
                token_lines.append(
                    {
                        "doc_id": rec.doc_id,
                        "method": rec.method,
                        "tokens": [
                            {
                                "score_bits": ts.score_bits,
                                "capacity_bits": ts.solution.capacity_bits,
                                "weights": ts.solution.weights.tolist(),
                            }
                            for ts in rec.per_token
                        ],
                    }
                )

    header = ["doc_id", "method", "score_bits", "n_tokens", "n_clamped", "n_zero_observed", "n_unconverged"]
    if out is None:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)
    else:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        if per_token:
            token_path = Path(out).with_suffix(".tokens.jsonl")
            with open(token_path, "w", encoding="utf-8") as fh:
                for line in token_lines:
                    fh.write(json.dumps(line) + "\n")

    if failures:
        for path, exc in failures:
            click.echo(f"failed: {path}: {exc}", err=True)
        click.echo(
            f"{len(failures)} of {len(paths)} traces failed; partial results written",
            err=True,
        )
        if any(isinstance(exc, (TraceFormatError, OSError)) for _, exc in failures):
            return 2
        if any(isinstance(exc, (UndefinedScoreError, ArithmeticError)) for _, exc in failures):
            return 3
        return 1
    return 0


@cli.command("eval")
@click.argument("scores_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--fpr", type=float, default=0.05, show_default=True, help="Target false-positive rate for the TPR column and threshold calibration.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Report output directory.")
def eval_cmd(scores_csv, manifest, fpr, out):
    """Evaluate a scores CSV against a labeled dataset manifest."""
    records = _read_scores_csv(scores_csv)
    manifest_records = trace_io.load_manifest(manifest)
    paths = metrics.export_report(records, manifest_records, out, target_fpr=fpr)
    for name, path in sorted(paths.items()):
        click.echo(f"{name}: {path}")
    return 0


def _read_scores_csv(path) -> list[scoring.ScoreRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"doc_id", "method", "score_bits"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise TraceFormatError(f"{path}: scores CSV must have columns {sorted(required)}")
        for row in reader:
            try:
                value = float(row["score_bits"])
            except ValueError as exc:
                raise TraceFormatError(f"{path}: bad score {row['score_bits']!r}") from exc
            records.append(scoring.ScoreRecord(row["doc_id"], row["method"], value))
    return records


@cli.command()
@click.argument("channel_json", type=click.Path(exists=True, dir_okay=False))
@click.option("--tolerance", type=float, default=1e-9, show_default=True)
@click.option("--max-iter", type=int, default=1000, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output JSON path; defaults to stdout.")
def ba(channel_json, tolerance, max_iter, out):
    """Solve a channel JSON file for capacity-achieving weights."""
    channel = trace_io.load_channel_json(channel_json)
    solution = solve(channel, SolverConfig(tolerance=tolerance, max_iterations=max_iter))
    payload = json.dumps(
        {
            "weights": solution.weights.tolist(),
            "mixture": solution.mixture.tolist(),
            "capacity_bits": solution.capacity_bits,
            "iterations": solution.iterations,
            "converged": solution.converged,
        }
    )
    if out is None:
        click.echo(payload)
    else:
        Path(out).write_text(payload + "\n", encoding="utf-8")
    return 0


@cli.command("unigram-train")
@click.argument("tokens_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--vocab-size", type=int, required=True)
@click.option("--eps", type=float, default=1e-10, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Model JSON output path.")
def unigram_train_cmd(tokens_file, vocab_size, eps, out):
    """Train a unigram model from a whitespace-separated token-id file."""
    text = Path(tokens_file).read_text(encoding="utf-8")
    try:
        tokens = [int(tok) for tok in text.split()]
    except ValueError as exc:
        raise TraceFormatError(f"{tokens_file}: expected whitespace-separated integers") from exc
    model = scoring.unigram_train(tokens, vocab_size, eps)
    trace_io.save_unigram_model(model, out)
    click.echo(f"model: {out}")
    return 0


@cli.command()
@click.argument("logits_jsonl", type=click.Path(exists=True, dir_okay=False, allow_dash=True))
@click.option("--temperature", type=float, default=1.0, show_default=True)
@click.option("--top-p", type=float, default=1.0, show_default=True)
@click.option("--eps", type=float, default=0.0, show_default=True, help="Smoothing mass assigned to each filtered token.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output JSON-lines path; defaults to stdout.")
def distort(logits_jsonl, temperature, top_p, eps, out):
    """Apply temperature scaling and nucleus filtering to logit rows."""
    params = scoring.DistortionParams(temperature=temperature, top_p=top_p, smoothing_eps=eps)
    source = sys.stdin if logits_jsonl == "-" else open(logits_jsonl, encoding="utf-8")
    sink = sys.stdout if out is None else open(out, "w", encoding="utf-8")
    try:
        for lineno, line in enumerate(source, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                logits = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{logits_jsonl}:{lineno}: malformed JSON") from exc
            sink.write(json.dumps(scoring.distort(logits, params).tolist()) + "\n")
    finally:
        if source is not sys.stdin:
            source.close()
        if sink is not sys.stdout:
            sink.close()
    return 0


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    _configure_logging()
    try:
        result = cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except (TraceFormatError, OSError) as exc:
        click.echo(f"io error: {exc}", err=True)
        return 2
    except (UndefinedScoreError, ArithmeticError) as exc:
        click.echo(f"numeric error: {exc}", err=True)
        return 3
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
