import csv
import json

import numpy as np
import pytest

from rsa_detect.cli import main
from rsa_detect.scoring import EnsembleTrace
from rsa_detect.trace_io import ManifestRecord, load_unigram_model, write_manifest, write_trace

Z_ROWS = np.array([[1.0, 0.0], [0.5, 0.5]])


def write_z_trace(tmp_path, doc_id="zdoc"):
    trace = EnsembleTrace(doc_id, ("a", "b"), [0], Z_ROWS[None, :, :])
    return write_trace(trace, tmp_path / f"{doc_id}.rsat", mode="dense")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestBa:
    def test_identity_channel(self, tmp_path, capsys):
        channel = tmp_path / "ch.json"
        channel.write_text(json.dumps({"rows": [[1, 0], [0, 1]], "model_ids": ["a", "b"]}))
        assert main(["ba", str(channel)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["weights"] == [0.5, 0.5]
        assert payload["capacity_bits"] == pytest.approx(1.0, abs=1e-12)
        assert payload["converged"] is True

    def test_bad_channel_is_validation_error(self, tmp_path, capsys):
        channel = tmp_path / "ch.json"
        channel.write_text(json.dumps({"rows": [[0.9, 0.2], [0.5, 0.5]]}))
        assert main(["ba", str(channel)]) == 1

    def test_malformed_channel_is_io_error(self, tmp_path, capsys):
        channel = tmp_path / "ch.json"
        channel.write_text("{{{{")
        assert main(["ba", str(channel)]) == 2


class TestScore:
    def test_z_channel_score_csv(self, tmp_path, capsys):
        trace_path = write_z_trace(tmp_path)
        out = tmp_path / "scores.csv"
        assert main(["score", str(trace_path), "--tolerance", "1e-16",
                     "--max-iter", "500000", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 1
        assert rows[0]["doc_id"] == "zdoc"
        assert rows[0]["method"] == "rsa_avg"
        assert float(rows[0]["score_bits"]) == pytest.approx(-0.5, abs=1e-6)

    def test_variant_flag_selects_max(self, tmp_path):
        trace_path = write_z_trace(tmp_path)
        out = tmp_path / "scores.csv"
        assert main(["score", str(trace_path), "--variant", "max", "--tolerance", "1e-16",
                     "--max-iter", "500000", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0]["method"] == "rsa_max"
        assert float(rows[0]["score_bits"]) == pytest.approx(-1.0, abs=1e-6)

    def test_method_arity(self, tmp_path):
        trace_path = write_z_trace(tmp_path)
        out = tmp_path / "scores.csv"
        methods = "rsa_avg,rsa_max,binoculars(obs=a,perf=b),ppl"
        assert main(["score", str(trace_path), "--methods", methods, "--out", str(out)]) == 0
        rows = read_csv(out)
        # rsa_avg + rsa_max + binoculars + (M singles + average) = 4 + M
        assert len(rows) == 4 + 2

    def test_directory_input_and_determinism(self, tmp_path):
        for i in range(3):
            write_z_trace(tmp_path, f"doc{i}")
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["score", str(tmp_path), "--methods", "rsa_avg,ppl", "--threads", "1"]
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        rows = read_csv(out1)
        assert [r["doc_id"] for r in rows][:4] == ["doc0"] * 4
        assert main(args + ["--threads", "4", "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_per_token_output(self, tmp_path):
        trace_path = write_z_trace(tmp_path)
        out = tmp_path / "scores.csv"
        assert main(["score", str(trace_path), "--per-token", "--out", str(out)]) == 0
        token_path = out.with_suffix(".tokens.jsonl")
        lines = [json.loads(l) for l in token_path.read_text().splitlines()]
        assert len(lines) == 1
        assert len(lines[0]["tokens"]) == 1
        entry = lines[0]["tokens"][0]
        assert entry["capacity_bits"] == pytest.approx(0.321928, abs=1e-4)
        assert len(entry["weights"]) == 2

    def test_unreadable_trace_partial_results(self, tmp_path, capsys):
        good = write_z_trace(tmp_path, "good")
        bad = tmp_path / "bad.rsat"
        bad.write_bytes(b"XXXX garbage")
        out = tmp_path / "scores.csv"
        code = main(["score", str(good), str(bad), "--out", str(out)])
        assert code == 2
        rows = read_csv(out)
        assert [r["doc_id"] for r in rows] == ["good"]
        err = capsys.readouterr().err
        assert "bad.rsat" in err
        assert "partial" in err

    def test_unknown_method_is_validation_error(self, tmp_path):
        trace_path = write_z_trace(tmp_path)
        assert main(["score", str(trace_path), "--methods", "telepathy"]) == 1

    def test_qstar_method(self, tmp_path):
        trace_path = write_z_trace(tmp_path)
        out = tmp_path / "scores.csv"
        assert main(["score", str(trace_path), "--methods", "qstar", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0]["method"] == "qstar_logprob"
        assert float(rows[0]["score_bits"]) == pytest.approx(0.321928, abs=1e-4)

    def test_topk_restriction_flag(self, tmp_path):
        rng = np.random.default_rng(3)
        dist = rng.dirichlet(np.ones(10), size=(4, 2))
        trace = EnsembleTrace("wide", ("a", "b"), [0, 3, 5, 9], dist)
        trace_path = write_trace(trace, tmp_path / "wide.rsat", mode="dense")
        full, narrow = tmp_path / "full.csv", tmp_path / "narrow.csv"
        assert main(["score", str(trace_path), "--out", str(full)]) == 0
        assert main(["score", str(trace_path), "--topk", "2", "--out", str(narrow)]) == 0
        a = float(read_csv(full)[0]["score_bits"])
        b = float(read_csv(narrow)[0]["score_bits"])
        assert a != b  # truncation visibly changes the approximation


class TestEval:
    def test_end_to_end_report(self, tmp_path):
        rng = np.random.default_rng(11)
        members = rng.dirichlet(np.ones(20), size=2)
        outsider = rng.dirichlet(np.ones(20))
        records = []
        for i in range(4):
            toks = rng.choice(20, size=40, p=members[0])
            trace = EnsembleTrace(
                f"a{i}", ("a", "b"), toks, np.broadcast_to(members, (40, 2, 20))
            )
            write_trace(trace, tmp_path / f"a{i}.rsat", mode="dense")
            records.append(ManifestRecord(f"a{i}.rsat", "artificial", "gen", "en", "toy"))
        for i in range(4):
            toks = rng.choice(20, size=40, p=outsider)
            trace = EnsembleTrace(
                f"h{i}", ("a", "b"), toks, np.broadcast_to(members, (40, 2, 20))
            )
            write_trace(trace, tmp_path / f"h{i}.rsat", mode="dense")
            records.append(ManifestRecord(f"h{i}.rsat", "human", None, "en", "toy"))
        manifest = write_manifest(records, tmp_path / "manifest.jsonl")

        scores = tmp_path / "scores.csv"
        assert main(["score", str(tmp_path), "--methods", "rsa_avg,ppl", "--out", str(scores)]) == 0
        report = tmp_path / "report"
        assert main(["eval", str(scores), str(manifest), "--out", str(report)]) == 0
        with open(report / "summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        methods = {r["method"] for r in rows}
        assert "rsa_avg" in methods and "ppl_average" in methods
        rsa_row = next(r for r in rows if r["method"] == "rsa_avg")
        assert float(rsa_row["auroc"]) == 1.0
        assert (report / "roc_points.csv").exists()
        assert (report / "histograms.csv").exists()

    def test_missing_manifest_entry(self, tmp_path):
        trace_path = write_z_trace(tmp_path)
        scores = tmp_path / "scores.csv"
        assert main(["score", str(trace_path), "--out", str(scores)]) == 0
        manifest = write_manifest(
            [ManifestRecord("other.rsat", "human", None, "en", "c")],
            tmp_path / "m.jsonl",
        )
        assert main(["eval", str(scores), str(manifest), "--out", str(tmp_path / "r")]) == 1


class TestUnigramTrain:
    def test_balanced_model_file(self, tmp_path):
        tokens = tmp_path / "tokens.txt"
        tokens.write_text("0 0 1 1\n")
        out = tmp_path / "model.json"
        code = main(
            ["unigram-train", str(tokens), "--vocab-size", "2", "--eps", "0", "--out", str(out)]
        )
        assert code == 0
        model = load_unigram_model(out)
        np.testing.assert_array_equal(model.token_probs, [0.5, 0.5])

    def test_non_integer_tokens(self, tmp_path):
        tokens = tmp_path / "tokens.txt"
        tokens.write_text("zero one\n")
        assert main(
            ["unigram-train", str(tokens), "--vocab-size", "2", "--out", str(tmp_path / "m.json")]
        ) == 2


class TestDistort:
    def test_identity_is_softmax(self, tmp_path, capsys):
        logits = tmp_path / "logits.jsonl"
        logits.write_text(json.dumps([0.0, 0.0]) + "\n" + json.dumps([1.0, 1.0, 1.0]) + "\n")
        assert main(["distort", str(logits)]) == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        np.testing.assert_allclose(lines[0], [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(lines[1], [1 / 3] * 3, atol=1e-12)

    def test_invalid_temperature(self, tmp_path):
        logits = tmp_path / "logits.jsonl"
        logits.write_text("[0.0, 0.0]\n")
        assert main(["distort", str(logits), "--temperature", "0"]) == 1


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main(["score"]) == 1

    def test_unknown_subcommand(self, capsys):
        assert main(["transmogrify"]) == 1

    def test_missing_file_is_usage_error(self, tmp_path):
        assert main(["ba", str(tmp_path / "nope.json")]) == 1

    def test_missing_trace_path_fails_before_work(self, tmp_path, capsys):
        assert main(["score", str(tmp_path / "ghost.rsat")]) == 1

    def test_numeric_failure_is_exit_three(self, tmp_path, capsys):
        # deterministic observer agreeing with itself: undefined ratio
        trace = EnsembleTrace(
            "det", ("a", "b"), [0, 0], np.broadcast_to(np.eye(2)[:1].repeat(2, 0), (2, 2, 2))
        )
        path = write_trace(trace, tmp_path / "det.rsat", mode="dense")
        code = main(
            ["score", str(path), "--methods", "binoculars(obs=a,perf=b)",
             "--out", str(tmp_path / "s.csv")]
        )
        assert code == 3

    def test_log_level_from_environment(self, monkeypatch):
        import logging

        from rsa_detect.cli import _configure_logging

        monkeypatch.setenv("RSA_DETECT_LOG", "DEBUG")
        root = logging.getLogger()
        old_level, old_handlers = root.level, root.handlers[:]
        root.handlers = []
        try:
            _configure_logging()
            assert root.level == logging.DEBUG
        finally:
            root.level, root.handlers = old_level, old_handlers
