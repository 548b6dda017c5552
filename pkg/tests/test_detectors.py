import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from rsa_detect.detectors import (
    BinocularsDetector,
    MixtureCodeDetector,
    PerplexityDetector,
)
from rsa_detect.scoring import EnsembleTrace, rsa_score


def member_traces(rng, members, n_docs, doc_len, in_family, prefix):
    n_vocab = members.shape[1]
    outsider = rng.dirichlet(np.ones(n_vocab))
    traces = []
    for i in range(n_docs):
        source = members[rng.integers(members.shape[0])] if in_family else outsider
        toks = rng.choice(n_vocab, size=doc_len, p=source)
        dist = np.broadcast_to(members, (doc_len, *members.shape))
        ids = tuple(f"model{j}" for j in range(members.shape[0]))
        traces.append(EnsembleTrace(f"{prefix}{i}", ids, toks, dist))
    return traces


@pytest.fixture
def labeled_traces():
    rng = np.random.default_rng(42)
    members = rng.dirichlet(np.ones(30), size=3)
    machine = member_traces(rng, members, 8, 80, True, "m")
    human = member_traces(rng, members, 8, 80, False, "h")
    traces = machine + human
    labels = ["artificial"] * 8 + ["human"] * 8
    return traces, labels


class TestEstimatorApi:
    def test_get_set_params_round_trip(self):
        det = MixtureCodeDetector(variant="max", tolerance=1e-8)
        params = det.get_params()
        assert params["variant"] == "max"
        assert params["tolerance"] == 1e-8
        clone = MixtureCodeDetector(**params)
        assert clone.get_params() == params
        det.set_params(variant="avg")
        assert det.variant == "avg"

    def test_predict_requires_fit(self, labeled_traces):
        traces, _ = labeled_traces
        with pytest.raises(NotFittedError):
            MixtureCodeDetector().predict(traces[:2])

    def test_score_samples_matches_functional_api(self, labeled_traces):
        traces, _ = labeled_traces
        det = MixtureCodeDetector()
        scores = det.score_samples(traces[:3])
        expected = [rsa_score(tr).score_bits for tr in traces[:3]]
        np.testing.assert_allclose(scores, expected, atol=1e-12)

    def test_decision_function_orientation(self, labeled_traces):
        traces, _ = labeled_traces
        det = MixtureCodeDetector()
        np.testing.assert_allclose(
            det.decision_function(traces[:3]), -det.score_samples(traces[:3]), atol=0
        )


class TestFitPredict:
    def test_fit_then_predict_separates(self, labeled_traces):
        traces, labels = labeled_traces
        det = MixtureCodeDetector(target_fpr=0.2).fit(traces, labels)
        assert hasattr(det, "threshold_")
        predictions = det.predict(traces)
        machine_hits = (predictions[:8] == "artificial").mean()
        human_false = (predictions[8:] == "artificial").mean()
        assert machine_hits >= 0.75
        assert human_false <= 0.25

    def test_perplexity_detector_model_selection(self, labeled_traces):
        traces, _ = labeled_traces
        avg = PerplexityDetector().score_samples(traces[:2])
        single = PerplexityDetector(model="model0").score_samples(traces[:2])
        assert avg.shape == single.shape == (2,)
        with pytest.raises(ValueError):
            PerplexityDetector(model="missing").score_samples(traces[:1])

    def test_binoculars_detector_scores(self, labeled_traces):
        traces, _ = labeled_traces
        det = BinocularsDetector(observer="model0", performer="model1")
        scores = det.score_samples(traces[:4])
        assert np.isfinite(scores).all()
