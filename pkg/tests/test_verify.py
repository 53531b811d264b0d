import numpy as np

from trumpetflow import verify
from trumpetflow.flow_layers import ActNorm
from trumpetflow.verify import (
    SuiteResult,
    fvc_suite,
    gradient_suite,
    logdet_suite,
    posterior_suite,
    roundtrip_suite,
    run_all,
    traveltime_suite,
)


def assert_passes(result: SuiteResult):
    assert result.ok, result.messages
    assert result.passed > 0


def test_roundtrip_suite(rng):
    assert_passes(roundtrip_suite(rng))


def test_logdet_suite(rng):
    assert_passes(logdet_suite(rng))


def test_logdet_suite_catches_a_sign_flip_in_actnorm(rng, monkeypatch):
    correct = ActNorm.logdet
    monkeypatch.setattr(ActNorm, "logdet", lambda self, batch: -correct(self, batch))
    result = logdet_suite(rng)
    assert not result.ok
    assert any(message.startswith("actnorm") for message in result.messages)


def test_fvc_suite_counts_every_input(rng):
    result = fvc_suite(rng, layers=5, inputs=20)
    assert_passes(result)
    assert result.passed == 100


def test_gradient_suite(rng):
    assert_passes(gradient_suite(rng))


def test_posterior_suite(rng):
    assert_passes(posterior_suite(rng))


def test_traveltime_suite(rng):
    assert_passes(traveltime_suite(rng, mc_samples=100_000))


def test_suite_result_bookkeeping():
    result = SuiteResult("demo")
    result.check(True, "unused")
    result.check(False, "second check failed")
    assert (result.passed, result.failed, result.ok) == (1, 1, False)
    assert result.messages == ["second check failed"]


def test_crashing_suite_counts_as_one_failure(monkeypatch):
    def broken(rng):
        raise np.linalg.LinAlgError("boom")

    monkeypatch.setattr(verify, "SUITES", [("posterior", posterior_suite), ("broken", broken)])
    results = run_all(seed=1)
    assert [r.name for r in results] == ["posterior", "broken"]
    assert results[0].ok
    assert (results[1].failed, results[1].messages) == (1, ["LinAlgError: boom"])
