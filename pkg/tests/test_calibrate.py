import math

import numpy as np
import pytest
from scipy import integrate

from machine import calibrate_machine
from machine.sewer_spec import (
    LOG_DENSITY_FLOOR,
    CalibrationError,
    DegenerateDataError,
    DomainError,
    GammaParams,
    GmmParams,
    ScoreStream,
    read_models,
    write_models,
)

EXAMPLE_SCORES = [0.1, 0.4, 0.35, 0.8]
EXAMPLE_LABELS = [0, 0, 1, 1]


def _pairwise_auc(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def _brute_force_youden(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels)
    best = None
    for tau in sorted(set(scores), reverse=True):
        predicted = scores >= tau
        tpr = predicted[labels == 1].mean()
        fpr = predicted[labels == 0].mean()
        key = (tpr - fpr, -fpr, tau)
        if best is None or key[0] > best[0] + 1e-12 or (abs(key[0] - best[0]) <= 1e-12 and key[1:] > best[1:]):
            best = key
    return best[2], best[0]


def test_roc_example_auc_and_endpoints():
    curve = calibrate_machine.roc(EXAMPLE_SCORES, EXAMPLE_LABELS)
    assert curve.auc == pytest.approx(0.75)
    assert (curve.tpr[0], curve.fpr[0]) == (0.0, 0.0)
    assert (curve.tpr[-1], curve.fpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(curve.thresholds) < 0)


def test_roc_separated_and_flipped():
    scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9]
    assert calibrate_machine.roc(scores, [0, 0, 0, 1, 1, 1]).auc == pytest.approx(1.0)
    assert calibrate_machine.roc(scores, [1, 1, 1, 0, 0, 0]).auc == pytest.approx(0.0)


def test_roc_rejects_bad_input():
    with pytest.raises(CalibrationError):
        calibrate_machine.roc([0.1, 0.2], [1, 1])
    with pytest.raises(CalibrationError):
        calibrate_machine.roc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(CalibrationError):
        calibrate_machine.roc([0.1, float('nan')], [0, 1])


def test_roc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 8, size=n).astype(float)
        curve = calibrate_machine.roc(scores, labels)
        assert curve.auc == pytest.approx(_pairwise_auc(scores, labels), abs=1e-12)
        assert np.all(np.diff(curve.tpr) >= 0)
        assert np.all(np.diff(curve.fpr) >= 0)


def test_youden_tie_prefers_lower_fpr():
    threshold = calibrate_machine.youden_threshold(calibrate_machine.roc(EXAMPLE_SCORES, EXAMPLE_LABELS))
    assert threshold.tau == 0.8
    assert threshold.youden_j == pytest.approx(0.5)
    assert threshold.fpr == 0.0


def test_youden_separated_and_degenerate():
    separated = calibrate_machine.youden_threshold(calibrate_machine.roc([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1]))
    assert separated.youden_j == pytest.approx(1.0)
    assert 0.2 < separated.tau <= 0.7

    flat = calibrate_machine.youden_threshold(calibrate_machine.roc([0.5] * 4, [0, 1, 0, 1]))
    assert flat.youden_j == 0.0
    assert flat.tau == 0.5


def test_youden_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 10, size=n) / 10.0
        threshold = calibrate_machine.youden_threshold(calibrate_machine.roc(scores, labels))
        tau, j = _brute_force_youden(scores, labels)
        assert threshold.tau == tau
        assert threshold.youden_j == pytest.approx(j)


def test_youden_invariant_under_increasing_transform():
    rng = np.random.default_rng(2)
    scores = rng.gamma(2.0, 1.0, size=60)
    labels = (rng.random(60) < 0.4).astype(int)
    labels[:2] = [0, 1]
    plain = calibrate_machine.youden_threshold(calibrate_machine.roc(scores, labels))
    transformed = calibrate_machine.youden_threshold(calibrate_machine.roc(np.log(scores) * 3 + 1, labels))
    assert transformed.tau == pytest.approx(math.log(plain.tau) * 3 + 1)
    assert transformed.youden_j == plain.youden_j


def test_gamma_recovers_parameters():
    samples = np.random.default_rng(3).gamma(3.0, 2.0, size=10000)
    fitted = calibrate_machine.fit_gamma_mle(samples)
    assert fitted.k == pytest.approx(3.0, rel=0.05)
    assert fitted.theta == pytest.approx(2.0, rel=0.05)


def test_gamma_on_exponential_data():
    samples = np.random.default_rng(4).exponential(0.7, size=10000)
    assert calibrate_machine.fit_gamma_mle(samples).k == pytest.approx(1.0, rel=0.05)


def test_gamma_refit_is_self_consistent():
    fitted = GammaParams(k=2.5, theta=0.4)
    samples = np.random.default_rng(5).gamma(fitted.k, fitted.theta, size=1_000_000)
    refit = calibrate_machine.fit_gamma_mle(samples)
    assert refit.k == pytest.approx(fitted.k, rel=0.01)
    assert refit.theta == pytest.approx(fitted.theta, rel=0.01)


def test_gamma_errors():
    with pytest.raises(DomainError):
        calibrate_machine.fit_gamma_mle([0.0] + [1.0 + i for i in range(20)])
    with pytest.raises(DegenerateDataError):
        calibrate_machine.fit_gamma_mle([2.0] * 20)
    with pytest.raises(CalibrationError):
        calibrate_machine.fit_gamma_mle([1.0, 2.0, 3.0])


def test_single_component_mixture_is_sample_moments():
    samples = np.random.default_rng(6).normal(2.0, 0.5, size=200)
    fitted = calibrate_machine.fit_gmm_em(samples, K=1)
    assert fitted.weights == (1.0,)
    assert fitted.means[0] == pytest.approx(samples.mean(), abs=1e-12)
    assert fitted.variances[0] == pytest.approx(samples.var(), rel=1e-12)


def test_mixture_recovers_two_clusters():
    rng = np.random.default_rng(7)
    samples = np.concatenate([rng.normal(0.0, 0.5, 1000), rng.normal(10.0, 0.5, 1000)])
    fitted = calibrate_machine.fit_gmm_em(samples, K=2, seed=3)
    assert fitted.means[0] == pytest.approx(0.0, abs=0.1)
    assert fitted.means[1] == pytest.approx(10.0, abs=0.1)
    assert fitted.weights[0] == pytest.approx(0.5, abs=0.05)
    assert sum(fitted.weights) == pytest.approx(1.0, abs=1e-12)


def test_mixture_log_likelihood_never_decreases():
    rng = np.random.default_rng(8)
    for seed in range(100):
        n = int(rng.integers(10, 80))
        samples = np.concatenate([rng.normal(0, 1, n), rng.normal(rng.uniform(0, 4), rng.uniform(0.2, 2), n)])
        fitted = calibrate_machine.fit_gmm_em(samples, K=int(rng.integers(1, 4)), seed=seed)
        assert np.all(np.diff(fitted.log_likelihood_trace) >= -1e-9)
        assert min(fitted.variances) >= fitted.variance_floor


def test_mixture_is_deterministic_and_checks_size():
    samples = np.random.default_rng(9).normal(0, 1, 50)
    assert calibrate_machine.fit_gmm_em(samples, K=3, seed=1) == calibrate_machine.fit_gmm_em(samples, K=3, seed=1)
    with pytest.raises(CalibrationError):
        calibrate_machine.fit_gmm_em(samples[:9], K=2)
    with pytest.raises(DegenerateDataError):
        calibrate_machine.fit_gmm_em([1.0] * 20, K=2)


def test_log_pdf_examples():
    assert calibrate_machine.log_pdf_h0(1.0, GammaParams(k=1.0, theta=1.0)) == pytest.approx(-1.0)
    assert calibrate_machine.log_pdf_h1(0.0, GmmParams.single(0.0, 1.0)) == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert calibrate_machine.log_pdf_h0(0.0, GammaParams(k=2.0, theta=1.0)) == LOG_DENSITY_FLOOR
    assert calibrate_machine.log_pdf_h0(-3.0, GammaParams(k=2.0, theta=1.0)) == LOG_DENSITY_FLOOR
    assert calibrate_machine.log_pdf_h1(1e6, GmmParams.single(0.0, 1.0)) == LOG_DENSITY_FLOOR
    values = calibrate_machine.log_pdf_h0(np.array([0.5, 1.0]), GammaParams(k=1.0, theta=1.0))
    assert np.allclose(values, [-0.5, -1.0])


def test_fitted_densities_integrate_to_one():
    h0 = GammaParams(k=3.0, theta=0.5)
    h1 = GmmParams(weights=(0.3, 0.7), means=(2.0, 4.0), variances=(0.25, 1.0))
    grid = np.linspace(1e-9, 40.0, 200001)
    assert integrate.trapezoid(np.exp(calibrate_machine.log_pdf_h0(grid, h0)), grid) == pytest.approx(1.0, abs=1e-3)
    grid = np.linspace(-20.0, 30.0, 200001)
    assert integrate.trapezoid(np.exp(calibrate_machine.log_pdf_h1(grid, h1)), grid) == pytest.approx(1.0, abs=1e-3)


def test_fit_hypothesis_models(tmp_path):
    rng = np.random.default_rng(10)
    z = np.concatenate([rng.gamma(2.0, 0.2, 300), [0.0], rng.normal(2.0, 0.3, 100)])
    y = np.r_[np.zeros(301, dtype=int), np.ones(100, dtype=int)]
    stream = ScoreStream(t=np.arange(len(z)), z=z, y=y)
    models = calibrate_machine.fit_hypothesis_models(stream, K=2, seed=4)
    assert models.h0.k > 0 and models.h0.theta > 0
    assert models.h1.K == 2
    assert 0.4 < models.tau < 2.0
    assert models.metadata['sample_counts'] == {'normal': 301, 'anomaly': 100}
    assert models.metadata['K'] == 2

    loaded = read_models(write_models(tmp_path / 'models.json', models))
    assert loaded.h0 == models.h0
    assert loaded.h1.means == models.h1.means
    assert loaded.tau == models.tau


def test_fit_hypothesis_models_needs_both_classes():
    stream = ScoreStream(t=np.arange(20), z=np.linspace(0.1, 2.0, 20), y=np.zeros(20, dtype=int))
    with pytest.raises(CalibrationError):
        calibrate_machine.fit_hypothesis_models(stream)
