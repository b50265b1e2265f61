# machine/calibrate_machine.py
"""Hypothesis densities and the per-frame threshold.

p(z|H0) is a gamma density fitted by maximum likelihood, p(z|H1) a Gaussian
mixture fitted by EM, and tau the ROC point maximising Youden's J = TPR - FPR
under the convention z >= tau => anomaly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import special, stats
from scipy.integrate import trapezoid

from machine.sewer_spec import (
    GAMMA_ZERO_OFFSET,
    LOG_DENSITY_FLOOR,
    STREAM_EM,
    CalibrationError,
    DegenerateDataError,
    DomainError,
    GammaParams,
    GmmParams,
    HypothesisModels,
    ScoreStream,
    substream,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]

GAMMA_MIN_SAMPLES = 10
GAMMA_TOLERANCE = 1e-9
GAMMA_MAX_ITER = 100
GMM_MIN_SAMPLES_PER_COMPONENT = 5
GMM_DEFAULT_COMPONENTS = 2
GMM_TOLERANCE = 1e-10
GMM_MAX_ITER = 500
GMM_VARIANCE_FLOOR_RATIO = 1e-6
YOUDEN_TIE_TOLERANCE = 1e-12


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; first entry is +inf for the (0, 0) endpoint
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    @property
    def points(self) -> List[Tuple[float, float, float]]:
        return [(float(t), float(a), float(b)) for t, a, b in zip(self.thresholds, self.tpr, self.fpr)]


@dataclass(frozen=True)
class Threshold:
    tau: float
    youden_j: float
    tpr: float
    fpr: float


def roc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """One ROC point per distinct score plus the (0, 0) endpoint; trapezoidal AUC."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.shape != y.shape:
        raise CalibrationError(f"{len(s)} scores but {len(y)} labels")
    if not np.all(np.isfinite(s)):
        raise CalibrationError("ROC scores must be finite")
    positives = int(np.sum(y == 1))
    negatives = int(np.sum(y == 0))
    if positives == 0 or negatives == 0 or positives + negatives != len(y):
        raise CalibrationError("ROC needs labels in {0, 1} with at least one of each class")

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    true_positives = np.cumsum(y_sorted)[last_of_group]
    false_positives = last_of_group + 1 - true_positives

    tpr = np.r_[0.0, true_positives / positives]
    fpr = np.r_[0.0, false_positives / negatives]
    thresholds = np.r_[np.inf, s_sorted[last_of_group]]
    return RocCurve(thresholds=thresholds, tpr=tpr, fpr=fpr, auc=float(trapezoid(tpr, fpr)))


def youden_threshold(curve: RocCurve) -> Threshold:
    """tau maximising TPR - FPR; ties go to the lower FPR, then the higher threshold."""
    j = curve.tpr[1:] - curve.fpr[1:]
    best = float(j.max())
    # points run in descending threshold with non-decreasing FPR, so the first
    # tied point has both the lowest FPR and the highest threshold
    index = int(np.nonzero(j >= best - YOUDEN_TIE_TOLERANCE)[0][0]) + 1
    return Threshold(
        tau=float(curve.thresholds[index]),
        youden_j=float(curve.tpr[index] - curve.fpr[index]),
        tpr=float(curve.tpr[index]),
        fpr=float(curve.fpr[index]),
    )


def fit_gamma_mle(samples: Sequence[float]) -> GammaParams:
    """Maximum-likelihood gamma fit by Newton iteration on log k - digamma(k) = s."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < GAMMA_MIN_SAMPLES:
        raise CalibrationError(f"Gamma fit needs at least {GAMMA_MIN_SAMPLES} samples, got {x.size}")
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("Gamma fit needs strictly positive finite samples")
    if np.ptp(x) == 0:
        raise DegenerateDataError("Gamma fit needs non-constant samples")

    mean = float(x.mean())
    s = math.log(mean) - float(np.log(x).mean())
    if s <= 0:
        raise DegenerateDataError("Samples are numerically constant")
    k = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)

    for iteration in range(1, GAMMA_MAX_ITER + 1):
        value = math.log(k) - float(special.digamma(k)) - s
        slope = 1.0 / k - float(special.polygamma(1, k))
        k_next = k - value / slope
        if k_next <= 0:
            k_next = k / 2.0
        converged = abs(k_next - k) < GAMMA_TOLERANCE * k_next
        k = k_next
        if converged:
            logger.debug("Gamma MLE converged after %d Newton steps (k=%.6g)", iteration, k)
            break
    else:
        logger.warning("Gamma MLE did not converge in %d steps (k=%.6g)", GAMMA_MAX_ITER, k)
    return GammaParams(k=k, theta=mean / k)


def _e_step(x: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray):
    log_components = np.log(weights) + stats.norm.logpdf(x[:, None], means, np.sqrt(variances))
    log_totals = special.logsumexp(log_components, axis=1)
    responsibilities = np.exp(log_components - log_totals[:, None])
    return responsibilities, float(log_totals.mean())


def _m_step(x: np.ndarray, responsibilities: np.ndarray, floor: float):
    counts = np.maximum(responsibilities.sum(axis=0), np.finfo(np.float64).tiny)
    weights = counts / counts.sum()
    means = responsibilities.T @ x / counts
    variances = (responsibilities * (x[:, None] - means) ** 2).sum(axis=0) / counts
    return weights, means, np.maximum(variances, floor)


def _kmeans_plus_plus(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[int(rng.integers(len(x)))]]
    for _ in range(1, K):
        distance = np.min((x[:, None] - np.asarray(centres)[None, :]) ** 2, axis=1)
        total = distance.sum()
        index = int(rng.integers(len(x))) if total == 0 else int(rng.choice(len(x), p=distance / total))
        centres.append(x[index])
    return np.sort(np.asarray(centres, dtype=np.float64))


def fit_gmm_em(
    samples: Sequence[float],
    K: int = GMM_DEFAULT_COMPONENTS,
    seed: int = 0,
    tol: float = GMM_TOLERANCE,
    max_iter: int = GMM_MAX_ITER,
) -> GmmParams:
    """EM for a 1-D Gaussian mixture from k-means++ seeding.

    Stops when the mean per-sample log-likelihood improves by less than *tol*
    or after *max_iter* iterations; the per-iteration log-likelihoods are kept
    in ``log_likelihood_trace``.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    K = int(K)
    if K < 1:
        raise CalibrationError("Mixture needs K >= 1")
    if x.size < GMM_MIN_SAMPLES_PER_COMPONENT * K:
        raise CalibrationError(
            f"Mixture with K={K} needs at least {GMM_MIN_SAMPLES_PER_COMPONENT * K} samples, got {x.size}"
        )
    if not np.all(np.isfinite(x)):
        raise DomainError("Mixture samples must be finite")
    sample_variance = float(x.var())
    if sample_variance == 0:
        raise DegenerateDataError("Mixture fit needs non-constant samples")
    floor = GMM_VARIANCE_FLOOR_RATIO * sample_variance

    rng = substream(seed, STREAM_EM)
    means = _kmeans_plus_plus(x, K, rng)
    variances = np.full(K, sample_variance)
    weights = np.full(K, 1.0 / K)

    responsibilities, log_likelihood = _e_step(x, weights, means, variances)
    trace = [log_likelihood]
    for iteration in range(1, int(max_iter) + 1):
        weights, means, variances = _m_step(x, responsibilities, floor)
        responsibilities, improved = _e_step(x, weights, means, variances)
        trace.append(improved)
        if improved - log_likelihood < tol:
            break
        log_likelihood = improved
    logger.debug("EM stopped after %d iterations, mean log-likelihood %.8f", len(trace) - 1, trace[-1])

    order = np.argsort(means, kind="mergesort")
    return GmmParams(
        weights=tuple(weights[order]),
        means=tuple(means[order]),
        variances=tuple(variances[order]),
        variance_floor=floor,
        log_likelihood_trace=tuple(trace),
    )


def _maybe_scalar(z, values: np.ndarray):
    return float(values) if np.ndim(z) == 0 else values


def log_pdf_h0(z: ArrayLike, p: GammaParams):
    """Gamma log-density, floored at log(1e-300); z <= 0 gets the floor."""
    z_arr = np.asarray(z, dtype=np.float64)
    positive = z_arr > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        values = stats.gamma.logpdf(np.where(positive, z_arr, 1.0), a=p.k, scale=p.theta)
    values = np.where(positive, np.maximum(values, LOG_DENSITY_FLOOR), LOG_DENSITY_FLOOR)
    return _maybe_scalar(z, values)


def log_pdf_h1(z: ArrayLike, p: GmmParams):
    """Mixture log-density via log-sum-exp, floored at log(1e-300)."""
    z_arr = np.asarray(z, dtype=np.float64)
    log_components = np.log(np.asarray(p.weights)) + stats.norm.logpdf(
        z_arr[..., None], np.asarray(p.means), np.sqrt(np.asarray(p.variances))
    )
    values = np.maximum(special.logsumexp(log_components, axis=-1), LOG_DENSITY_FLOOR)
    return _maybe_scalar(z, values)


def offset_zero_scores(scores: Sequence[float]) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    return np.where(z == 0.0, GAMMA_ZERO_OFFSET, z)


def fit_hypothesis_models(
    stream: ScoreStream,
    K: int = GMM_DEFAULT_COMPONENTS,
    seed: int = 0,
    tol: float = GMM_TOLERANCE,
    max_iter: int = GMM_MAX_ITER,
) -> HypothesisModels:
    """Fit H0/H1 densities on calibration scores and pick tau by Youden's index."""
    normal = stream.z[stream.y == 0]
    anomalous = stream.z[stream.y == 1]
    if normal.size == 0 or anomalous.size == 0:
        raise CalibrationError(
            f"Calibration needs both classes, got {normal.size} normal and {anomalous.size} anomalous scores"
        )
    h0 = fit_gamma_mle(offset_zero_scores(normal))
    h1 = fit_gmm_em(anomalous, K=K, seed=seed, tol=tol, max_iter=max_iter)
    curve = roc(stream.z, stream.y)
    threshold = youden_threshold(curve)
    logger.info(
        "Calibrated on %d normal / %d anomalous scores: gamma(k=%.4g, theta=%.4g), %d-component mixture, "
        "tau=%.6g (J=%.4f, AUC=%.4f)",
        normal.size, anomalous.size, h0.k, h0.theta, h1.K, threshold.tau, threshold.youden_j, curve.auc,
    )
    return HypothesisModels(
        h0=h0,
        h1=h1,
        tau=threshold.tau,
        metadata={
            "seed": int(seed),
            "K": int(K),
            "sample_counts": {"normal": int(normal.size), "anomaly": int(anomalous.size)},
            "auc": curve.auc,
            "youden_j": threshold.youden_j,
        },
    )
