# machine/sprt_machine.py
"""Streaming sequential probability ratio test over per-frame anomaly scores.

Evidence accumulates as Lambda_t = Lambda_{t-1} + log p(z_t|H1) - log p(z_t|H0).
Lambda <= a accepts H0 (normal), Lambda >= b accepts H1 (anomaly); either
verdict closes the current window and resets Lambda to 0 for the next frame.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from machine.calibrate_machine import log_pdf_h0, log_pdf_h1
from machine.sewer_spec import (
    ANOMALY,
    DECISIONS,
    NORMAL,
    STREAM_SIMULATE,
    UNDECIDED,
    HypothesisModels,
    PathLike,
    ScoreStream,
    SewerFormatError,
    SpecificationError,
    read_json,
    read_jsonl,
    substream,
    write_json,
    write_jsonl,
)
from machine.synth_machine import sample_h0, sample_h1

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 1e-6
DEFAULT_BETA = 0.01
LAMBDA_CLAMP = 1e6

SIMULATION_CHUNK = 1000


@dataclass(frozen=True)
class ErrorSpec:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and 0.0 < value < 1.0):
                raise SpecificationError(f"{name} must lie strictly between 0 and 1, got {value}")
        if self.alpha + self.beta >= 1.0:
            raise SpecificationError(f"alpha + beta must be < 1, got {self.alpha} + {self.beta}")


@dataclass(frozen=True)
class SprtBounds:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a < 0.0 < self.b):
            raise SpecificationError(f"SPRT bounds must satisfy a < 0 < b, got a={self.a}, b={self.b}")

    def to_dict(self) -> Dict[str, float]:
        return {"a": float(self.a), "b": float(self.b)}


def bounds(spec: ErrorSpec) -> SprtBounds:
    """Wald's approximate stopping bounds a = log(beta/(1-alpha)), b = log((1-beta)/alpha)."""
    return SprtBounds(
        a=math.log(spec.beta) - math.log1p(-spec.alpha),
        b=math.log1p(-spec.beta) - math.log(spec.alpha),
    )


def llr_increment(z, models: HypothesisModels):
    """log p(z|H1) - log p(z|H0); scalar in, scalar out, arrays vectorised."""
    return log_pdf_h1(z, models.h1) - log_pdf_h0(z, models.h0)


@dataclass(frozen=True)
class SprtState:
    lambda_: float = 0.0
    window_start: int = 0
    t: int = 0  # index of the next frame to consume


@dataclass(frozen=True)
class DecisionEvent:
    window_start: int
    t_decided: int
    verdict: str
    lambda_at_decision: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window_start": int(self.window_start),
            "t_decided": int(self.t_decided),
            "verdict": self.verdict,
            "lambda": float(self.lambda_at_decision),
        }


@dataclass
class FrameDecision:
    t: int
    z: float
    dllr: Optional[float]
    lambda_after: Optional[float]
    decision: str = UNDECIDED

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t": int(self.t),
            "z": float(self.z),
            "dllr": None if self.dllr is None else float(self.dllr),
            "lambda": None if self.lambda_after is None else float(self.lambda_after),
            "decision": self.decision,
        }


@dataclass
class DecisionLog:
    """Per-frame records plus the decision events that closed each window."""

    frames: List[FrameDecision] = field(default_factory=list)
    events: List[DecisionEvent] = field(default_factory=list)
    method: str = "sprt"
    bounds: Optional[SprtBounds] = None
    spec: Optional[ErrorSpec] = None
    retroactive: bool = True

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def t(self) -> np.ndarray:
        return np.array([f.t for f in self.frames], dtype=np.int64)

    @property
    def z(self) -> np.ndarray:
        return np.array([f.z for f in self.frames], dtype=np.float64)

    def decisions(self) -> List[str]:
        return [f.decision for f in self.frames]

    def counts(self) -> Dict[str, int]:
        labels = self.decisions()
        return {label: labels.count(label) for label in (NORMAL, ANOMALY, UNDECIDED)}

    def windows(self) -> List[Tuple[int, int, str]]:
        """(first t, last t, verdict) per window; a trailing open window is undecided."""
        spans = [(e.window_start, e.t_decided, e.verdict) for e in self.events]
        if self.frames:
            closed_until = self.events[-1].t_decided if self.events else None
            trailing = [f.t for f in self.frames if closed_until is None or f.t > closed_until]
            if trailing:
                spans.append((trailing[0], trailing[-1], UNDECIDED))
        return spans

    def records(self) -> List[Dict[str, Any]]:
        return [f.to_dict() for f in self.frames]

    def summary(self) -> Dict[str, Any]:
        document: Dict[str, Any] = {
            "method": self.method,
            "frames": len(self.frames),
            "counts": self.counts(),
            "events": [e.to_dict() for e in self.events],
            "retroactive": bool(self.retroactive),
        }
        if self.bounds is not None:
            document["bounds"] = self.bounds.to_dict()
        if self.spec is not None:
            document["alpha"] = float(self.spec.alpha)
            document["beta"] = float(self.spec.beta)
        return document


def _advance(state: SprtState, increment: float, sprt_bounds: SprtBounds) -> Tuple[SprtState, Optional[DecisionEvent]]:
    lam = min(max(state.lambda_ + increment, -LAMBDA_CLAMP), LAMBDA_CLAMP)
    verdict = None
    if lam <= sprt_bounds.a:
        verdict = NORMAL
    elif lam >= sprt_bounds.b:
        verdict = ANOMALY
    if verdict is None:
        return replace(state, lambda_=lam, t=state.t + 1), None
    event = DecisionEvent(window_start=state.window_start, t_decided=state.t, verdict=verdict, lambda_at_decision=lam)
    return SprtState(lambda_=0.0, window_start=state.t + 1, t=state.t + 1), event


def step(
    state: SprtState, z: float, sprt_bounds: SprtBounds, models: HypothesisModels
) -> Tuple[SprtState, Optional[DecisionEvent]]:
    """Consume one score; on a boundary crossing emit the window verdict and reset."""
    return _advance(state, float(llr_increment(float(z), models)), sprt_bounds)


class SprtMachine:
    """
    Stateful SPRT over a live score stream.

    ``push`` consumes one frame and returns the decision event it triggered,
    if any; ``log`` returns the decision log of everything pushed so far.
    """

    def __init__(self, models: HypothesisModels, spec: Optional[ErrorSpec] = None, retroactive: bool = True):
        self.models = models
        self.spec = spec or ErrorSpec()
        self.bounds = bounds(self.spec)
        self.retroactive = retroactive
        self.state = SprtState()
        self.frames: List[FrameDecision] = []
        self.events: List[DecisionEvent] = []
        self._open: List[FrameDecision] = []

    def reset(self):
        self.state = SprtState()
        self.frames = []
        self.events = []
        self._open = []

    def push(self, t: int, z: float, increment: Optional[float] = None) -> Optional[DecisionEvent]:
        if increment is None:
            increment = float(llr_increment(float(z), self.models))
        position = self.state.t
        self.state, event = _advance(self.state, increment, self.bounds)
        record = FrameDecision(t=int(t), z=float(z), dllr=increment, lambda_after=self.state.lambda_)
        self.frames.append(record)
        self._open.append(record)
        if event is None:
            return None

        window_start = self._open[0].t
        labelled = self._open if self.retroactive else self._open[-1:]
        for frame in labelled:
            frame.decision = event.verdict
        self._open = []
        event = replace(event, window_start=window_start, t_decided=int(t))
        self.events.append(event)
        logger.debug("Frame %d (position %d): %s after window starting at %d", t, position, event.verdict, window_start)
        return event

    def log(self) -> DecisionLog:
        return DecisionLog(
            frames=list(self.frames),
            events=list(self.events),
            method="sprt",
            bounds=self.bounds,
            spec=self.spec,
            retroactive=self.retroactive,
        )


def run(
    stream: ScoreStream,
    models: HypothesisModels,
    spec: Optional[ErrorSpec] = None,
    retroactive: bool = True,
) -> DecisionLog:
    """Fold the SPRT over a whole stream; frames left in an open window stay undecided."""
    if len(stream) == 0:
        raise SpecificationError("SPRT needs a non-empty score stream")
    machine = SprtMachine(models, spec, retroactive=retroactive)
    increments = np.atleast_1d(llr_increment(stream.z, models))
    for t, z, increment in zip(stream.t, stream.z, increments):
        machine.push(int(t), float(z), float(increment))
    log = machine.log()
    counts = log.counts()
    logger.info(
        "SPRT (a=%.4f, b=%.4f): %d decisions over %d frames, %d anomaly / %d normal / %d undecided frames",
        machine.bounds.a, machine.bounds.b, len(log.events), len(log),
        counts[ANOMALY], counts[NORMAL], counts[UNDECIDED],
    )
    return log


@dataclass(frozen=True)
class OperatingCharacteristics:
    """Monte Carlo error rates of a single SPRT decision under each hypothesis."""

    bounds: SprtBounds
    n_streams: int
    max_frames: int
    false_positive_rate: float
    false_positive_se: float
    miss_rate: float
    miss_se: float
    undecided_h0: float
    undecided_h1: float
    mean_sample_number_h0: float
    mean_sample_number_h1: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _first_decisions(increments: np.ndarray, sprt_bounds: SprtBounds) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    evidence = np.clip(np.cumsum(increments, axis=1), -LAMBDA_CLAMP, LAMBDA_CLAMP)
    crossed = (evidence <= sprt_bounds.a) | (evidence >= sprt_bounds.b)
    decided = crossed.any(axis=1)
    first = np.where(decided, np.argmax(crossed, axis=1), increments.shape[1] - 1)
    anomaly = decided & (evidence[np.arange(len(first)), first] >= sprt_bounds.b)
    return decided, anomaly, first + 1


def operating_characteristics(
    models: HypothesisModels,
    spec: Optional[ErrorSpec] = None,
    n_streams: int = 10_000,
    max_frames: int = 500,
    seed: int = 0,
) -> OperatingCharacteristics:
    """Simulate independent streams under H0 and H1 and run each to its first decision.

    Error rates are taken over decided streams; streams that reach *max_frames*
    without crossing a bound are counted as undecided.
    """
    spec = spec or ErrorSpec()
    if n_streams < 1 or max_frames < 1:
        raise SpecificationError("Simulation needs n_streams >= 1 and max_frames >= 1")
    sprt_bounds = bounds(spec)
    outcome = {}
    for hypothesis, sampler, params in ((0, sample_h0, models.h0), (1, sample_h1, models.h1)):
        rng = substream(seed, STREAM_SIMULATE, hypothesis)
        decided_total = anomaly_total = 0
        lengths = []
        for start in range(0, n_streams, SIMULATION_CHUNK):
            rows = min(SIMULATION_CHUNK, n_streams - start)
            scores = sampler(params, (rows, max_frames), rng)
            decided, anomaly, length = _first_decisions(llr_increment(scores, models), sprt_bounds)
            decided_total += int(decided.sum())
            anomaly_total += int(anomaly.sum())
            lengths.append(length)
        outcome[hypothesis] = (decided_total, anomaly_total, float(np.concatenate(lengths).mean()))

    def rate(errors: int, decided: int) -> Tuple[float, float]:
        if decided == 0:
            return 0.0, 0.0
        p = errors / decided
        return p, math.sqrt(p * (1.0 - p) / decided)

    decided_h0, anomaly_h0, asn_h0 = outcome[0]
    decided_h1, anomaly_h1, asn_h1 = outcome[1]
    fpr, fpr_se = rate(anomaly_h0, decided_h0)
    miss, miss_se = rate(decided_h1 - anomaly_h1, decided_h1)
    result = OperatingCharacteristics(
        bounds=sprt_bounds,
        n_streams=int(n_streams),
        max_frames=int(max_frames),
        false_positive_rate=fpr,
        false_positive_se=fpr_se,
        miss_rate=miss,
        miss_se=miss_se,
        undecided_h0=1.0 - decided_h0 / n_streams,
        undecided_h1=1.0 - decided_h1 / n_streams,
        mean_sample_number_h0=asn_h0,
        mean_sample_number_h1=asn_h1,
    )
    logger.info(
        "Simulated %d streams per hypothesis: FPR %.5f (+/- %.5f), miss %.5f (+/- %.5f)",
        n_streams, fpr, fpr_se, miss, miss_se,
    )
    return result


def write_decision_log(path: PathLike, log: DecisionLog):
    path = write_jsonl(path, log.records())
    logger.info("Wrote %d decision records to %s", len(log), path)
    return path


def write_summary(path: PathLike, log: DecisionLog):
    return write_json(path, log.summary())


def read_decision_log(path: PathLike, summary_path: Optional[PathLike] = None) -> DecisionLog:
    """Load a JSONL decision log; events, bounds and error spec come from the summary when given."""
    try:
        frames = [
            FrameDecision(
                t=int(r["t"]),
                z=float(r["z"]),
                dllr=None if r.get("dllr") is None else float(r["dllr"]),
                lambda_after=None if r.get("lambda") is None else float(r["lambda"]),
                decision=str(r["decision"]),
            )
            for r in read_jsonl(path)
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise SewerFormatError(path, "decision records need 't', 'z' and 'decision'") from exc
    if any(f.decision not in DECISIONS for f in frames):
        raise SewerFormatError(path, f"decisions must be one of {', '.join(DECISIONS)}")
    log = DecisionLog(frames=frames)
    if summary_path is None:
        return log

    summary = read_json(summary_path)
    try:
        log.events = [
            DecisionEvent(
                window_start=int(e["window_start"]),
                t_decided=int(e["t_decided"]),
                verdict=str(e["verdict"]),
                lambda_at_decision=float(e.get("lambda", 0.0)),
            )
            for e in summary["events"]
        ]
        log.method = str(summary.get("method", "sprt"))
        log.retroactive = bool(summary.get("retroactive", True))
        if "bounds" in summary:
            log.bounds = SprtBounds(a=float(summary["bounds"]["a"]), b=float(summary["bounds"]["b"]))
        if "alpha" in summary and "beta" in summary:
            log.spec = ErrorSpec(alpha=float(summary["alpha"]), beta=float(summary["beta"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SewerFormatError(summary_path, f"malformed decision summary ({exc})") from exc
    return log
