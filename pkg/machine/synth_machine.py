# machine/synth_machine.py
"""Seeded surrogate sewer footage and score streams.

Frames are pipe-wall texture (low-frequency value noise under a radial
darkening toward the pipe axis, plus per-pixel Gaussian noise) with
deposit-like blobs on anomalous frames. Blobs are anti-aliased discs; the
ground-truth mask holds every pixel with at least 50% disc coverage, i.e.
every pixel centre within the blob radius.

Every frame draws from its own substream (see ``machine.sewer_spec``), so
frame i of a sequence is reproducible without generating frames 0..i-1.
"""
from __future__ import annotations

import logging
from typing import List, Sequence

import cv2
import numpy as np

from machine.sewer_spec import (
    STREAM_FRAME,
    STREAM_PERTURB,
    STREAM_PLAN,
    STREAM_SCORES,
    Frame,
    FrameSpec,
    GammaParams,
    GmmParams,
    ScoreStream,
    SegmentPlan,
    SpecificationError,
    derive_seed,
    substream,
)

logger = logging.getLogger(__name__)

BACKGROUND_LEVEL = 0.30
BACKGROUND_CONTRAST = 0.25
AXIS_DARKENING = 0.35

# Transient perturbation magnitudes (motion blur + illumination change)
BLUR_LENGTH_RANGE = (3, 5)
GAIN_RANGE = (0.8, 1.2)
GLARE_AMPLITUDE_RANGE = (0.05, 0.20)
GLARE_WIDTH_RANGE = (0.20, 0.40)


def _background(spec: FrameSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = int(spec.height), int(spec.width)
    coarse_h = int(np.ceil(h / spec.background_texture_scale)) + 1
    coarse_w = int(np.ceil(w / spec.background_texture_scale)) + 1
    coarse = rng.random((coarse_h, coarse_w))
    texture = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_LINEAR)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    radius = np.hypot((yy - (h - 1) / 2) / h, (xx - (w - 1) / 2) / w)
    axis = np.exp(-(radius ** 2) / (2 * 0.2 ** 2))
    return (BACKGROUND_LEVEL + BACKGROUND_CONTRAST * texture) * (1.0 - AXIS_DARKENING * axis)


def _disc_coverage(shape, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    distance = np.hypot(yy - cy, xx - cx)
    return np.clip(r + 0.5 - distance, 0.0, 1.0)


def gen_frame(spec: FrameSpec, label: int, seed: int) -> Frame:
    """Generate one frame; anomalous frames carry deposit blobs recorded in the mask."""
    spec.validate()
    if label not in (0, 1):
        raise SpecificationError(f"label must be 0 or 1, got {label}")
    rng = substream(seed, STREAM_FRAME, label)
    pixels = _background(spec, rng)
    mask = np.zeros_like(pixels, dtype=bool)

    if label == 1:
        low, high = (int(v) for v in spec.blob_count_range)
        count = int(rng.integers(low, high + 1))
        for _ in range(count):
            r = float(rng.uniform(*spec.blob_radius_range))
            cy = float(rng.uniform(r, spec.height - 1 - r))
            cx = float(rng.uniform(r, spec.width - 1 - r))
            coverage = _disc_coverage(pixels.shape, cy, cx, r)
            pixels = pixels + spec.blob_intensity_delta * coverage
            mask |= coverage >= 0.5

    if spec.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, spec.noise_sigma, size=pixels.shape)
    return Frame(pixels=np.clip(pixels, 0.0, 1.0), label=label, mask=mask)


def perturb(frame: Frame, rng: np.random.Generator) -> Frame:
    """Transient motion blur plus an illumination change (global gain and a glare patch)."""
    h, w = frame.pixels.shape
    length = int(rng.integers(BLUR_LENGTH_RANGE[0], BLUR_LENGTH_RANGE[1] + 1))
    angle = float(rng.uniform(0.0, np.pi))
    kernel = np.zeros((length, length), dtype=np.float64)
    centre = (length - 1) / 2
    dx, dy = np.cos(angle) * centre, np.sin(angle) * centre
    cv2.line(
        kernel,
        (int(round(centre - dx)), int(round(centre - dy))),
        (int(round(centre + dx)), int(round(centre + dy))),
        1.0,
        1,
    )
    kernel /= kernel.sum()
    blurred = cv2.filter2D(frame.pixels, -1, kernel, borderType=cv2.BORDER_REFLECT)

    gain = float(rng.uniform(*GAIN_RANGE))
    amplitude = float(rng.uniform(*GLARE_AMPLITUDE_RANGE))
    width = float(rng.uniform(*GLARE_WIDTH_RANGE)) * min(h, w)
    gy, gx = float(rng.uniform(0, h - 1)), float(rng.uniform(0, w - 1))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    glare = amplitude * np.exp(-((yy - gy) ** 2 + (xx - gx) ** 2) / (2 * width ** 2))
    return frame.with_pixels(np.clip(gain * blurred + glare, 0.0, 1.0))


def gen_sequence(spec: FrameSpec, plan: SegmentPlan, seed: int) -> List[Frame]:
    """Generate a labelled frame sequence following *plan*."""
    spec.validate()
    labels = plan.labels()
    if plan.total_frames == 0:
        raise SpecificationError("Segment plan has no frames")
    frames = []
    perturbed = 0
    for index, label in enumerate(labels):
        frame = gen_frame(spec, int(label), derive_seed(seed, STREAM_FRAME, index))
        rng = substream(seed, STREAM_PERTURB, index)
        if rng.random() < spec.blur_probability:
            frame = perturb(frame, rng)
            perturbed += 1
        frames.append(frame)
    logger.info(
        "Generated %d frames (%d anomalous, %d perturbed)",
        len(frames), int(labels.sum()), perturbed,
    )
    return frames


def gen_dataset(spec: FrameSpec, normal: int, anomalous: int, seed: int) -> List[Frame]:
    """Shuffled labelled still frames, e.g. a training or calibration split."""
    labels = np.array([0] * int(normal) + [1] * int(anomalous), dtype=np.int64)
    substream(seed, STREAM_PLAN).shuffle(labels)
    return gen_sequence(spec, plan_from_labels(labels), seed)


def plan_from_labels(labels: Sequence[int]) -> SegmentPlan:
    """Segment plan whose anomaly segments are the runs of 1 in *labels*."""
    segments = []
    start = None
    for index, label in enumerate(list(labels) + [0]):
        if label == 1 and start is None:
            start = index
        elif label != 1 and start is not None:
            segments.append((start, index, 1))
            start = None
    return SegmentPlan(total_frames=len(labels), segments=segments)


def random_plan(total_frames: int, segment_count: int, min_len: int, max_len: int, seed: int) -> SegmentPlan:
    """Draw *segment_count* non-overlapping anomaly segments over *total_frames*."""
    if segment_count < 0 or min_len < 1 or max_len < min_len:
        raise SpecificationError("Segment count/length parameters are invalid")
    rng = substream(seed, STREAM_PLAN)
    lengths = rng.integers(min_len, max_len + 1, size=segment_count)
    free = int(total_frames) - int(lengths.sum()) - max(segment_count - 1, 0)
    if free < 0:
        raise SpecificationError(f"{segment_count} segments of length >= {min_len} do not fit in {total_frames} frames")
    # stars and bars over the free frames; one spacer frame keeps segments apart
    slots = np.sort(rng.choice(free + segment_count, size=segment_count, replace=False))
    segments = []
    offset = 0
    for i, (slot, length) in enumerate(zip(slots, lengths)):
        start = int(slot) - i + offset
        segments.append((start, start + int(length), 1))
        offset += int(length) + 1
    return SegmentPlan(total_frames=int(total_frames), segments=segments).validate()


def sample_h0(h0: GammaParams, size, rng: np.random.Generator) -> np.ndarray:
    return rng.gamma(h0.k, h0.theta, size=size)


def sample_h1(h1: GmmParams, size, rng: np.random.Generator) -> np.ndarray:
    components = rng.choice(h1.K, size=size, p=np.asarray(h1.weights))
    return rng.normal(np.asarray(h1.means)[components], np.sqrt(np.asarray(h1.variances))[components])


def gen_score_stream(h0: GammaParams, h1: GmmParams, plan: SegmentPlan, seed: int) -> ScoreStream:
    """Sample per-frame scores from H0 (gamma) or H1 (mixture) according to the plan labels."""
    if not isinstance(h0, GammaParams) or not isinstance(h1, GmmParams):
        raise SpecificationError("gen_score_stream needs GammaParams for H0 and GmmParams for H1")
    labels = plan.labels()
    n = len(labels)
    rng = substream(seed, STREAM_SCORES)
    normal_scores = sample_h0(h0, n, rng)
    anomaly_scores = sample_h1(h1, n, rng)
    z = np.where(labels == 1, anomaly_scores, normal_scores)
    return ScoreStream(t=np.arange(n), z=z, y=labels)
