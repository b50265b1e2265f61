# machine/plot_machine.py
"""SVG figures: score timeline with decision spans, and score histograms with fitted densities.

Figures are built on ``matplotlib.figure.Figure`` with the SVG canvas (no
pyplot state). Every drawn layer carries a gid, which the SVG backend emits
as ``<g id="...">``:

  score-trace, tau-line, truth-span-S-E, threshold-span-S-E,
  sprt-span-S-E-VERDICT, histogram-h0, histogram-h1, density-h0, density-h1

Spans cover frames S..E-1 and are drawn over [S, E) on a linear frame axis.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure
from scipy import stats

from machine.calibrate_machine import log_pdf_h0, log_pdf_h1
from machine.sewer_spec import ANOMALY, NORMAL, HypothesisModels, PathLike, SpecificationError
from machine.sprt_machine import DecisionLog

logger = logging.getLogger(__name__)

SVG_HASH_SALT = "sewer-inspection"
TIMELINE_SIZE = (10.0, 3.5)
HISTOGRAM_SIZE = (6.0, 4.0)
HISTOGRAM_BINS = 30
DENSITY_GRID_POINTS = 2048

COLOURS = {
    "score": "#444444",
    "tau": "#d62728",
    "truth": "#1f77b4",
    "threshold": "#d62728",
    ANOMALY: "#2ca02c",
    NORMAL: "#98df8a",
    "h0": "#1f77b4",
    "h1": "#ff7f0e",
}

# (ymin, ymax) bands in axes fraction
THRESHOLD_BAND = (0.92, 0.96)
SPRT_BAND = (0.96, 1.0)


def runs(flags: Sequence[bool], t: Sequence[int]) -> List[Tuple[int, int]]:
    """Maximal runs of True as (first t, last t + 1)."""
    spans = []
    start = None
    previous = None
    for flag, index in zip(flags, t):
        index = int(index)
        if flag and start is None:
            start = index
        elif not flag and start is not None:
            spans.append((start, previous + 1))
            start = None
        previous = index
    if start is not None:
        spans.append((start, previous + 1))
    return spans


def new_figure(size: Tuple[float, float]) -> Figure:
    figure = Figure(figsize=size)
    FigureCanvasSVG(figure)
    return figure


def render_svg(figure: Figure) -> str:
    buffer = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        figure.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue().decode("utf-8")


def write_svg(path: PathLike, svg: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    logger.info("Wrote figure %s", path)
    return path


@dataclass
class TimelineFigure:
    svg: str
    truth_spans: List[Tuple[int, int]] = field(default_factory=list)
    threshold_spans: List[Tuple[int, int]] = field(default_factory=list)
    sprt_spans: List[Tuple[int, int, str]] = field(default_factory=list)


def plot_timeline(log: DecisionLog, truth: Sequence[int], tau: float) -> TimelineFigure:
    """Score trace, tau line, ground-truth spans, z >= tau detections and SPRT decision windows."""
    if len(log) == 0:
        raise SpecificationError("Cannot plot an empty decision log")
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if len(truth) != len(log):
        raise SpecificationError(f"Truth has {len(truth)} frames, log has {len(log)}")
    t, z = log.t, log.z

    figure = new_figure(TIMELINE_SIZE)
    ax = figure.add_subplot(1, 1, 1)
    ax.plot(t, z, color=COLOURS["score"], linewidth=0.8, gid="score-trace", label="score")
    ax.axhline(tau, color=COLOURS["tau"], linestyle="--", linewidth=0.8, gid="tau-line", label=f"tau={tau:.3g}")

    truth_spans = runs(truth == 1, t)
    for start, end in truth_spans:
        ax.axvspan(start, end, color=COLOURS["truth"], alpha=0.15, linewidth=0, gid=f"truth-span-{start}-{end}")

    threshold_spans = runs(z >= tau, t)
    for start, end in threshold_spans:
        ax.axvspan(start, end, *THRESHOLD_BAND, color=COLOURS["threshold"], linewidth=0,
                   gid=f"threshold-span-{start}-{end}")

    sprt_spans = []
    for event in log.events:
        start, end = int(event.window_start), int(event.t_decided) + 1
        sprt_spans.append((start, end, event.verdict))
        ax.axvspan(start, end, *SPRT_BAND, color=COLOURS[event.verdict], linewidth=0,
                   gid=f"sprt-span-{start}-{end}-{event.verdict}")

    ax.set_xlim(int(t[0]), int(t[-1]) + 1)
    ax.set_xlabel("frame")
    ax.set_ylabel("anomaly score z")
    ax.legend(loc="upper left", fontsize="small")
    figure.tight_layout()
    return TimelineFigure(
        svg=render_svg(figure),
        truth_spans=truth_spans,
        threshold_spans=threshold_spans,
        sprt_spans=sprt_spans,
    )


@dataclass
class HistogramFigure:
    svg: str
    grid: np.ndarray
    pdf_h0: np.ndarray
    pdf_h1: np.ndarray
    histograms: Dict[str, Tuple[np.ndarray, np.ndarray]]  # class -> (densities, edges)


def density_grid(scores: np.ndarray, models: HypothesisModels, points: int = DENSITY_GRID_POINTS) -> np.ndarray:
    """Grid covering the scores and almost all of both fitted densities."""
    means = np.asarray(models.h1.means)
    sds = np.sqrt(np.asarray(models.h1.variances))
    low = min(0.0, float(scores.min()), float(np.min(means - 6 * sds)))
    high = max(
        float(scores.max()),
        float(stats.gamma.ppf(1 - 1e-9, a=models.h0.k, scale=models.h0.theta)),
        float(np.max(means + 6 * sds)),
    )
    return np.linspace(low, high, int(points))


def plot_histogram(
    scores_h0: Sequence[float],
    scores_h1: Sequence[float],
    models: HypothesisModels,
    bins: int = HISTOGRAM_BINS,
) -> HistogramFigure:
    """Normalised score histograms per class with the fitted p(z|H0) and p(z|H1) overlaid."""
    normal = np.asarray(scores_h0, dtype=np.float64).reshape(-1)
    anomalous = np.asarray(scores_h1, dtype=np.float64).reshape(-1)
    if normal.size == 0 or anomalous.size == 0:
        raise SpecificationError("Histogram needs scores for both classes")

    grid = density_grid(np.concatenate([normal, anomalous]), models)
    pdf_h0 = np.exp(log_pdf_h0(grid, models.h0))
    pdf_h1 = np.exp(log_pdf_h1(grid, models.h1))

    figure = new_figure(HISTOGRAM_SIZE)
    ax = figure.add_subplot(1, 1, 1)
    histograms = {}
    for name, scores in (("h0", normal), ("h1", anomalous)):
        densities, edges = np.histogram(scores, bins=bins, density=True)
        histograms[name] = (densities, edges)
        ax.stairs(densities, edges, fill=True, alpha=0.35, color=COLOURS[name], gid=f"histogram-{name}")
    ax.plot(grid, pdf_h0, color=COLOURS["h0"], linewidth=1.2, gid="density-h0", label="p(z|H0) gamma")
    ax.plot(grid, pdf_h1, color=COLOURS["h1"], linewidth=1.2, gid="density-h1", label="p(z|H1) mixture")
    ax.axvline(models.tau, color=COLOURS["tau"], linestyle="--", linewidth=0.8, gid="tau-line")
    ax.set_xlabel("anomaly score z")
    ax.set_ylabel("density")
    ax.legend(fontsize="small")
    figure.tight_layout()
    return HistogramFigure(svg=render_svg(figure), grid=grid, pdf_h0=pdf_h0, pdf_h1=pdf_h1, histograms=histograms)
