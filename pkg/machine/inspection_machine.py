# machine/inspection_machine.py
"""End-to-end inspection run: synthetic splits, FCDD training, calibration, SPRT and evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from machine import calibrate_machine, eval_machine, fcdd_machine, plot_machine, sprt_machine, synth_machine
from machine.sewer_spec import (
    STREAM_SPLIT,
    ConfigurationError,
    Frame,
    FrameSpec,
    HypothesisModels,
    PathLike,
    ScoreStream,
    SegmentPlan,
    derive_seed,
    write_json,
    write_models,
    write_score_stream,
)

logger = logging.getLogger(__name__)

SPLIT_TRAIN = 0
SPLIT_CALIBRATION = 1
SPLIT_TEST = 2

PIPELINE_LEARNING_RATE = 1e-3
PIPELINE_EPOCHS = 60

# Acceptance levels of a default run on a 3000-frame test video
MIN_TEST_AUC = 0.95
MIN_LOCALIZATION_RATIO = 2.0


def _pipeline_train_config() -> fcdd_machine.TrainConfig:
    return fcdd_machine.TrainConfig(learning_rate=PIPELINE_LEARNING_RATE, epochs=PIPELINE_EPOCHS)


@dataclass
class PipelineConfig:
    seed: int = 0
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    train_normal: int = 400
    train_anomalous: int = 200
    calibration_normal: int = 225
    calibration_anomalous: int = 75
    test_frames: int = 3000
    test_segments: int = 12
    segment_min: int = 40
    segment_max: int = 120
    train: fcdd_machine.TrainConfig = field(default_factory=_pipeline_train_config)
    components: int = calibrate_machine.GMM_DEFAULT_COMPONENTS
    error_spec: sprt_machine.ErrorSpec = field(default_factory=sprt_machine.ErrorSpec)
    retroactive: bool = True
    tau_override: Optional[float] = None
    overlay_count: int = 8

    def validate(self) -> "PipelineConfig":
        self.frame_spec.validate()
        self.train.validate()
        for name in ("train_normal", "train_anomalous", "calibration_normal", "calibration_anomalous", "test_frames"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.test_segments < 0 or self.segment_min < 1 or self.segment_max < self.segment_min:
            raise ConfigurationError("Test segment parameters are invalid")
        if self.overlay_count < 0:
            raise ConfigurationError("overlay_count must be >= 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": int(self.seed),
            "frame_spec": self.frame_spec.to_dict(),
            "train_normal": self.train_normal,
            "train_anomalous": self.train_anomalous,
            "calibration_normal": self.calibration_normal,
            "calibration_anomalous": self.calibration_anomalous,
            "test_frames": self.test_frames,
            "test_segments": self.test_segments,
            "segment_min": self.segment_min,
            "segment_max": self.segment_max,
            "train": asdict(self.train),
            "components": self.components,
            "alpha": self.error_spec.alpha,
            "beta": self.error_spec.beta,
            "retroactive": self.retroactive,
            "tau_override": self.tau_override,
        }


class InspectionMachine:
    """
    Runs the two-stage inspection pipeline from a single seed.

    Stage one scores frames with a trained FCDD network; stage two aggregates
    the scores with an SPRT. Per-frame Youden thresholding is run alongside as
    the baseline. Each step stores its result on the machine so callers can
    stop early or inspect intermediate artifacts.
    """

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = (config or PipelineConfig()).validate()
        self.train_frames: List[Frame] = []
        self.calibration_frames: List[Frame] = []
        self.test_frames: List[Frame] = []
        self.test_plan: Optional[SegmentPlan] = None
        self.weights: Optional[fcdd_machine.NetworkWeights] = None
        self.loss_trace: List[float] = []
        self.calibration_stream: Optional[ScoreStream] = None
        self.test_stream: Optional[ScoreStream] = None
        self.models: Optional[HypothesisModels] = None
        self.threshold_log: Optional[sprt_machine.DecisionLog] = None
        self.sprt_log: Optional[sprt_machine.DecisionLog] = None
        self.report: Optional[eval_machine.ComparisonReport] = None
        self.test_auc: Optional[float] = None
        self.localization: Optional[float] = None

    def split_seed(self, split: int) -> int:
        return derive_seed(self.config.seed, STREAM_SPLIT, split)

    @property
    def tau(self) -> float:
        if self.config.tau_override is not None:
            return float(self.config.tau_override)
        return float(self.models.tau)

    def generate(self):
        cfg = self.config
        self.train_frames = synth_machine.gen_dataset(
            cfg.frame_spec, cfg.train_normal, cfg.train_anomalous, self.split_seed(SPLIT_TRAIN)
        )
        self.calibration_frames = synth_machine.gen_dataset(
            cfg.frame_spec, cfg.calibration_normal, cfg.calibration_anomalous, self.split_seed(SPLIT_CALIBRATION)
        )
        test_seed = self.split_seed(SPLIT_TEST)
        self.test_plan = synth_machine.random_plan(
            cfg.test_frames, cfg.test_segments, cfg.segment_min, cfg.segment_max, test_seed
        )
        self.test_frames = synth_machine.gen_sequence(cfg.frame_spec, self.test_plan, test_seed)

    def train(self):
        dataset = [(frame, frame.label) for frame in self.train_frames]
        result = fcdd_machine.train(dataset, self.config.train)
        self.weights, self.loss_trace = result.weights, result.loss_trace

    def score(self):
        self.calibration_stream = fcdd_machine.score_frames(self.weights, self.calibration_frames)
        self.test_stream = fcdd_machine.score_frames(self.weights, self.test_frames)
        if 0 < int(self.test_stream.y.sum()) < len(self.test_stream):
            self.test_auc = calibrate_machine.roc(self.test_stream.z, self.test_stream.y).auc
            logger.info("Per-frame ROC AUC on the test video: %.4f", self.test_auc)

    def calibrate(self):
        self.models = calibrate_machine.fit_hypothesis_models(
            self.calibration_stream, K=self.config.components, seed=self.config.seed
        )

    def decide(self):
        self.threshold_log = eval_machine.threshold_log(self.test_stream, self.tau)
        self.sprt_log = sprt_machine.run(
            self.test_stream, self.models, self.config.error_spec, retroactive=self.config.retroactive
        )

    def evaluate(self):
        self.report = eval_machine.compare(self.threshold_log, self.sprt_log, self.test_stream.y)
        anomalous = [frame for frame in self.test_frames if frame.label == 1]
        self.localization = fcdd_machine.localization_ratio(self.weights, anomalous) if anomalous else None

    def run(self) -> eval_machine.ComparisonReport:
        self.generate()
        self.train()
        self.score()
        self.calibrate()
        self.decide()
        self.evaluate()
        return self.report

    def write_outputs(self, output_dir: PathLike) -> Path:
        """Write every artifact of a completed run under *output_dir*."""
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        fcdd_machine.save_weights(out / "weights.json", self.weights)
        fcdd_machine.write_loss_trace(out / "loss.csv", self.loss_trace)
        write_score_stream(out / "calibration_scores.jsonl", self.calibration_stream)
        write_score_stream(out / "test_scores.jsonl", self.test_stream)
        write_models(out / "models.json", self.models)
        sprt_machine.write_decision_log(out / "sprt_log.jsonl", self.sprt_log)
        sprt_machine.write_summary(out / "sprt_summary.json", self.sprt_log)
        sprt_machine.write_decision_log(out / "threshold_log.jsonl", self.threshold_log)
        self.report.write(out / "report.csv", out / "report.txt")

        timeline = plot_machine.plot_timeline(self.sprt_log, self.test_stream.y, self.tau)
        plot_machine.write_svg(out / "timeline.svg", timeline.svg)
        stream = self.calibration_stream
        histogram = plot_machine.plot_histogram(stream.z[stream.y == 0], stream.z[stream.y == 1], self.models)
        plot_machine.write_svg(out / "histogram.svg", histogram.svg)
        fcdd_machine.write_explanations(out / "overlays", self.weights, self.test_frames, self.config.overlay_count)

        write_json(
            out / "run.json",
            {
                "config": self.config.to_dict(),
                "tau": self.tau,
                "test_auc": self.test_auc,
                "localization_ratio": self.localization,
                "test_plan": self.test_plan.to_dict(),
                "metrics": {row.method: row.metrics.as_dict() for row in self.report.rows},
            },
        )
        logger.info("Pipeline outputs written to %s", out)
        return out

