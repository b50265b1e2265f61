# app.py
"""Command-line driver for the sewer inspection pipeline.

Subcommands: synth, train, score, calibrate, sprt, eval, plot, pipeline.
Every subcommand writes into --out-dir (default: $SEWER_OUTPUT_DIR or
./sewer_out). Options may also come from a key=value file given with
--config; flags on the command line win over file values.

Exit codes: 0 success, 2 usage or invalid parameters, 3 data or calibration error.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from machine import calibrate_machine, eval_machine, fcdd_machine, plot_machine, sprt_machine, synth_machine
from machine.frame_io import read_sequence, write_sequence
from machine.inspection_machine import PIPELINE_EPOCHS, PIPELINE_LEARNING_RATE, InspectionMachine, PipelineConfig
from machine.sewer_spec import (
    ConfigurationError,
    FrameSpec,
    SewerError,
    SpecificationError,
    read_models,
    read_score_stream,
    write_json,
    write_models,
    write_score_stream,
)

logger = logging.getLogger("sewer")

OUTPUT_DIR_ENV = "SEWER_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "sewer_out"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )


def read_config_file(path: str) -> Dict[str, str]:
    """Parse a key=value file; '#' starts a comment, keys may use '-' or '_'."""
    values = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecificationError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def apply_config(parser: argparse.ArgumentParser, values: Dict[str, str]):
    """Install config-file values as parser defaults so explicit flags still win."""
    actions = {action.dest: action for action in parser._actions}
    defaults = {}
    for key, value in values.items():
        if key in ("config", "command"):
            continue
        action = actions.get(key)
        if action is None:
            parser.error(f"unknown option {key!r} in config file")
        if action.nargs == 0:
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = value
        action.required = False
    parser.set_defaults(**defaults)


def frame_spec_from_args(args) -> FrameSpec:
    return FrameSpec(
        width=args.width,
        height=args.height,
        blob_intensity_delta=args.blob_delta,
        noise_sigma=args.noise_sigma,
        blur_probability=args.blur_probability,
        seed=args.seed,
    ).validate()


def train_config_from_args(args) -> fcdd_machine.TrainConfig:
    return fcdd_machine.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        augment_fraction=args.augment_fraction,
        seed=args.seed,
    ).validate()


def error_spec_from_args(args) -> sprt_machine.ErrorSpec:
    return sprt_machine.ErrorSpec(alpha=args.alpha, beta=args.beta)


def output_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_frames(directories: List[str]):
    frames = []
    for directory in directories:
        loaded, _ = read_sequence(directory)
        frames.extend(loaded)
    return frames


def cmd_synth(args) -> int:
    out = output_dir(args)
    if args.stream_only:
        if not args.models:
            raise SpecificationError("--stream-only needs --models")
        models = read_models(args.models)
        plan = synth_machine.random_plan(args.frames, args.segments, args.segment_min, args.segment_max, args.seed)
        stream = synth_machine.gen_score_stream(models.h0, models.h1, plan, args.seed)
        write_score_stream(out / "scores.jsonl", stream)
        write_json(out / "plan.json", plan.to_dict())
        return EXIT_OK

    spec = frame_spec_from_args(args)
    if args.normal is not None or args.anomalous is not None:
        frames = synth_machine.gen_dataset(spec, args.normal or 0, args.anomalous or 0, args.seed)
        plan = synth_machine.plan_from_labels([frame.label for frame in frames])
    else:
        plan = synth_machine.random_plan(args.frames, args.segments, args.segment_min, args.segment_max, args.seed)
        frames = synth_machine.gen_sequence(spec, plan, args.seed)
    write_sequence(out, frames, spec, plan, args.seed)
    return EXIT_OK


def cmd_train(args) -> int:
    out = output_dir(args)
    config = train_config_from_args(args)
    frames = load_frames(args.data)
    initial = fcdd_machine.load_weights(args.resume) if args.resume else None
    result = fcdd_machine.train([(frame, frame.label) for frame in frames], config, initial=initial)
    fcdd_machine.save_weights(out / "weights.json", result.weights)
    fcdd_machine.write_loss_trace(out / "loss.csv", result.loss_trace)
    return EXIT_OK


def cmd_score(args) -> int:
    out = output_dir(args)
    weights = fcdd_machine.load_weights(args.weights)
    frames = load_frames(args.data)
    stream = fcdd_machine.score_frames(weights, frames)
    write_score_stream(out / "scores.jsonl", stream)
    if args.overlays:
        fcdd_machine.write_explanations(out / "overlays", weights, frames, args.overlays)
    if args.localization:
        ratio = fcdd_machine.localization_ratio(weights, [frame for frame in frames if frame.label == 1])
        write_json(out / "localization.json", {"localization_ratio": ratio})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    out = output_dir(args)
    stream = read_score_stream(args.scores)
    models = calibrate_machine.fit_hypothesis_models(stream, K=args.components, seed=args.seed)
    write_models(out / "models.json", models)
    return EXIT_OK


def cmd_sprt(args) -> int:
    out = output_dir(args)
    spec = error_spec_from_args(args)
    stream = read_score_stream(args.scores)
    models = read_models(args.models)
    log = sprt_machine.run(stream, models, spec, retroactive=not args.closing_frame_only)
    sprt_machine.write_decision_log(out / "sprt_log.jsonl", log)
    summary = log.summary()
    if args.simulate:
        summary["operating_characteristics"] = sprt_machine.operating_characteristics(
            models, spec, n_streams=args.simulate, max_frames=args.max_frames, seed=args.seed
        ).to_dict()
    write_json(out / "sprt_summary.json", summary)
    return EXIT_OK


def _tau(args) -> float:
    if args.tau is not None:
        return float(args.tau)
    if not args.models:
        raise SpecificationError("Either --tau or --models is required")
    return read_models(args.models).tau


def cmd_eval(args) -> int:
    out = output_dir(args)
    stream = read_score_stream(args.scores)
    threshold = eval_machine.threshold_log(stream, _tau(args))
    sprt = sprt_machine.read_decision_log(args.sprt_log)
    sprt_machine.write_decision_log(out / "threshold_log.jsonl", threshold)
    report = eval_machine.compare(threshold, sprt, stream.y)
    report.write(out / "report.csv", out / "report.txt")
    print(report.text_table(), end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = output_dir(args)
    stream = read_score_stream(args.scores)
    models = read_models(args.models)
    tau = args.tau if args.tau is not None else models.tau
    if args.sprt_log:
        log = sprt_machine.read_decision_log(args.sprt_log, args.sprt_summary)
        timeline = plot_machine.plot_timeline(log, stream.y, tau)
        plot_machine.write_svg(out / "timeline.svg", timeline.svg)
    calibration = read_score_stream(args.calibration_scores) if args.calibration_scores else stream
    histogram = plot_machine.plot_histogram(
        calibration.z[calibration.y == 0], calibration.z[calibration.y == 1], models
    )
    plot_machine.write_svg(out / "histogram.svg", histogram.svg)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = PipelineConfig(
        seed=args.seed,
        frame_spec=frame_spec_from_args(args),
        train_normal=args.train_normal,
        train_anomalous=args.train_anomalous,
        calibration_normal=args.calibration_normal,
        calibration_anomalous=args.calibration_anomalous,
        test_frames=args.frames,
        test_segments=args.segments,
        segment_min=args.segment_min,
        segment_max=args.segment_max,
        train=train_config_from_args(args),
        components=args.components,
        error_spec=error_spec_from_args(args),
        retroactive=not args.closing_frame_only,
        tau_override=args.tau,
        overlay_count=args.overlays,
    )
    machine = InspectionMachine(config)
    report = machine.run()
    machine.write_outputs(output_dir(args))
    print(report.text_table(), end="")
    return EXIT_OK


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file with default option values")
    common.add_argument("--out-dir", default=os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR),
                        help=f"Output directory (default: ${OUTPUT_DIR_ENV} or ./{DEFAULT_OUTPUT_DIR})")
    common.add_argument("--seed", type=int, default=0, help="Master seed")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    return common


def _frame_options() -> argparse.ArgumentParser:
    defaults = FrameSpec()
    group = argparse.ArgumentParser(add_help=False)
    group.add_argument("--width", type=int, default=defaults.width, help="Frame width (multiple of 4)")
    group.add_argument("--height", type=int, default=defaults.height, help="Frame height (multiple of 4)")
    group.add_argument("--blob-delta", type=float, default=defaults.blob_intensity_delta,
                       help="Deposit blob intensity added to the wall")
    group.add_argument("--noise-sigma", type=float, default=defaults.noise_sigma, help="Per-pixel noise sigma")
    group.add_argument("--blur-probability", type=float, default=defaults.blur_probability,
                       help="Probability of a transient blur/illumination perturbation per frame")
    return group


def _video_options() -> argparse.ArgumentParser:
    group = argparse.ArgumentParser(add_help=False)
    group.add_argument("--frames", type=int, default=3000, help="Frames in the test video")
    group.add_argument("--segments", type=int, default=12, help="Anomaly segments in the test video")
    group.add_argument("--segment-min", type=int, default=40, help="Shortest anomaly segment")
    group.add_argument("--segment-max", type=int, default=120, help="Longest anomaly segment")
    return group


def _train_options(lr: float, epochs: int) -> argparse.ArgumentParser:
    defaults = fcdd_machine.TrainConfig()
    group = argparse.ArgumentParser(add_help=False)
    group.add_argument("--lr", type=float, default=lr, help="Adam learning rate")
    group.add_argument("--batch-size", type=int, default=defaults.batch_size, help="Minibatch size")
    group.add_argument("--epochs", type=int, default=epochs, help="Training epochs")
    group.add_argument("--augment-fraction", type=float, default=defaults.augment_fraction,
                       help="Fraction of samples augmented per epoch")
    return group


def _sprt_options() -> argparse.ArgumentParser:
    group = argparse.ArgumentParser(add_help=False)
    group.add_argument("--alpha", type=float, default=sprt_machine.DEFAULT_ALPHA, help="Type I error probability")
    group.add_argument("--beta", type=float, default=sprt_machine.DEFAULT_BETA, help="Type II error probability")
    group.add_argument("--closing-frame-only", action="store_true",
                       help="Label only the frame that closes a window instead of the whole window")
    return group


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Two-stage sewer inspection: FCDD frame scores aggregated by an SPRT")
    sub = parser.add_subparsers(dest="command", required=True)
    common, frame, video, sprt = _common_options(), _frame_options(), _video_options(), _sprt_options()
    train_defaults = fcdd_machine.TrainConfig()

    p = sub.add_parser("synth", parents=[common, frame, video], help="Generate a synthetic labelled frame sequence")
    p.add_argument("--normal", type=int, help="Still-frame dataset mode: number of normal frames")
    p.add_argument("--anomalous", type=int, help="Still-frame dataset mode: number of anomalous frames")
    p.add_argument("--stream-only", action="store_true", help="Sample a score stream from --models instead of frames")
    p.add_argument("--models", help="Hypothesis models JSON for --stream-only")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", parents=[common, _train_options(train_defaults.learning_rate, train_defaults.epochs)],
                       help="Train the FCDD network on sequence directories")
    p.add_argument("--data", action="append", required=True, help="Sequence directory (repeatable)")
    p.add_argument("--resume", help="Weights JSON to continue training from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("score", parents=[common], help="Score frames with trained weights")
    p.add_argument("--weights", required=True, help="Weights JSON")
    p.add_argument("--data", action="append", required=True, help="Sequence directory (repeatable)")
    p.add_argument("--overlays", type=int, default=0, help="Write heatmap overlays for this many anomalous frames")
    p.add_argument("--localization", action="store_true", help="Also write the mask localization ratio")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("calibrate", parents=[common], help="Fit H0/H1 densities and the Youden threshold")
    p.add_argument("--scores", required=True, help="Calibration score stream JSONL")
    p.add_argument("--components", type=int, default=calibrate_machine.GMM_DEFAULT_COMPONENTS,
                   help="Mixture components for H1")
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("sprt", parents=[common, sprt], help="Run the SPRT over a score stream")
    p.add_argument("--scores", required=True, help="Score stream JSONL")
    p.add_argument("--models", required=True, help="Hypothesis models JSON")
    p.add_argument("--simulate", type=int, default=0,
                   help="Also simulate this many streams per hypothesis for empirical error rates")
    p.add_argument("--max-frames", type=int, default=500, help="Frame limit per simulated stream")
    p.set_defaults(handler=cmd_sprt)

    p = sub.add_parser("eval", parents=[common], help="Compare per-frame thresholding with an SPRT log")
    p.add_argument("--scores", required=True, help="Score stream JSONL with ground truth")
    p.add_argument("--sprt-log", required=True, help="SPRT decision log JSONL")
    p.add_argument("--models", help="Hypothesis models JSON supplying tau")
    p.add_argument("--tau", type=float, help="Threshold override")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("plot", parents=[common], help="Write timeline and histogram SVG figures")
    p.add_argument("--scores", required=True, help="Score stream JSONL with ground truth")
    p.add_argument("--models", required=True, help="Hypothesis models JSON")
    p.add_argument("--sprt-log", help="SPRT decision log JSONL (enables the timeline)")
    p.add_argument("--sprt-summary", help="SPRT summary JSON with decision events")
    p.add_argument("--calibration-scores", help="Score stream for the histogram (default: --scores)")
    p.add_argument("--tau", type=float, help="Threshold override")
    p.set_defaults(handler=cmd_plot)

    pipeline = PipelineConfig()
    pipeline_train = _train_options(PIPELINE_LEARNING_RATE, PIPELINE_EPOCHS)
    p = sub.add_parser("pipeline", parents=[common, frame, video, sprt, pipeline_train],
                       help="Run every stage from one seed")
    p.add_argument("--train-normal", type=int, default=pipeline.train_normal, help="Normal training frames")
    p.add_argument("--train-anomalous", type=int, default=pipeline.train_anomalous, help="Anomalous training frames")
    p.add_argument("--calibration-normal", type=int, default=pipeline.calibration_normal,
                   help="Normal calibration frames")
    p.add_argument("--calibration-anomalous", type=int, default=pipeline.calibration_anomalous,
                   help="Anomalous calibration frames")
    p.add_argument("--components", type=int, default=calibrate_machine.GMM_DEFAULT_COMPONENTS,
                   help="Mixture components for H1")
    p.add_argument("--tau", type=float, help="Threshold override")
    p.add_argument("--overlays", type=int, default=8, help="Heatmap overlays to write")
    p.set_defaults(handler=cmd_pipeline)
    parser.commands = sub.choices
    return parser


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((token for token in rest if token in parser.commands), None)
    if known.config and command is not None:
        try:
            values = read_config_file(known.config)
        except (OSError, SpecificationError) as exc:
            parser.error(str(exc))
        apply_config(parser.commands[command], values)
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    logger.info("Running %s", args.command)
    try:
        return args.handler(args)
    except (SpecificationError, ConfigurationError) as exc:
        logger.error("Invalid parameters: %s", exc)
        return EXIT_USAGE
    except (SewerError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
