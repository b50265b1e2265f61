import argparse
import csv
import logging
import sys
from pathlib import Path

sys.path.append(str(Path(__file__).resolve().parent.parent))

from machine.inspection_machine import (
    MIN_LOCALIZATION_RATIO,
    MIN_TEST_AUC,
    PIPELINE_EPOCHS,
    InspectionMachine,
    PipelineConfig,
)

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')


def main() -> None:
    parser = argparse.ArgumentParser(
        description="Run the pipeline over several seeds and compare per-frame thresholding with the SPRT"
    )
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="Master seeds (>= 5 advised)")
    parser.add_argument("--frames", type=int, default=3000, help="Frames in each test video")
    parser.add_argument("--epochs", type=int, default=PIPELINE_EPOCHS, help="Training epochs per seed")
    parser.add_argument("--out", default="directional_results.csv", help="Per-seed CSV results")
    args = parser.parse_args()

    rows = []
    for seed in args.seeds:
        config = PipelineConfig(seed=seed, test_frames=args.frames)
        config.train.epochs = args.epochs
        machine = InspectionMachine(config)
        report = machine.run()
        threshold, sprt = report.rows[0].metrics, report.rows[1].metrics
        holds = (
            machine.test_auc >= MIN_TEST_AUC
            and sprt.f1 > threshold.f1
            and sprt.fpr < threshold.fpr
            and machine.localization is not None
            and machine.localization >= MIN_LOCALIZATION_RATIO
        )
        rows.append([
            seed, f"{machine.test_auc:.4f}", f"{threshold.f1:.4f}", f"{sprt.f1:.4f}",
            f"{threshold.fpr:.4f}", f"{sprt.fpr:.4f}", report.rows[1].undecided_frames,
            f"{machine.localization:.3f}", holds,
        ])
        print(f"seed {seed}: AUC {machine.test_auc:.4f}  F1 {threshold.f1:.4f} -> {sprt.f1:.4f}  "
              f"FPR {threshold.fpr:.4f} -> {sprt.fpr:.4f}  localization {machine.localization:.2f}  "
              f"{'ok' if holds else 'FAILED'}")

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["seed", "test_auc", "threshold_f1", "sprt_f1", "threshold_fpr", "sprt_fpr",
                         "sprt_undecided", "localization_ratio", "criteria_hold"])
        writer.writerows(rows)

    held = sum(1 for row in rows if row[-1])
    print(f"Criteria held on {held}/{len(rows)} seeds; results in {out_path}")
    if held != len(rows):
        raise SystemExit(1)


if __name__ == "__main__":
    main()
