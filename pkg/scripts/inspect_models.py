import argparse
import sys
from pathlib import Path

sys.path.append(str(Path(__file__).resolve().parent.parent))

from machine.sewer_spec import SewerError, read_models
from machine.sprt_machine import ErrorSpec, bounds


def main() -> None:
    parser = argparse.ArgumentParser(description="Print a calibrated hypothesis models document")
    parser.add_argument("file", help="models.json written by calibrate or pipeline")
    parser.add_argument("--alpha", type=float, default=ErrorSpec().alpha, help="Type I error for the bounds line")
    parser.add_argument("--beta", type=float, default=ErrorSpec().beta, help="Type II error for the bounds line")
    args = parser.parse_args()

    try:
        models = read_models(args.file)
        sprt_bounds = bounds(ErrorSpec(alpha=args.alpha, beta=args.beta))
    except (SewerError, OSError) as exc:
        raise SystemExit(f"Failed to read models: {exc}")

    print("H0 (gamma):")
    print(f"  k: {models.h0.k:.6g}")
    print(f"  theta: {models.h0.theta:.6g}")
    print(f"  mean: {models.h0.mean:.6g}")
    print(f"H1 (mixture, K={models.h1.K}):")
    for weight, mean, variance in zip(models.h1.weights, models.h1.means, models.h1.variances):
        print(f"  w={weight:.4f}  mean={mean:.6g}  var={variance:.6g}")
    print(f"tau: {models.tau:.6g}")
    print(f"SPRT bounds (alpha={args.alpha:g}, beta={args.beta:g}): a={sprt_bounds.a:.4f}, b={sprt_bounds.b:.4f}")
    for key, value in sorted(models.metadata.items()):
        print(f"  {key}: {value}")


if __name__ == "__main__":
    main()
