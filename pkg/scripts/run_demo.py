"""Run the heart-rate scenario over several seeds and summarise each run."""

import argparse
import hashlib
import tempfile
from pathlib import Path

from smartstore.demo import DemoConfig, run_demo


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 42])
    parser.add_argument("--duration", type=float, default=10.0)
    parser.add_argument("--rate", type=float, default=10.0)
    parser.add_argument("--batch", type=int, default=50)
    parser.add_argument("--mode", choices=["acid", "base"], default="acid")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        print("seed  samples  batches  history  conflicts  integrity  csv-sha256")
        for seed in args.seeds:
            out = Path(tmp) / f"seed{seed}.csv"
            config = DemoConfig(
                duration=args.duration,
                sample_rate=args.rate,
                batch_size=args.batch,
                seed=seed,
                mode=args.mode,
                output_path=str(out),
            )
            report = run_demo(config)
            digest = hashlib.sha256(out.read_bytes()).hexdigest()[:16]
            print(
                f"{seed:<5} {report.samples_written:<8} {report.batches_committed:<8} "
                f"{report.patient_history_length:<8} {report.conflicts:<10} "
                f"{'pass' if report.final_integrity else 'FAIL':<10} {digest}"
            )


if __name__ == "__main__":
    main()
