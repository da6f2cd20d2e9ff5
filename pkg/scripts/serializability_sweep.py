"""Count non-serializable schedules per workload with and without read validation."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from interleave import WORKLOADS, check_all  # noqa: E402


def main():
    print("workload            schedules  validated  snapshot-only")
    for name, (initial, scripts) in WORKLOADS.items():
        on = check_all(initial, scripts)
        off = check_all(initial, scripts, serializable=False)
        bad_on = sum(not r.serializable for r in on)
        bad_off = sum(not r.serializable for r in off)
        print(f"{name:<19} {len(on):<10} {bad_on:<10} {bad_off}")


if __name__ == "__main__":
    main()
