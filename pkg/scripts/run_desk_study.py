"""Run the full desk study (or print its plan) into an output directory.

    python scripts/run_desk_study.py --out runs/study
    python scripts/run_desk_study.py --out runs/study --config small.json --workers 4
"""

import argparse
import sys

from ralb.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dry-run", action="store_true")
    a = p.parse_args()
    argv = ["full-study", "--out", a.out, "--workers", str(a.workers)]
    if a.config:
        argv += ["--config", a.config]
    if a.dry_run:
        argv.append("--dry-run")
    sys.exit(main(argv))
