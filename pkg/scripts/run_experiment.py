"""Run one of the shipped experiment configs.

Usage:
    python scripts/run_experiment.py periodic_recovery
    python scripts/run_experiment.py imputation_benchmark --sweep 10
    python scripts/run_experiment.py convergence --seed 3 --output /tmp/conv

Names map to scripts/configs/<name>.json. Extra flags are forwarded to
the CLI, so --seed, --output, and --sweep all work.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from psmf.cli import main

CONFIG_DIR = Path(__file__).resolve().parent / "configs"


def available() -> list[str]:
    return sorted(p.stem for p in CONFIG_DIR.glob("*.json"))


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("name", choices=available(),
                        help="config name under scripts/configs/")
    args, rest = parser.parse_known_args()
    config = CONFIG_DIR / f"{args.name}.json"
    sys.exit(main(["--config", str(config), *rest]))
