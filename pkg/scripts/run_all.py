"""Run every shipped experiment config and compare the model-free results.

    python scripts/run_all.py [--out runs] [--jobs 4] [--only model_free ...]
"""

import argparse
import sys
from pathlib import Path

from tesseract.harness.cli import main as cli

HERE = Path(__file__).resolve().parent
ORDER = ["verify_props", "verify_thm1", "verify_thm3", "model_based", "model_free",
         "ablation_rank", "ablation_env_rank"]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--only", nargs="+", choices=ORDER)
    args = p.parse_args(argv)
    status = 0
    for name in args.only or ORDER:
        print(f"== {name}")
        code = cli(["run", str(HERE / "configs" / f"{name}.ini"), "--jobs", str(args.jobs),
                    "--out", str(Path(args.out) / name)])
        status = status or code
    if (Path(args.out) / "model_free" / "records.json").exists():
        print("== compare")
        cli(["compare", str(Path(args.out) / "model_free"),
             "--out", str(Path(args.out) / "compare")])
    return status


if __name__ == "__main__":
    sys.exit(main())
