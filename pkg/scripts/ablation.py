"""Lambda and prompt-length sweeps; one metrics row per point written to CSV."""

import argparse

from ckpl.harness.config import ExperimentConfig
from ckpl.harness.experiment import run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ExperimentConfig(sweep_lambda=(0.1, 0.2, 0.5, 1.0, 2.0), sweep_prompt_length=(1, 2, 4),
                           sweep_inject_depth=("1", "2", "all")).with_seed(args.seed)
    summary = run(cfg, args.out, ablate=True)
    print(open(f"{args.out}/metrics.csv", encoding="utf-8").read(), end="")
    print(f"{summary['rows']} rows -> {args.out}/metrics.csv")


if __name__ == "__main__":
    main()
