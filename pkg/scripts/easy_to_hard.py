"""Accuracy of IOTA-e versus IOTA-h on the hard-tail task, over several seeds."""

import argparse
import json
import statistics

from ckpl.harness.config import HARD_TAIL_TASK, ExperimentConfig
from ckpl.harness.experiment import run_e2h


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--shots", type=int, default=8, help="samples per class per stage")
    args = ap.parse_args()
    gains = []
    for seed in range(args.seeds):
        cfg = ExperimentConfig(task=HARD_TAIL_TASK, mode="e2h", shots=args.shots).with_seed(seed)
        res = run_e2h(cfg)
        gains.append(res.metrics_h.accuracy - res.metrics_e.accuracy)
        print(json.dumps({"seed": seed, "acc_e": res.metrics_e.accuracy, "acc_h": res.metrics_h.accuracy}))
    print(json.dumps({"mean_gain": statistics.fmean(gains), "non_negative": sum(g >= 0 for g in gains),
                      "seeds": len(gains)}))


if __name__ == "__main__":
    main()
