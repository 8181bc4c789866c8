"""Few-shot correction rate on the default synthetic task, over several seeds."""

import argparse
import json
import statistics

from ckpl.harness.config import ExperimentConfig
from ckpl.harness.experiment import prepare, run_fewshot


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--shots", type=int, default=16)
    args = ap.parse_args()
    rates = []
    for seed in range(args.seeds):
        cfg = ExperimentConfig(shots=args.shots).with_seed(seed)
        prep = prepare(cfg)
        m = run_fewshot(cfg, prep).metrics
        rates.append(m.correction_rate)
        print(json.dumps({"seed": seed, "base_error": prep.base_test_error, "accuracy": m.accuracy,
                          "correction_rate": m.correction_rate}))
    print(json.dumps({"mean_correction_rate": statistics.fmean(rates)}))


if __name__ == "__main__":
    main()
