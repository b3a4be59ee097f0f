"""Recall@10 as a function of the triplet margin."""
import argparse

from ebr.experiments import Bench, margin_sweep
from ebr.trainer.synthetic import SyntheticConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--margins", default="0.05,0.1,0.2,0.4")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--world-seed", type=int, default=0)
    a = p.parse_args()
    margins = [float(m) for m in a.margins.split(",")]
    res = margin_sweep(margins, range(a.seeds), Bench.make(SyntheticConfig(seed=a.world_seed)))
    print("margin,recall_at_10")
    for m, r in res.items():
        print(f"{m},{r:.4f}")
    print(f"# spread {max(res.values()) - min(res.values()):.4f}")


if __name__ == "__main__":
    main()
