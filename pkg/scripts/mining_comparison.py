"""Recall@10 of each negative-mining strategy on the synthetic benchmark."""
import argparse
import json

from ebr.experiments import Bench, mining_comparison
from ebr.trainer.synthetic import SyntheticConfig
from ebr.trainer.train import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5, help="training seeds to average over")
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--margin", type=float, default=0.1)
    a = p.parse_args()
    bench = Bench.make(SyntheticConfig(seed=a.world_seed))
    res = mining_comparison(range(a.seeds), bench, TrainConfig(epochs=a.epochs, margin=a.margin))
    for k, v in sorted(res.items(), key=lambda t: -t[1]):
        print(f"{k:<24}{v:.4f}")
    print(json.dumps(res, sort_keys=True))


if __name__ == "__main__":
    main()
