"""PQ / OPQ sweep on the anisotropic synthetic corpus; CSV to stdout or --out."""
import argparse

from ebr.evalharness import sweep_csv
from ebr.experiments import quant_sweep


def ints(s):
    return tuple(int(x) for x in s.split(","))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--num-vectors", type=int, default=10_000)
    p.add_argument("--num-queries", type=int, default=500)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--num-clusters", type=int, default=64)
    p.add_argument("--nprobe", type=ints, default=(1, 2, 4, 8, 16))
    p.add_argument("--pq-bytes", type=ints, help="default d/8,d/4,d/2")
    p.add_argument("--transforms", default="identity,opq")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    a = p.parse_args()
    pts = quant_sweep(a.num_vectors, a.num_queries, a.dim, a.num_clusters, a.nprobe, a.pq_bytes,
                      tuple(a.transforms.split(",")), a.seed)
    text = sweep_csv(pts)
    if a.out:
        with open(a.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        print(text, end="")


if __name__ == "__main__":
    main()
