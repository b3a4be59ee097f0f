"""End-to-end tutorial: synth, train, embed, ingest, index, sweep, then the fuzzy-name probe."""
import argparse

from ebr.experiments import fuzzy_probe, run_tutorial


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-docs", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=5)
    a = p.parse_args()
    art = run_tutorial(a.out_dir, a.seed, a.num_docs, a.epochs)
    r = fuzzy_probe(art)
    target = "planted-john-smith"
    print(f"planted doc: index distance {r['distance']:.4f}, rank {r['rank']}")
    print(f"  (and (term text:john) (term text:smithe))  -> hit={target in r['term_only']}")
    print(f"  ... OR nn radius just above the distance     -> hit={target in r['above']}")
    print(f"  ... OR nn radius just below the distance     -> hit={target in r['below']}")
    for k, v in art.items():
        print(f"{k:<12}{v}")


if __name__ == "__main__":
    main()
