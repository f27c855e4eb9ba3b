"""Overfit one synthetic sequence and print the J curve.

    python scripts/overfit_demo.py --steps 500 --seed 0
"""
import argparse
import sys

from gsfm.config import RunConfig
from gsfm.data import generate_sequence, synth_sequence_config
from gsfm.experiments import overfit_sequence


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sequence", type=int, default=0, help="index of the training sequence to use")
    args = ap.parse_args(argv)
    cfg = RunConfig(seed=args.seed)
    sample = generate_sequence(synth_sequence_config(cfg.synth, args.sequence, "train"), name="overfit")
    res = overfit_sequence(cfg, sample, args.steps)
    for step, j in res["curve"]:
        print(f"step {step:>4}  J {j:.4f}")
    ok = res["J"] > 0.9
    print(f"{'reached' if ok else 'did not reach'} J > 0.9 after {res['steps']} steps")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
