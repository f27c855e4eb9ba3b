"""Train and score the module/placement ablation grid on the synthetic benchmark.

    python scripts/run_ablation.py --out runs/ablation --seeds 0 1 2
"""
import argparse
import sys
from pathlib import Path

from gsfm.config import RunConfig, apply_overrides
from gsfm.experiments import ALL_VARIANTS, medians, plot_svg, run_grid, summary_json


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--variants", nargs="+", default=["baseline", "lfm", "hfm", "full", "high/high"],
                    choices=sorted(ALL_VARIANTS))
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = ap.parse_args(argv)
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.set)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")

    def progress(row):
        print(f"{row['variant']:>14} seed={row['seed']} J={row['J']:.4f} F={row['F']:.4f} "
              f"JF={row['JF']:.4f} ({row['seconds']:.0f}s)", flush=True)

    rows = run_grid(cfg, args.variants, args.seeds, args.out / "ablation.csv", progress=progress)
    plot_svg(rows, args.out / "ablation.svg")
    (args.out / "summary.json").write_text(summary_json(rows))
    for k, v in medians(rows).items():
        print(f"median JF {k:>14}: {v:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
