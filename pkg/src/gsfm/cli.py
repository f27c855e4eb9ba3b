"""Command-line entry point: gen-data, train, eval, infer, ablate, verify.

Exit codes: 0 success, 1 verification/evaluation/training failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import shutil
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig, apply_overrides
from .data import VideoSample, export_synthetic, load_davis_dir, save_palette_png

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=10, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
        return apply_overrides(cfg, getattr(args, "set", []) or [])
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise UsageError(f"bad config: {e}") from e


def snapshot_run(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    (out / "seed.txt").write_text(f"{cfg.seed}\n")
    (out / "git_describe.txt").write_text(git_describe() + "\n")


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = Path(args.out or cfg.data.root)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    man = export_synthetic(out, cfg.synth, cfg.data.num_train, cfg.data.num_eval)
    print(f"wrote {len(man['train'])} train + {len(man['eval'])} eval sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiments import dataset_splits
    from .train import NaNLossError, Trainer, evaluate_model

    cfg = load_config(args)
    out = Path(args.out or cfg.out_dir)
    snapshot_run(out, cfg)
    train, ev = dataset_splits(cfg)
    trainer = Trainer(cfg, train, out_dir=out, log=lambda r: print(
        f"step {r['step']:>5} {r['stage']:<8} loss {r['loss']:.4f} ce {r['ce']:.4f} "
        f"bnd {r['boundary']:.4f} lr {r['lr']:.2e}", flush=True) if not args.quiet else None)
    if args.resume:
        trainer.load_checkpoint(args.resume)
        print(f"resumed from {args.resume} at step {trainer.step}")
    try:
        trainer.train(args.steps)
    except NaNLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        trainer.write_log(out / "train_log.csv")
    trainer.save_checkpoint(out / "checkpoint")
    if ev and not args.no_eval:
        report = evaluate_model(trainer.model, ev, cfg.model.top_k)
        report.write_json(out / "metrics.json")
        report.write_csv(out / "metrics.csv")
        g = report.global_
        print(f"eval J {g['J']:.4f} F {g['F']:.4f} J&F {g['JF']:.4f}")
    return EXIT_OK


def _predict_chunk(payload):
    from .train import load_model, predict_sequences
    ckpt, samples, top_k = payload
    model, _ = load_model(ckpt)
    return predict_sequences(model, samples, top_k)


def _load_predictions(pred_dir: Path, samples: list[VideoSample]) -> dict[str, np.ndarray]:
    preds = {}
    for s in samples:
        d = pred_dir / s.name
        files = sorted(d.glob("*.png"))
        if len(files) != len(s):
            raise ValueError(f"{s.name}: {len(files)} predicted masks for {len(s)} frames")
        preds[s.name] = np.stack([np.asarray(Image.open(f)) for f in files])
    return preds


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .train import load_model

    cfg = load_config(args)
    root = Path(args.data or cfg.data.root)
    out = Path(args.out or (Path(args.checkpoint).parent / "eval" if args.checkpoint else "eval"))
    if args.checkpoint:
        try:
            model, ckpt_cfg = load_model(args.checkpoint)
        except (KeyError, ValueError) as e:
            print(f"error: checkpoint does not match its config: {e}", file=sys.stderr)
            return EXIT_FAIL
        cfg = ckpt_cfg
    elif not args.pred_dir:
        raise UsageError("eval needs --checkpoint or --pred-dir")
    names = None
    if (root / "manifest.json").exists() and args.split != "all":
        names = json.loads((root / "manifest.json").read_text())[args.split]
    samples = load_davis_dir(root, tuple(cfg.model.input_size) if args.resize else None, names)
    if cfg.data.eval_limit is not None:
        samples = samples[:cfg.data.eval_limit]
    if not samples:
        print(f"error: no sequences under {root}", file=sys.stderr)
        return EXIT_FAIL
    snapshot_run(out, cfg)
    if args.pred_dir:
        try:
            preds = _load_predictions(Path(args.pred_dir), samples)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_FAIL
    elif args.jobs > 1:
        chunks = [samples[i::args.jobs] for i in range(args.jobs)]
        preds = {}
        with ProcessPoolExecutor(args.jobs) as pool:
            for part in pool.map(_predict_chunk, [(args.checkpoint, c, args.top_k) for c in chunks if c]):
                preds.update(part)
    else:
        from .train import predict_sequences
        preds = predict_sequences(model, samples, args.top_k)
    gts = {s.name: s.labels() for s in samples}
    try:
        report = evaluate(preds, gts, annotated={s.name: s.annotated for s in samples})
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    report.write_json(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    if args.save_masks:
        for name, lab in preds.items():
            d = out / "masks" / name
            d.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(lab):
                save_palette_png(d / f"{t:05d}.png", frame)
    g = report.global_
    print(f"{len(samples)} sequences  J {g['J']:.4f}  F {g['F']:.4f}  J&F {g['JF']:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .model import segment_video
    from .train import load_model

    model, cfg = load_model(args.checkpoint)
    frames_dir = Path(args.frames)
    files = sorted(frames_dir.glob("*.jpg")) + sorted(frames_dir.glob("*.png"))
    if not files:
        raise UsageError(f"no frames in {frames_dir}")
    size = tuple(cfg.model.input_size)
    frames = []
    for f in files:
        img = Image.open(f).convert("RGB")
        if img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        frames.append(np.asarray(img).transpose(2, 0, 1).astype(np.float32) / 255.0)
    first = Image.open(args.first_mask)
    if first.size != (size[1], size[0]):
        first = first.resize((size[1], size[0]), Image.NEAREST)
    labels = segment_video(model, np.stack(frames), np.asarray(first), args.top_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, lab in enumerate(labels):
        save_palette_png(out / f"{t:05d}.png", lab)
    print(f"wrote {len(labels)} masks to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import ALL_VARIANTS, medians, plot_svg, run_grid, summary_json

    cfg = load_config(args)
    unknown = [v for v in args.variants if v not in ALL_VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(ALL_VARIANTS)}")
    out = Path(args.out)
    snapshot_run(out, cfg)

    def progress(row):
        print(f"{row['variant']:>14} seed {row['seed']}  J {row['J']:.4f}  F {row['F']:.4f}  "
              f"J&F {row['JF']:.4f}", flush=True)

    rows = run_grid(cfg, args.variants, args.seeds, out / "ablation.csv", progress=progress)
    plot_svg(rows, out / "ablation.svg")
    (out / "summary.json").write_text(summary_json(rows))
    for name, v in medians(rows).items():
        print(f"median J&F {name:>14}: {v:.4f}")
    return EXIT_FAIL if any(r["nan_guard"] for r in rows) else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import format_table, run_all

    checks = run_all(include_model=not args.quick, seed=args.seed)
    print(format_table(checks))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


# -- parser -----------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. model.lfm_mode=off (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsfm", description="Spectral-filter memory VOS toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark in DAVIS layout")
    _config_flags(p)
    p.add_argument("--out", type=Path, help="dataset root (default: data.root)")
    p.add_argument("--force", action="store_true", help="replace an existing directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pseudo-video warmup + main training, then evaluation")
    _config_flags(p)
    p.add_argument("--out", type=Path, help="run directory (default: out_dir)")
    p.add_argument("--resume", type=Path, help="checkpoint directory to resume from")
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--no-eval", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or saved predictions) on a DAVIS-layout dataset")
    _config_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--pred-dir", type=Path, help="score palette PNGs instead of running a model")
    p.add_argument("--data", type=Path, help="dataset root (default: data.root)")
    p.add_argument("--split", default="eval", choices=["train", "eval", "all"])
    p.add_argument("--out", type=Path)
    p.add_argument("--top-k", type=int)
    p.add_argument("--jobs", type=int, default=1, help="worker processes over sequences")
    p.add_argument("--resize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--save-masks", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one frame directory from a first-frame mask")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--frames", type=Path, required=True)
    p.add_argument("--first-mask", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--top-k", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train/evaluate module and placement variants")
    _config_flags(p)
    p.add_argument("--variants", nargs="+", default=["baseline", "lfm", "hfm", "lfm+boundary", "hfm+boundary",
                                                     "full", "low/low", "high/high", "full/high", "low/full"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the oracle and gradient suite")
    p.add_argument("--quick", action="store_true", help="skip the full-model gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
