"""Ablation grid: module switches and filter placements, trained and scored per seed."""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from pathlib import Path
from statistics import median

import numpy as np

from .config import RunConfig
from .data import VideoSample, generate_sequence, load_davis_dir, load_manifest, synth_sequence_config
from .train import NaNLossError, Trainer, evaluate_model

# name -> (encoder filter, decoder filter, boundary branch)
MODULE_VARIANTS = {
    "baseline": ("off", "off", False),
    "lfm": ("low", "off", False),
    "hfm": ("off", "high", False),
    "lfm+boundary": ("low", "off", True),
    "hfm+boundary": ("off", "high", True),
    "full": ("low", "high", True),
}
PLACEMENT_VARIANTS = {
    "low/low": ("low", "low", True),
    "high/high": ("high", "high", True),
    "full/high": ("full", "high", True),
    "low/full": ("low", "full", True),
}
ALL_VARIANTS = {**MODULE_VARIANTS, **PLACEMENT_VARIANTS}


def variant_config(base: RunConfig, name: str, seed: int) -> RunConfig:
    lfm, hfm, boundary = ALL_VARIANTS[name]
    model = dataclasses.replace(base.model, lfm_mode=lfm, hfm_mode=hfm, boundary_branch=boundary)
    return dataclasses.replace(base, model=model, seed=seed)


def synthetic_splits(cfg: RunConfig) -> tuple[list[VideoSample], list[VideoSample]]:
    """In-memory copy of the synthetic benchmark (same content as the exported dataset)."""
    mk = lambda split, i: generate_sequence(synth_sequence_config(cfg.synth, i, split), name=f"{split}_{i:04d}")
    train = [mk("train", i) for i in range(cfg.data.num_train)]
    ev = [mk("eval", i) for i in range(cfg.data.num_eval)]
    return train, ev


def dataset_splits(cfg: RunConfig) -> tuple[list[VideoSample], list[VideoSample]]:
    """Load from ``cfg.data.root`` when it holds a manifest, otherwise synthesize in memory."""
    root = Path(cfg.data.root)
    if (root / "manifest.json").exists():
        man = load_manifest(root)
        size = tuple(cfg.model.input_size)
        train = load_davis_dir(root, size, man["train"])
        ev = load_davis_dir(root, size, man["eval"])
    else:
        train, ev = synthetic_splits(cfg)
    if cfg.data.eval_limit is not None:
        ev = ev[:cfg.data.eval_limit]
    return train, ev


def run_variant(base: RunConfig, name: str, seed: int, train: list[VideoSample], ev: list[VideoSample],
                log=None) -> dict:
    cfg = variant_config(base, name, seed)
    t0 = time.perf_counter()
    trainer = Trainer(cfg, train, log=log)
    nan = False
    try:
        trainer.train()
    except NaNLossError:
        nan = True
    report = evaluate_model(trainer.model, ev, cfg.model.top_k)
    g = report.global_
    return {"variant": name, "seed": seed, "lfm": cfg.model.lfm_mode, "hfm": cfg.model.hfm_mode,
            "boundary": cfg.model.boundary_branch, "J": g["J"], "F": g["F"], "JF": g["JF"],
            "final_loss": trainer.history[-1]["loss"] if trainer.history else float("nan"),
            "nan_guard": nan, "seconds": time.perf_counter() - t0}


def run_grid(base: RunConfig, variants: list[str], seeds: list[int], out_csv: str | Path | None = None,
             splits=None, progress=None) -> list[dict]:
    train, ev = splits if splits is not None else dataset_splits(base)
    rows = []
    for seed in seeds:
        for name in variants:
            row = run_variant(base, name, seed, train, ev)
            rows.append(row)
            if progress is not None:
                progress(row)
            if out_csv is not None:
                write_rows(rows, out_csv)
    return rows


FIELDS = ["variant", "seed", "lfm", "hfm", "boundary", "J", "F", "JF", "final_loss", "nan_guard", "seconds"]


def write_rows(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        w.writerows(rows)


def read_rows(path: str | Path) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("J", "F", "JF", "final_loss", "seconds"):
            r[k] = float(r[k])
        r["seed"] = int(r["seed"])
        r["boundary"] = r["boundary"] == "True"
        r["nan_guard"] = r["nan_guard"] == "True"
    return rows


def medians(rows: list[dict], key: str = "JF") -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in rows:
        by.setdefault(r["variant"], []).append(r[key])
    return {k: median(v) for k, v in by.items()}


def plot_svg(rows: list[dict], path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.5))
    for i, n in enumerate(names):
        vals = [r["JF"] for r in rows if r["variant"] == n]
        ax.scatter([i] * len(vals), vals, color="0.5", s=12)
        ax.hlines(median(vals), i - 0.3, i + 0.3, color="C0")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel("J&F")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def summary_json(rows: list[dict]) -> str:
    return json.dumps({k: {"J": medians(rows, "J")[k], "F": medians(rows, "F")[k], "JF": v}
                       for k, v in medians(rows).items()}, indent=2)


def seed_everything(seed: int) -> None:
    np.random.seed(seed)


def overfit_sequence(base: RunConfig, sample: VideoSample, max_steps: int = 500, check_every: int = 50,
                     target_j: float = 0.9) -> dict:
    """Train on one sequence until its J exceeds ``target_j`` or ``max_steps`` run out."""
    tc = dataclasses.replace(base.train, pretrain_steps=0, main_steps=max_steps)
    trainer = Trainer(dataclasses.replace(base, train=tc), [sample])
    curve = []
    while trainer.step < max_steps:
        trainer.train(check_every)
        j = evaluate_model(trainer.model, [sample], base.model.top_k).global_["J"]
        curve.append((trainer.step, j))
        if j > target_j:
            break
    return {"steps": trainer.step, "J": curve[-1][1], "curve": curve}


def sigma_sweep(base: RunConfig, sigmas: list[float], seeds: list[int], splits=None, progress=None) -> list[dict]:
    """Full model trained at several cutoff widths (both filter modules share the value)."""
    train, ev = splits if splits is not None else dataset_splits(base)
    rows = []
    for sigma in sigmas:
        model = dataclasses.replace(base.model, lfm_sigma=sigma, hfm_sigma=sigma)
        for seed in seeds:
            row = run_variant(dataclasses.replace(base, model=model), "full", seed, train, ev)
            row["sigma"] = sigma
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows
