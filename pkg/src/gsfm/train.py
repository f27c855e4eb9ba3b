"""Three-frame training step, two-stage trainer, checkpoints and evaluation."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .boundary import boundary_loss, bootstrapped_ce, keep_fraction_schedule, laplacian_boundary
from .config import RunConfig
from .data import VideoSample, max_gap_schedule, pseudo_video_from_image, sample_triplet
from .memory import MemoryBank
from .metrics import MetricsReport, evaluate
from .model import GSFM, KeyFeatures, merge_objects, propagate
from .nn import SGD, Adam
from .tensor import Tensor

FULL_SOFTMAX = 1 << 30  # any k >= N is a plain softmax


@dataclass
class Batch:
    frames: np.ndarray      # [B, 3, 3, H, W]
    masks: np.ndarray       # [B, 3, 1, H, W] binary, one object per sample
    boundary: np.ndarray    # [B, 3, 1, H, W]
    source: list[str]

    @classmethod
    def from_clips(cls, frames: np.ndarray, masks: np.ndarray, source: list[str] | None = None) -> "Batch":
        masks = np.asarray(masks, dtype=np.float32)
        return cls(np.asarray(frames, dtype=np.float32), masks,
                   laplacian_boundary(masks).astype(np.float32), source or [])


def _frame_features(kf: KeyFeatures, i: int) -> KeyFeatures:
    pick = lambda t: T.getitem(t, (slice(None), i))
    return KeyFeatures(pick(kf.key), pick(kf.feat), [pick(s) for s in kf.skips])


def _flat(t: Tensor) -> Tensor:
    return t.reshape(t.shape[:-2] + (t.shape[-2] * t.shape[-1],))


def forward_losses(model: GSFM, batch: Batch, keep_fraction: float = 1.0, top_k: int | None = None,
                   boundary_weight: float | None = None) -> dict[str, Tensor]:
    """Frame 1 is read from memory {0}; frame 2 from {0, 1 with its predicted mask}."""
    dt = model.dtype
    w_b = model.cfg.boundary_loss_weight if boundary_weight is None else boundary_weight
    k = FULL_SOFTMAX if top_k is None else top_k
    frames = Tensor(batch.frames.astype(dt))
    kf_all = model.encode_key(frames)                       # leading [B, 3]
    kfs = [_frame_features(kf_all, i) for i in range(3)]
    bank = MemoryBank()
    v0 = model.encode_value(T.getitem(frames, (slice(None), 0)), batch.masks[:, 0].astype(dt), kfs[0])
    bank.add(0, _flat(kfs[0].key), _flat(v0))
    ce_terms, b_terms = [], []
    for i in (1, 2):
        out = model.decoder(model.read(kfs[i], bank, k), kfs[i])
        labels = batch.masks[:, i, 0].astype(np.intp)
        ce_terms.append(bootstrapped_ce(out.mask_logits, labels, keep_fraction))
        if out.boundary_logits is not None:
            b_terms.append(boundary_loss(out.boundary_logits, batch.boundary[:, i]))
        if i == 1:
            v1 = model.encode_value(T.getitem(frames, (slice(None), 1)), out.object_prob(), kfs[1])
            bank.add(1, _flat(kfs[1].key), _flat(v1))
    ce = (ce_terms[0] + ce_terms[1]) * 0.5
    losses = {"ce": ce}
    total = ce
    if b_terms:
        bl = (b_terms[0] + b_terms[1]) * 0.5
        losses["boundary"] = bl
        total = total + bl * w_b
    losses["total"] = total
    return losses


def make_optimizer(model: GSFM, name: str, lr: float):
    params = dict(model.named_parameters())
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


class NaNLossError(FloatingPointError):
    def __init__(self, step: int, dump: Path | None):
        super().__init__(f"non-finite loss at step {step}" + (f"; batch dumped to {dump}" if dump else ""))
        self.step = step
        self.dump = dump


def train_step(model: GSFM, optimizer, batch: Batch, keep_fraction: float = 1.0, lr: float | None = None,
               top_k: int | None = None, boundary_weight: float | None = None) -> dict[str, float]:
    """One update; returns float losses. Raises ``FloatingPointError`` before updating on a non-finite loss."""
    optimizer.zero_grad()
    losses = forward_losses(model, batch, keep_fraction, top_k, boundary_weight)
    values = {k: v.item() for k, v in losses.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise FloatingPointError(f"non-finite loss {values}")
    T.backward(losses["total"])
    optimizer.step(lr)
    return values


def _pick_object(sample: VideoSample, idx: tuple[int, ...], rng) -> np.ndarray:
    present = [o for o in range(sample.masks.shape[1]) if sample.masks[idx[0], o].any()]
    o = present[int(rng.integers(len(present)))] if present else 0
    return sample.masks[list(idx), o][:, None]


def calibrate_keys(model: GSFM, samples: list[VideoSample], target_std: float, count: int = 8) -> float:
    """Scale the key projection so first-frame keys of ``samples`` have std ``target_std``.

    The affinity has no temperature, so key magnitude sets how peaked the read
    is. Near-zero keys give a uniform read whose gradient also vanishes.
    Returns the applied gain.
    """
    frames = np.stack([s.frames[0] for s in samples[:count]]).astype(model.dtype)
    proj = model.key_encoder.key_proj
    with T.no_grad():
        std = float(model.encode_key(frames).key.data.std())
    gain = target_std / max(std, 1e-8)
    proj.weight.data *= model.dtype.type(gain)
    if proj.bias is not None:
        proj.bias.data *= model.dtype.type(gain)
    return gain


class Trainer:
    """Pseudo-video warmup followed by main training on sequences.

    All randomness comes from one generator seeded by ``cfg.seed``; its state is
    saved in checkpoints, so resuming reproduces the uninterrupted run exactly.
    """

    def __init__(self, cfg: RunConfig, train_set: list[VideoSample], out_dir: str | Path | None = None,
                 dtype=np.float32, log=None):
        if not train_set:
            raise ValueError("empty training set")
        self.cfg = cfg
        self.train_set = train_set
        self.model = GSFM(cfg.model, seed=cfg.seed, dtype=dtype)
        self.optimizer = make_optimizer(self.model, cfg.train.optimizer, cfg.train.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        if cfg.train.key_init_std is not None:
            calibrate_keys(self.model, train_set, cfg.train.key_init_std)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.history: list[dict] = []
        self.log = log

    @property
    def total_steps(self) -> int:
        return self.cfg.train.pretrain_steps + self.cfg.train.main_steps

    def stage(self, step: int) -> str:
        return "pretrain" if step < self.cfg.train.pretrain_steps else "main"

    def lr_at(self, step: int) -> float:
        tc = self.cfg.train
        return tc.lr * (0.5 if step >= tc.lr_decay_at * self.total_steps else 1.0)

    def keep_at(self, step: int) -> float:
        tc = self.cfg.train
        return keep_fraction_schedule(step, self.total_steps, tc.bootstrap_final, tc.bootstrap_anneal)

    def gap_at(self, step: int) -> int:
        main = self.cfg.train.main_steps
        return max_gap_schedule((step - self.cfg.train.pretrain_steps) / max(main, 1))

    def sample_batch(self, step: int) -> Batch:
        rng = self.rng
        frames, masks, src = [], [], []
        for _ in range(self.cfg.train.batch_size):
            s = self.train_set[int(rng.integers(len(self.train_set)))]
            if self.stage(step) == "pretrain":
                t = int(rng.integers(len(s)))
                m = _pick_object(s, (t,), rng)[0]
                clip = pseudo_video_from_image(s.frames[t], m, n=3, rng=rng)
                frames.append(clip.frames)
                masks.append(clip.masks)
                src.append(f"{s.name}@{t}")
            else:
                idx = sample_triplet(len(s), self.gap_at(step), rng)
                frames.append(s.frames[list(idx)])
                masks.append(_pick_object(s, idx, rng))
                src.append(f"{s.name}@{idx}")
        return Batch.from_clips(np.stack(frames), np.stack(masks), src)

    def train(self, steps: int | None = None) -> list[dict]:
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        tc = self.cfg.train
        while self.step < end:
            t0 = time.perf_counter()
            batch = self.sample_batch(self.step)
            try:
                vals = train_step(self.model, self.optimizer, batch, self.keep_at(self.step),
                                  self.lr_at(self.step), tc.train_top_k)
            except FloatingPointError:
                raise NaNLossError(self.step, self._dump(batch)) from None
            row = {"step": self.step, "stage": self.stage(self.step), "lr": self.lr_at(self.step),
                   "keep": self.keep_at(self.step), "loss": vals["total"], "ce": vals["ce"],
                   "boundary": vals.get("boundary", 0.0), "seconds": time.perf_counter() - t0}
            self.history.append(row)
            if self.log is not None and self.step % max(tc.log_every, 1) == 0:
                self.log(row)
            self.step += 1
            if self.out_dir is not None and tc.checkpoint_every and self.step % tc.checkpoint_every == 0:
                self.save_checkpoint(self.out_dir / "checkpoints" / f"step_{self.step:06d}")
        return self.history

    def _dump(self, batch: Batch) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"nan_batch_step{self.step}.npz"
        np.savez(path, frames=batch.frames, masks=batch.masks, source=np.array(batch.source))
        return path

    def write_log(self, path: str | Path) -> None:
        if not self.history:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.history[0]))
            w.writeheader()
            w.writerows(self.history)

    # -- checkpoints -------------------------------------------------------
    def save_checkpoint(self, directory: str | Path) -> Path:
        d = Path(directory)
        (d / "params").mkdir(parents=True, exist_ok=True)
        (d / "optim").mkdir(parents=True, exist_ok=True)
        for name, p in self.model.named_parameters():
            T.save_tensor(d / "params" / name, p)
        st = self.optimizer.state()
        for name in self.optimizer.params:
            T.save_tensor(d / "optim" / f"m.{name}", st["m"][name])
            if name in st["v"]:
                T.save_tensor(d / "optim" / f"v.{name}", st["v"][name])
        state = {"step": self.step, "optimizer_t": st["t"], "rng": self.rng.bit_generator.state,
                 "dtype": str(self.model.dtype)}
        (d / "state.json").write_text(json.dumps(state, indent=2))
        self.cfg.save(d / "config.json")
        return d

    def load_checkpoint(self, directory: str | Path) -> None:
        d = Path(directory)
        load_params(self.model, d)
        state = json.loads((d / "state.json").read_text())
        names = list(self.optimizer.params)
        m = {n: T.load_tensor(d / "optim" / f"m.{n}").data for n in names}
        v = {n: T.load_tensor(d / "optim" / f"v.{n}").data for n in names if (d / "optim" / f"v.{n}.bin").exists()}
        self.optimizer.load({"t": state["optimizer_t"], "m": m, "v": v})
        self.rng.bit_generator.state = state["rng"]
        self.step = int(state["step"])


def load_params(model: GSFM, checkpoint: str | Path) -> None:
    d = Path(checkpoint) / "params"
    state = {}
    for name, p in model.named_parameters():
        if not (d / f"{name}.bin").exists():
            raise KeyError(f"checkpoint lacks parameter {name}")
        state[name] = T.load_tensor(d / name).data
    model.load_state_dict(state)


def load_model(checkpoint: str | Path, dtype=np.float32) -> tuple[GSFM, RunConfig]:
    cfg = RunConfig.load(Path(checkpoint) / "config.json")
    model = GSFM(cfg.model, seed=cfg.seed, dtype=dtype)
    load_params(model, checkpoint)
    return model, cfg


# -- inference over datasets -----------------------------------------------


def predict_sequences(model: GSFM, samples: list[VideoSample], top_k: int | None = None,
                      batch_size: int = 64) -> dict[str, np.ndarray]:
    """Label-map predictions ``[T, H, W]`` per sequence.

    Sequences with the same length and object count are propagated together.
    """
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((len(s), len(s.object_ids)), []).append(i)
    out: dict[str, np.ndarray] = {}
    for (length, n_obj), idx in groups.items():
        for lo in range(0, len(idx), batch_size):
            chunk = [samples[i] for i in idx[lo:lo + batch_size]]
            first = np.stack([s.labels()[0] for s in chunk])
            if n_obj == 0 or length == 1:
                for s in chunk:
                    lab = np.zeros_like(s.labels())
                    lab[0] = s.labels()[0]
                    out[s.name] = lab
                continue
            masks = np.stack([s.masks[0] for s in chunk])
            probs, _ = propagate(model, np.stack([s.frames for s in chunk]), masks, top_k)
            for b, s in enumerate(chunk):
                merged = merge_objects(probs[b])
                lut = np.array([0] + list(s.object_ids), dtype=np.uint8)
                lab = lut[merged]
                lab[0] = first[b]
                out[s.name] = lab
    return out


def evaluate_model(model: GSFM, samples: list[VideoSample], top_k: int | None = None) -> MetricsReport:
    preds = predict_sequences(model, samples, top_k)
    gts = {s.name: s.labels() for s in samples}
    return evaluate(preds, gts, annotated={s.name: s.annotated for s in samples})
