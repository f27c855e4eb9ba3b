"""Toy-scale memory network with frequency modules and a two-branch decoder.

Layout (stride 4 at 64x64 by default):

    key encoder    3 conv stages (avg-pool between) -> LFM -> 1x1 key projection
    value encoder  conv stages over frame||mask -> LFM -> concat key features
                   -> 1x1 -> 2 residual blocks -> channel gate
    memory read    affinity -> top-k softmax -> weighted value readout
    refine         compress, then one upsample+skip stage per pooling step
    decoder        mask branch and HFM-fed boundary branch, M2B then B2M fusion
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .boundary import FusionBlock
from .config import GsfmConfig
from .memory import MemoryBank, memorize, memory_read, should_memorize
from .nn import Conv2d, Module
from .spectral import SpectralFilterModule
from .tensor import Tensor


def _num_stages(stride: int) -> int:
    return int(np.log2(stride)) + 1


def _spectral(mode: str, channels: int, sigma: float, rng, dtype) -> SpectralFilterModule | None:
    if mode == "off":
        return None
    return SpectralFilterModule(channels, mode, sigma, rng, dtype)


def _lead_to(t: Tensor, lead: tuple[int, ...]) -> Tensor:
    if t.shape[:-3] == lead:
        return t
    return T.broadcast_to(t, lead + t.shape[-3:])


class Backbone(Module):
    def __init__(self, cin: int, widths: Sequence[int], rng, dtype):
        chans = [cin, *widths]
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng, dtype=dtype) for i in range(len(widths))]

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for i, conv in enumerate(self.convs):
            if i:
                x = T.avg_pool2x(x)
            x = T.relu(conv(x))
            feats.append(x)
        return feats


class ResBlock(Module):
    def __init__(self, c: int, rng, dtype):
        self.conv1 = Conv2d(c, c, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(c, c, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        r = self.conv1(T.relu(x))
        r = self.conv2(T.relu(r))
        return x + r


class ChannelGate(Module):
    """Global average pool -> 2-layer MLP -> sigmoid channel scaling."""

    def __init__(self, c: int, rng, dtype, reduction: int = 4):
        hidden = max(1, c // reduction)
        self.fc1 = Conv2d(c, hidden, 1, rng, dtype=dtype)
        self.fc2 = Conv2d(hidden, c, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        pooled = T.mean(x, axis=(-2, -1), keepdims=True)
        return x * T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))


@dataclass
class KeyFeatures:
    key: Tensor            # [..., C_k, h, w]
    feat: Tensor           # last-stage features after LFM, [..., C_last, h, w]
    skips: list[Tensor]    # shallow features, highest resolution first


@dataclass
class SegmentationOutput:
    mask_logits: Tensor                 # [..., 2, H, W] (background, object)
    boundary_logits: Tensor | None      # [..., 1, H, W]

    def object_prob(self) -> Tensor:
        return T.softmax(self.mask_logits, axis=-3)[..., 1:2, :, :]


class KeyEncoder(Module):
    def __init__(self, cfg: GsfmConfig, rng, dtype):
        widths = [cfg.base_channels * 2 ** i for i in range(_num_stages(cfg.encoder_stride))]
        self.backbone = Backbone(3, widths, rng, dtype)
        self.lfm = _spectral(cfg.lfm_mode, widths[-1], cfg.lfm_sigma, rng, dtype)
        self.key_proj = Conv2d(widths[-1], cfg.key_channels, 1, rng, dtype=dtype)

    def __call__(self, frame: Tensor) -> KeyFeatures:
        feats = self.backbone(frame)
        last = feats[-1]
        if self.lfm is not None:
            last = self.lfm(last)
        return KeyFeatures(self.key_proj(last), last, feats[:-1])


class ValueEncoder(Module):
    def __init__(self, cfg: GsfmConfig, rng, dtype, shared_lfm: SpectralFilterModule | None = None):
        widths = [cfg.base_channels * 2 ** i for i in range(_num_stages(cfg.encoder_stride))]
        self.backbone = Backbone(4, widths, rng, dtype)
        if cfg.share_lfm_weights:
            self.lfm = shared_lfm
        else:
            self.lfm = _spectral(cfg.lfm_mode, widths[-1], cfg.lfm_sigma, rng, dtype)
        self.fuse = Conv2d(2 * widths[-1], cfg.value_channels, 1, rng, dtype=dtype)
        self.res1 = ResBlock(cfg.value_channels, rng, dtype)
        self.res2 = ResBlock(cfg.value_channels, rng, dtype)
        self.gate = ChannelGate(cfg.value_channels, rng, dtype)

    def __call__(self, frame: Tensor, mask: Tensor, key_feat: Tensor) -> Tensor:
        if frame.shape[:-3] != mask.shape[:-3]:
            lead = np.broadcast_shapes(frame.shape[:-3], mask.shape[:-3])
            frame, mask = _lead_to(frame, lead), _lead_to(mask, lead)
        if frame.shape[-2:] != mask.shape[-2:]:
            raise ValueError(f"mask {mask.shape} not aligned with frame {frame.shape}")
        x = self.backbone(T.concat([frame, mask], axis=-3))[-1]
        if self.lfm is not None:
            x = self.lfm(x)
        x = T.concat([x, _lead_to(key_feat, x.shape[:-3])], axis=-3)
        x = self.fuse(x)
        x = self.res2(self.res1(x))
        return self.gate(x)


class UpStage(Module):
    def __init__(self, cin: int, cskip: int, cout: int, rng, dtype):
        self.reduce = Conv2d(cin, cout, 1, rng, dtype=dtype)
        self.skip = Conv2d(cskip, cout, 1, rng, dtype=dtype)
        self.refine = Conv2d(cout, cout, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        y = T.upsample2x(self.reduce(x)) + self.skip(_lead_to(skip, x.shape[:-3]))
        return T.relu(self.refine(T.relu(y))) + y


class Decoder(Module):
    def __init__(self, cfg: GsfmConfig, rng, dtype):
        n = _num_stages(cfg.encoder_stride)
        widths = [cfg.base_channels * 2 ** i for i in range(n)]
        self.compress = Conv2d(cfg.value_channels + widths[-1], widths[-1], 3, rng, dtype=dtype)
        self.ups = [UpStage(widths[i + 1], widths[i], widths[i], rng, dtype) for i in reversed(range(n - 1))]
        c = widths[0]
        self.hfm = _spectral(cfg.hfm_mode, c, cfg.hfm_sigma, rng, dtype)
        self.mask_conv = Conv2d(c, c, 3, rng, dtype=dtype)
        self.mask_head = Conv2d(c, 2, 3, rng, dtype=dtype)
        self.boundary_branch = cfg.boundary_branch
        if cfg.boundary_branch:
            self.boundary_conv = Conv2d(c, c, 3, rng, dtype=dtype)
            self.m2b = FusionBlock(c, rng, dtype)
            self.b2m = FusionBlock(c, rng, dtype)
            self.boundary_head = Conv2d(c, 1, 3, rng, dtype=dtype)

    def __call__(self, readout: Tensor, kf: KeyFeatures) -> SegmentationOutput:
        lead = readout.shape[:-3]
        x = T.concat([readout, _lead_to(kf.feat, lead)], axis=-3)
        x = T.relu(self.compress(x))
        for stage, skip in zip(self.ups, reversed(kf.skips)):
            x = stage(x, skip)
        if not self.boundary_branch:
            # without a boundary branch the high-pass module feeds the mask branch
            if self.hfm is not None:
                x = self.hfm(x)
            f_m = T.relu(self.mask_conv(x))
            return SegmentationOutput(self.mask_head(f_m), None)
        f_m = T.relu(self.mask_conv(x))
        b_in = self.hfm(x) if self.hfm is not None else x
        f_b = T.relu(self.boundary_conv(b_in))
        f_b = self.m2b(f_m, f_b)
        f_m = self.b2m(f_b, f_m)
        return SegmentationOutput(self.mask_head(f_m), self.boundary_head(f_b))


class GSFM(Module):
    def __init__(self, cfg: GsfmConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.key_encoder = KeyEncoder(cfg, rng, dtype)
        self.value_encoder = ValueEncoder(cfg, rng, dtype, shared_lfm=self.key_encoder.lfm)
        self.decoder = Decoder(cfg, rng, dtype)

    # -- building blocks --------------------------------------------------
    def _check_frame(self, frame: Tensor) -> None:
        s = self.cfg.encoder_stride
        h, w = frame.shape[-2:]
        if frame.shape[-3] != 3:
            raise ValueError(f"frame must have 3 channels, got {frame.shape}")
        if h % s or w % s:
            raise ValueError(f"frame size {(h, w)} not divisible by stride {s}")

    def encode_key(self, frame) -> KeyFeatures:
        frame = T.as_tensor(frame) if isinstance(frame, Tensor) else Tensor(np.asarray(frame, dtype=self.dtype))
        self._check_frame(frame)
        return self.key_encoder(frame)

    def encode_value(self, frame, mask, key_feat: Tensor | KeyFeatures) -> Tensor:
        frame = frame if isinstance(frame, Tensor) else Tensor(np.asarray(frame, dtype=self.dtype))
        mask = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=self.dtype))
        if isinstance(key_feat, KeyFeatures):
            key_feat = key_feat.feat
        return self.value_encoder(frame, mask, key_feat)

    def read(self, kf: KeyFeatures, bank: MemoryBank, top_k: int | None = None) -> Tensor:
        if len(bank) == 0:
            raise ValueError("cannot segment with an empty memory bank")
        k = self.cfg.top_k if top_k is None else top_k
        kq = kf.key
        h, w = kq.shape[-2:]
        kq = kq.reshape(kq.shape[:-2] + (h * w,))
        vm = bank.values
        out = memory_read(kq, bank.keys, vm, k)
        return out.reshape(out.shape[:-1] + (h, w))

    def segment_frame(self, frame, bank: MemoryBank, top_k: int | None = None) -> SegmentationOutput:
        kf = frame if isinstance(frame, KeyFeatures) else self.encode_key(frame)
        return self.decoder(self.read(kf, bank, top_k), kf)

    # -- parameter groups (used by the grad-flow audit) --------------------
    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {}
        for name, p in self.named_parameters():
            parts = name.split(".")
            groups.setdefault(".".join(parts[:2]), []).append(p)
        return groups


def propagate(model: GSFM, frames: np.ndarray, first_masks: np.ndarray, top_k: int | None = None,
              every_r: int | None = None) -> tuple[np.ndarray, list[int]]:
    """Run memory propagation without gradients.

    ``frames`` is ``[B, T, 3, H, W]`` and ``first_masks`` ``[B, O, H, W]`` (one
    binary mask per object). Returns per-object probabilities ``[B, O, T, H, W]``
    (frame 0 is the given mask) and the memorized frame indices.
    """
    frames = np.asarray(frames, dtype=model.dtype)
    first = np.asarray(first_masks, dtype=model.dtype)
    b, t = frames.shape[:2]
    o = first.shape[1]
    every_r = model.cfg.memorize_every if every_r is None else every_r
    probs = np.zeros((b, o, t) + frames.shape[-2:], dtype=model.dtype)
    probs[:, :, 0] = first
    bank = MemoryBank()
    with T.no_grad():
        for ti in range(t):
            frame = Tensor(frames[:, ti][:, None])           # [B, 1, 3, H, W]
            kf = model.encode_key(frame)
            if ti > 0:
                out = model.segment_frame(kf, bank, top_k)
                probs[:, :, ti] = out.object_prob().data[:, :, 0]
            if should_memorize(ti, every_r):
                mask = Tensor(probs[:, :, ti][:, :, None])   # [B, O, 1, H, W]
                value = model.encode_value(frame, mask, kf)
                memorize(bank, ti, kf.key, value, every_r)
    return probs, list(bank.frame_indices)


def merge_objects(probs: np.ndarray) -> np.ndarray:
    """Per-object probabilities ``[O, ..., H, W]`` -> label map (0 = background).

    Background probability is ``1 - max_o p_o``; labels come from the argmax.
    """
    probs = np.asarray(probs)
    if probs.shape[0] == 0:
        return np.zeros(probs.shape[1:], dtype=np.uint8)
    bg = 1.0 - probs.max(axis=0, keepdims=True)
    return np.argmax(np.concatenate([bg, probs], axis=0), axis=0).astype(np.uint8)


def segment_video(model: GSFM, frames: np.ndarray, first_mask: np.ndarray, top_k: int | None = None) -> np.ndarray:
    """Segment a ``[T, 3, H, W]`` clip from a first-frame label map ``[H, W]``.

    Each object is propagated independently and the results merged with
    :func:`merge_objects`. Returns a ``[T, H, W]`` label map; frame 0 is the
    given annotation.
    """
    frames = np.asarray(frames)
    first_mask = np.asarray(first_mask)
    ids = [int(i) for i in np.unique(first_mask) if i != 0]
    out = np.zeros((frames.shape[0],) + first_mask.shape, dtype=np.uint8)
    out[0] = first_mask
    if frames.shape[0] == 1 or not ids:
        return out
    masks = np.stack([(first_mask == i) for i in ids])[None].astype(model.dtype)
    probs, _ = propagate(model, frames[None], masks, top_k)
    merged = merge_objects(probs[0])                  # [T, H, W] in 0..O
    lut = np.array([0] + ids, dtype=np.uint8)
    out[1:] = lut[merged[1:]]
    return out
