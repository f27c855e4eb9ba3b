"""Synthetic moving-shape videos, pseudo-video augmentation and DAVIS-layout IO."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .boundary import laplacian_boundary
from .config import SynthConfig


@dataclass
class VideoSample:
    """A clip with one binary mask per object per frame.

    ``frames`` is ``[T, 3, H, W]`` float in [0, 1]; ``masks`` is ``[T, O, H, W]``
    uint8 in {0, 1}; ``object_ids`` are the palette ids (1..O for synthetic data).
    """

    frames: np.ndarray
    masks: np.ndarray
    object_ids: list[int]
    name: str = ""
    annotated: list[bool] | None = None
    meta: dict = field(default_factory=dict)
    _boundary: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.frames) != len(self.masks):
            raise ValueError("frames and masks differ in length")
        if self.masks.shape[1] != len(self.object_ids):
            raise ValueError("mask object axis does not match object_ids")
        if self.annotated is None:
            self.annotated = [True] * len(self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boundary_gt(self) -> np.ndarray:
        if self._boundary is None:
            self._boundary = laplacian_boundary(self.masks.astype(np.float64)).astype(np.uint8)
        return self._boundary

    def labels(self) -> np.ndarray:
        """``[T, H, W]`` palette-index label maps."""
        out = np.zeros((len(self),) + self.frames.shape[-2:], dtype=np.uint8)
        for o, oid in enumerate(self.object_ids):
            out[self.masks[:, o] > 0] = oid
        return out


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

SHAPES = ("rect", "ellipse", "triangle")


def render_shape(kind: str, y: float, x: float, h: float, w: float, size: int) -> np.ndarray:
    """Rasterize a shape by testing pixel centres. ``(y, x)`` is the top-left corner."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "rect":
        return (yy >= y) & (yy < y + h) & (xx >= x) & (xx < x + w)
    if kind == "ellipse":
        cy, cx = y + h / 2, x + w / 2
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    if kind == "triangle":
        # apex at top centre, base at bottom
        t = (yy - y) / h
        half = t * w / 2
        cx = x + w / 2
        return (t >= 0) & (t < 1) & (np.abs(xx - cx) <= half)
    raise ValueError(f"unknown shape {kind!r}")


def shape_area(kind: str, h: float, w: float) -> float:
    return {"rect": h * w, "ellipse": np.pi * h * w / 4, "triangle": h * w / 2}[kind]


@dataclass
class _Track:
    kind: str
    y: float
    x: float
    h: int
    w: int
    vy: float
    vx: float
    color: np.ndarray


def _make_track(rng, cfg: SynthConfig, kind: str, color: np.ndarray) -> _Track:
    h = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
    w = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
    y = float(rng.integers(0, cfg.size - h + 1))
    x = float(rng.integers(0, cfg.size - w + 1))
    speed = cfg.max_speed
    vy, vx = (float(v) for v in rng.uniform(-speed, speed, size=2))
    return _Track(kind, y, x, h, w, vy, vx, color)


def _step(tr: _Track, rng, cfg: SynthConfig) -> None:
    if cfg.jitter > 0:
        tr.vy += float(rng.uniform(-cfg.jitter, cfg.jitter))
        tr.vx += float(rng.uniform(-cfg.jitter, cfg.jitter))
        tr.vy = float(np.clip(tr.vy, -cfg.max_speed, cfg.max_speed))
        tr.vx = float(np.clip(tr.vx, -cfg.max_speed, cfg.max_speed))
    tr.y += tr.vy
    tr.x += tr.vx
    if tr.y < 0 or tr.y > cfg.size - tr.h:
        tr.vy = -tr.vy
        tr.y = float(np.clip(tr.y, 0, cfg.size - tr.h))
    if tr.x < 0 or tr.x > cfg.size - tr.w:
        tr.vx = -tr.vx
        tr.x = float(np.clip(tr.x, 0, cfg.size - tr.w))


def _background(rng, size: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def generate_sequence(cfg: SynthConfig, length: int | None = None, name: str = "") -> VideoSample:
    """Deterministic clip of moving target shapes plus same-coloured distractors.

    Targets are objects ``1..num_shapes``; each distractor copies a target's
    colour (within ``color_jitter`` per channel) but has a different shape and
    is never labelled.
    """
    length = cfg.length if length is None else length
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    size = cfg.size
    bg = _background(rng, size)
    targets, distractors = [], []
    for _ in range(cfg.num_shapes):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        color = rng.uniform(0.0, 1.0, size=3)
        targets.append(_make_track(rng, cfg, kind, color))
    for d in range(cfg.distractor_count):
        ref = targets[d % len(targets)] if targets else None
        others = [s for s in SHAPES if ref is None or s != ref.kind]
        kind = others[int(rng.integers(len(others)))]
        base = ref.color if ref is not None else rng.uniform(0.0, 1.0, size=3)
        color = np.clip(base + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3), 0.0, 1.0)
        distractors.append(_make_track(rng, cfg, kind, color))

    frames = np.zeros((length, 3, size, size))
    masks = np.zeros((length, len(targets), size, size), dtype=np.uint8)
    boxes = []
    for t in range(length):
        if t:
            for tr in targets + distractors:
                _step(tr, rng, cfg)
        boxes.append([(tr.y, tr.x, tr.h, tr.w) for tr in targets])
        img = bg.copy()
        # unoccluded targets are drawn last
        order = (targets + distractors) if cfg.occlusion else (distractors + targets)
        if cfg.occlusion:
            order = [order[i] for i in rng.permutation(len(order))]
        label = np.zeros((size, size), dtype=np.int32)
        for tr in order:
            m = render_shape(tr.kind, tr.y, tr.x, tr.h, tr.w, size)
            img[:, m] = tr.color[:, None]
            label[m] = targets.index(tr) + 1 if tr in targets else 0
        if cfg.noise > 0:
            img = img + rng.normal(0.0, cfg.noise, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)
        for o in range(len(targets)):
            masks[t, o] = label == o + 1
    meta = {"shapes": [tr.kind for tr in targets], "distractors": [tr.kind for tr in distractors],
            "colors": [tr.color.tolist() for tr in targets + distractors], "boxes": boxes}
    return VideoSample(frames.astype(np.float32), masks, list(range(1, len(targets) + 1)), name, meta=meta)


def synth_sequence_config(base: SynthConfig, index: int, split: str) -> SynthConfig:
    """Per-sequence config with a seed derived from the base seed, split and index."""
    ss = np.random.SeedSequence([base.seed, 0 if split == "train" else 1, index])
    return SynthConfig(**{**base.__dict__, "seed": int(ss.generate_state(1)[0])})


# ---------------------------------------------------------------------------
# pseudo videos from static images
# ---------------------------------------------------------------------------


def random_affine(rng, size: tuple[int, int], max_rot: float = 15.0, scale=(0.9, 1.1), max_shift: float = 0.1) -> dict:
    return {
        "angle": float(rng.uniform(-max_rot, max_rot)),
        "scale": float(rng.uniform(*scale)),
        "ty": float(rng.uniform(-max_shift, max_shift) * size[0]),
        "tx": float(rng.uniform(-max_shift, max_shift) * size[1]),
    }


def affine_matrix(params: dict, size: tuple[int, int]) -> np.ndarray:
    """3x3 forward map (output coords = A @ input coords) about the image centre."""
    a = np.deg2rad(params["angle"])
    s = params["scale"]
    c = np.array([(size[0] - 1) / 2, (size[1] - 1) / 2])
    rot = s * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    m = np.eye(3)
    m[:2, :2] = rot
    m[:2, 2] = c - rot @ c + np.array([params["ty"], params["tx"]])
    return m


def warp(arr: np.ndarray, forward: np.ndarray, order: int) -> np.ndarray:
    """Apply the forward map ``forward`` to the last two axes of ``arr``."""
    inv = np.linalg.inv(forward)
    flat = arr.reshape((-1,) + arr.shape[-2:])
    mode = "nearest" if order > 0 else "constant"
    out = np.stack([ndimage.affine_transform(ch, inv[:2, :2], inv[:2, 2], order=order, mode=mode) for ch in flat])
    return out.reshape(arr.shape)


def pseudo_video_from_image(image: np.ndarray, mask: np.ndarray, n: int = 3,
                            rng: np.random.Generator | None = None) -> VideoSample:
    """Expand an image/mask pair into an ``n``-frame clip by random affine jitter.

    Frame 0 is the original pair. The transforms are stored in
    ``sample.meta["transforms"]`` as forward 3x3 matrices.
    """
    rng = np.random.default_rng() if rng is None else rng
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValueError("image and mask are not aligned")
    size = image.shape[-2:]
    frames = [image]
    masks = [mask.astype(np.uint8)]
    mats = [np.eye(3)]
    for _ in range(n - 1):
        m = affine_matrix(random_affine(rng, size), size)
        frames.append(np.clip(warp(image, m, order=1), 0.0, 1.0).astype(np.float32))
        masks.append((warp(mask.astype(np.float64), m, order=0) > 0.5).astype(np.uint8))
        mats.append(m)
    return VideoSample(np.stack(frames), np.stack(masks), list(range(1, mask.shape[0] + 1)),
                       meta={"transforms": [m.tolist() for m in mats]})


# ---------------------------------------------------------------------------
# frame-triplet sampling
# ---------------------------------------------------------------------------


def max_gap_schedule(progress: float, start: int = 1, peak: int = 5, end: int = 2) -> int:
    """Sampling range: grows ``start -> peak`` over the first half, then shrinks to ``end``."""
    p = float(np.clip(progress, 0.0, 1.0))
    if p < 0.5:
        return int(round(start + (peak - start) * p / 0.5))
    return int(round(peak + (end - peak) * (p - 0.5) / 0.5))


def sample_triplet(length: int, max_gap: int, rng: np.random.Generator) -> tuple[int, int, int]:
    """Three strictly increasing frame indices with consecutive gaps in ``[1, max_gap]``."""
    if length < 3:
        raise ValueError("need at least 3 frames")
    max_gap = max(1, min(max_gap, (length - 1) // 2))
    g1, g2 = (int(g) for g in rng.integers(1, max_gap + 1, size=2))
    t0 = int(rng.integers(0, length - g1 - g2))
    return t0, t0 + g1, t0 + g1 + g2


# ---------------------------------------------------------------------------
# DAVIS-layout directories
# ---------------------------------------------------------------------------


def davis_palette() -> list[int]:
    # standard VOC/DAVIS colour map
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal += [r, g, b]
    return pal


def save_palette_png(path: Path, labels: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    img.putpalette(davis_palette())
    img.save(path, format="PNG", optimize=False)


def write_davis_sequence(root: str | Path, sample: VideoSample, jpeg_quality: int = 95) -> None:
    root = Path(root)
    img_dir = root / "JPEGImages" / sample.name
    ann_dir = root / "Annotations" / sample.name
    img_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    labels = sample.labels()
    for t in range(len(sample)):
        rgb = (np.clip(sample.frames[t].transpose(1, 2, 0), 0, 1) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(rgb).save(img_dir / f"{t:05d}.jpg", quality=jpeg_quality, subsampling=0)
        save_palette_png(ann_dir / f"{t:05d}.png", labels[t])


def split_palette_mask(labels: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Label map ``[..., H, W]`` -> (binary masks with objects on axis -3, ids)."""
    ids = [int(i) for i in np.unique(labels) if i != 0]
    if not ids:
        return np.zeros(labels.shape[:-2] + (0,) + labels.shape[-2:], dtype=np.uint8), []
    return np.stack([(labels == i) for i in ids], axis=-3).astype(np.uint8), ids


def _frame_numbers(files: list[Path], seq: str) -> list[int]:
    nums = []
    for f in files:
        if not re.fullmatch(r"\d+", f.stem):
            raise ValueError(f"{seq}: unexpected file name {f.name}")
        nums.append(int(f.stem))
    if nums and nums != list(range(nums[0], nums[0] + len(nums))):
        raise ValueError(f"{seq}: non-contiguous frame numbering")
    return nums


def _resize_frame(arr: np.ndarray, size: tuple[int, int] | None, nearest: bool) -> np.ndarray:
    if size is None or arr.shape[:2] == tuple(size):
        return arr
    h, w = arr.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    img = Image.fromarray(arr[top:top + s, left:left + s])
    img = img.resize((size[1], size[0]), Image.NEAREST if nearest else Image.BILINEAR)
    return np.asarray(img)


def load_davis_dir(path: str | Path, size: tuple[int, int] | None = None,
                   sequences: list[str] | None = None) -> list[VideoSample]:
    """Load ``JPEGImages/<seq>/*.jpg`` + ``Annotations/<seq>/*.png`` sequences.

    Missing annotations after frame 0 are allowed; those frames get empty masks
    and ``annotated[t] = False``. With ``size`` frames are centre-cropped to a
    square and resized.
    """
    root = Path(path)
    img_root = root / "JPEGImages"
    ann_root = root / "Annotations"
    if not img_root.is_dir():
        return []
    names = sorted(p.name for p in img_root.iterdir() if p.is_dir())
    if sequences is not None:
        names = [n for n in names if n in set(sequences)]
    out = []
    for seq in names:
        jpgs = sorted((img_root / seq).glob("*.jpg"))
        if not jpgs:
            continue
        nums = _frame_numbers(jpgs, seq)
        ann_files = {int(p.stem): p for p in (ann_root / seq).glob("*.png")} if (ann_root / seq).is_dir() else {}
        if nums[0] not in ann_files:
            raise ValueError(f"{seq}: missing annotation for the first frame")
        frames, labels, annotated = [], [], []
        for n, jpg in zip(nums, jpgs):
            rgb = _resize_frame(np.asarray(Image.open(jpg).convert("RGB")), size, nearest=False)
            frames.append(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
            if n in ann_files:
                lab = _resize_frame(np.asarray(Image.open(ann_files[n])), size, nearest=True)
                annotated.append(True)
            else:
                lab = np.zeros(rgb.shape[:2], dtype=np.uint8)
                annotated.append(False)
            labels.append(lab)
        labels = np.stack(labels)
        ids = [int(i) for i in np.unique(labels[0]) if i != 0]
        masks = (np.stack([(labels == i) for i in ids], axis=1) if ids
                 else np.zeros((len(frames), 0) + labels.shape[1:])).astype(np.uint8)
        out.append(VideoSample(np.stack(frames), masks, ids, seq, annotated))
    return out


def export_synthetic(root: str | Path, base: SynthConfig, num_train: int, num_eval: int) -> dict:
    """Write a synthetic dataset in DAVIS layout plus ``manifest.json``."""
    root = Path(root)
    manifest = {"format": "davis", "synth": dict(base.__dict__), "train": [], "eval": []}
    for split, count in (("train", num_train), ("eval", num_eval)):
        for i in range(count):
            name = f"{split}_{i:04d}"
            sample = generate_sequence(synth_sequence_config(base, i, split), name=name)
            write_davis_sequence(root, sample)
            manifest[split].append(name)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(root: str | Path) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())
