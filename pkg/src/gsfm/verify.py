"""Self-check suite: transform oracles, gradient checks, loss, memory and metric identities."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fft
from . import tensor as T
from .boundary import (FusionBlock, bce_with_logits, bootstrapped_ce, boundary_loss, dice_loss,
                       pixel_cross_entropy)
from .config import GsfmConfig
from .memory import affinity, memorize, MemoryBank, memory_read, readout, topk_normalize
from .metrics import contour_f, evaluate, jaccard
from .model import GSFM
from .spectral import SpectralFilterModule, build_coefficient_map, dft2_packed, idft2_packed
from .tensor import Tensor


@dataclass
class Check:
    group: str
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tol


def _circular_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, w = a.shape
    out = np.zeros_like(a)
    for i in range(h):
        for j in range(w):
            out += a[i, j] * np.roll(np.roll(b, i, axis=0), j, axis=1)
    return out


def fft_checks(rng) -> list[Check]:
    sizes = [1, 2, 4, 8, 16, 32, 64]
    err_fwd = err_rt = err_1d = 0.0
    for n in sizes:
        for m in sizes:
            x = rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m))
            err_fwd = max(err_fwd, np.abs(fft.fft2(x) - fft.naive_dft2(x)).max())
            err_rt = max(err_rt, np.abs(fft.ifft2(fft.fft2(x)) - x).max())
        v = rng.normal(size=n) + 1j * rng.normal(size=n)
        err_1d = max(err_1d, np.abs(fft.fft_radix2(v) - fft.dft_naive(v)).max())
    a, b = rng.normal(size=(2, 8, 8))
    conv = fft.ifft2(fft.fft2(a) * fft.fft2(b)).real
    x = rng.normal(size=(16, 32))
    parseval = abs((np.abs(x) ** 2).sum() - (np.abs(fft.fft2(x)) ** 2).sum() / x.size)
    return [
        Check("fft", "radix-2 1-D vs naive DFT, n<=64", err_1d, 1e-6),
        Check("fft", "2-D FFT vs naive DFT, all pow2 sizes <=64", err_fwd, 1e-6),
        Check("fft", "IFFT(FFT(x)) round trip", err_rt, 1e-6),
        Check("fft", "convolution theorem vs brute-force circular conv", np.abs(conv - _circular_conv(a, b)).max(), 1e-5),
        Check("fft", "Parseval", parseval / max(1.0, (x ** 2).sum()), 1e-5),
    ]


def coefficient_checks() -> list[Check]:
    low = build_coefficient_map("low", 7.0, 64, 64).data[0]
    high = build_coefficient_map("high", 7.0, 64, 64).data[0]
    return [
        Check("spectral", "low map centre == 0", abs(low[32, 32]), 1e-300),
        Check("spectral", "low + high == 1 (max |diff|)", np.abs(low + high - 1.0).max(), 1e-300),
        Check("spectral", "low at distance sigma == 1 - exp(-1/2)", abs(low[32, 39] - (1 - math.exp(-0.5))), 1e-9),
    ]


def _scalar(t: Tensor, rng) -> Tensor:
    # random projection to a scalar so every output coordinate matters
    w = rng.normal(size=t.shape)
    return T.tsum(t * w)


def grad_checks(rng, include_model: bool = True) -> list[Check]:
    r = lambda *s: rng.normal(size=s)
    checks: list[tuple[str, Callable, np.ndarray, float]] = []
    k3 = Tensor(r(3, 2, 3, 3), requires_grad=True)
    b3 = Tensor(r(3), requires_grad=True)
    y2 = r(2, 5)
    checks += [
        ("add/sub/mul/div", lambda x: _scalar((x * y2 + x / (np.abs(y2) + 1.0) - x) * x, rng_fixed(1)), r(2, 5), 1e-3),
        ("exp/log/sigmoid", lambda x: _scalar(T.log(T.exp(x) + 1.0) + T.sigmoid(x), rng_fixed(2)), r(3, 4), 1e-3),
        ("relu", lambda x: _scalar(T.relu(x), rng_fixed(3)), r(3, 4) + 0.05 * np.sign(r(3, 4)), 1e-3),
        ("matmul/reshape/transpose", lambda x: _scalar(T.matmul(x, T.transpose(x, None)) + T.matmul(x, x.reshape((4, 3))), rng_fixed(4)), r(3, 4), 1e-3),
        ("softmax", lambda x: _scalar(T.softmax(x, axis=-1), rng_fixed(5)), r(3, 6), 1e-3),
        ("log_softmax", lambda x: _scalar(T.log_softmax(x, axis=0), rng_fixed(6)), r(3, 6), 1e-3),
        ("conv2d 3x3 zero pad", lambda x: _scalar(T.conv2d(x, k3, b3), rng_fixed(7)), r(2, 2, 5, 4), 1e-3),
        ("conv2d 3x3 replicate pad", lambda x: _scalar(T.conv2d(x, k3, None, "replicate"), rng_fixed(8)), r(2, 5, 4), 1e-3),
        ("conv2d kernel", lambda k: _scalar(T.conv2d(Tensor(rng_fixed(9).normal(size=(2, 5, 5))), k), rng_fixed(10)), r(3, 2, 3, 3), 1e-3),
        ("avg_pool2x", lambda x: _scalar(T.avg_pool2x(x), rng_fixed(11)), r(2, 4, 6), 1e-3),
        ("upsample2x bilinear", lambda x: _scalar(T.upsample2x(x), rng_fixed(12)), r(2, 3, 4), 1e-3),
        ("dft2 packed", lambda x: _scalar(dft2_packed(x), rng_fixed(13)), r(2, 4, 8), 1e-3),
        ("idft2 packed", lambda x: _scalar(idft2_packed(x), rng_fixed(14)), r(4, 4, 8), 1e-3),
    ]
    for mode in ("low", "high"):
        mod = SpectralFilterModule(2, mode, 2.0, np.random.default_rng(15))
        checks.append((f"{mode}-frequency module", lambda x, m=mod: _scalar(m(x), rng_fixed(16)), r(2, 8, 8), 1e-3))
    km, vm, kq = r(1, 4, 7), r(1, 3, 7), r(1, 4, 5)
    checks += [
        ("affinity->top-k->readout (query)", lambda q: _scalar(memory_read(q, Tensor(km), Tensor(vm), 3), rng_fixed(17)), kq, 1e-3),
        ("affinity->top-k->readout (memory key)", lambda k: _scalar(memory_read(Tensor(kq), k, Tensor(vm), 3), rng_fixed(18)), km, 1e-3),
        ("dice", lambda x: dice_loss(T.sigmoid(x), (rng_fixed(19).random((4, 5)) > 0.5).astype(float)), r(4, 5), 1e-3),
        ("bce with logits", lambda x: bce_with_logits(x, (rng_fixed(20).random((4, 5)) > 0.5).astype(float)), 3 * r(4, 5), 1e-3),
        ("boundary loss", lambda x: boundary_loss(x, (rng_fixed(21).random((2, 1, 4, 5)) > 0.5).astype(float)), r(2, 1, 4, 5), 1e-3),
        ("pixel CE", lambda x: T.mean(pixel_cross_entropy(x, rng_fixed(22).integers(0, 2, (3, 4)))), r(2, 3, 4), 1e-3),
        ("bootstrapped CE keep=0.3", lambda x: bootstrapped_ce(x, rng_fixed(23).integers(0, 2, (2, 6, 6)), 0.3), r(2, 2, 6, 6), 1e-3),
    ]
    fb = FusionBlock(3, np.random.default_rng(24))
    dst = r(3, 4, 4)
    checks.append(("fusion block", lambda x: _scalar(fb(x, Tensor(dst)), rng_fixed(25)), r(3, 4, 4), 1e-3))
    out = [Check("grad", name, T.grad_check(f, x, h=1e-5), tol) for name, f, x, tol in checks]
    if include_model:
        out.append(Check("grad", "full tiny model (frame + sampled params)", full_model_grad_error(), 5e-3))
    return out


def rng_fixed(seed: int) -> np.random.Generator:
    return np.random.default_rng(1000 + seed)


def tiny_config() -> GsfmConfig:
    return GsfmConfig(input_size=(8, 8), key_channels=4, value_channels=4, base_channels=4,
                      lfm_sigma=1.0, hfm_sigma=2.0)


def tiny_model_loss(model: GSFM, frames: Tensor, mask0: np.ndarray, labels: np.ndarray, boundary: np.ndarray) -> Tensor:
    kf0 = model.encode_key(frames[0])
    bank = MemoryBank()
    memorize(bank, 0, kf0.key, model.encode_value(frames[0], Tensor(mask0), kf0), 1)
    out = model.segment_frame(frames[1], bank)
    return bootstrapped_ce(out.mask_logits, labels) + boundary_loss(out.boundary_logits, boundary) * 0.05


def full_model_grad_error(seed: int = 0, per_param: int = 3, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    model = GSFM(tiny_config(), seed=seed, dtype=np.float64)
    # zero-initialised biases put ReLU inputs exactly on the kink; move them off it
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
    frames = rng.random((2, 3, 8, 8))
    mask0 = (rng.random((1, 8, 8)) > 0.5).astype(float)
    labels = (rng.random((8, 8)) > 0.5).astype(np.intp)
    boundary = (rng.random((1, 8, 8)) > 0.7).astype(float)
    loss = lambda fr: tiny_model_loss(model, fr, mask0, labels, boundary)
    worst = T.grad_check(loss, frames, h=h)
    # sampled parameter coordinates
    frames_t = Tensor(frames)
    model.zero_grad()
    loss(frames_t).backward()
    for _, p in model.named_parameters():
        flat = p.data.reshape(-1)
        grads = p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            orig = flat[i]
            with T.no_grad():
                flat[i] = orig + h
                fp = loss(frames_t).item()
                flat[i] = orig - h
                fm = loss(frames_t).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(grads[i] - num) / max(1.0, abs(grads[i])))
    return worst


def loss_checks() -> list[Check]:
    ones = Tensor(np.ones(6))
    perfect = dice_loss(ones, np.ones(6), eps=0.0).item()
    disjoint = dice_loss(Tensor(np.array([1.0, 0.0])), np.array([0.0, 1.0]), eps=0.0).item()
    third = dice_loss(Tensor(np.array([1.0, 0.0])), np.array([1.0, 1.0]), eps=0.0).item()
    rng = rng_fixed(30)
    logits = Tensor(rng.normal(size=(2, 2, 5, 5)))
    labels = rng.integers(0, 2, (2, 5, 5))
    boot = bootstrapped_ce(logits, labels, 1.0).item()
    plain = T.mean(pixel_cross_entropy(logits, labels)).item()
    return [
        Check("loss", "dice at perfect prediction (eps=0) == 0", abs(perfect), 1e-15),
        Check("loss", "dice at disjoint == 1", abs(disjoint - 1.0), 1e-15),
        Check("loss", "dice p=[1,0], q=[1,1] == 1/3", abs(third - 1.0 / 3.0), 1e-15),
        Check("loss", "bootstrapped CE keep=1 == mean CE", abs(boot - plain), 1e-7),
    ]


def memory_checks() -> list[Check]:
    rng = rng_fixed(40)
    a = Tensor(rng.normal(size=(4, 6)))
    full = T.softmax(a, axis=-1).data
    kq, km = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 1)))
    v = rng.normal(size=(4, 1))
    single = memory_read(kq, km, Tensor(v), 50).data
    bank = MemoryBank()
    for f in range(8):
        memorize(bank, f, Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))), 3, flatten=False)
    sched = 0.0 if bank.frame_indices == [0, 3, 6] else 1.0
    return [
        Check("memory", "top-k with k >= N == softmax", np.abs(topk_normalize(a, 6).data - full).max(), 1e-6),
        Check("memory", "top-k with k > N == softmax", np.abs(topk_normalize(a, 60).data - full).max(), 1e-6),
        Check("memory", "single-entry readout returns stored value", np.abs(single - v).max(), 1e-15),
        Check("memory", "schedule for 8 frames, r=3 is {0,3,6}", sched, 0.5),
    ]


def metric_checks() -> list[Check]:
    m = np.zeros((10, 10), bool)
    m[2:6, 3:8] = True
    other = np.zeros_like(m)
    other[7:9, 0:2] = True
    # two-frame toy: frame 0 is ignored, frame 1 scored
    gt = np.zeros((2, 6, 6), np.uint8)
    gt[:, 1:4, 1:4] = 1
    pred = gt.copy()
    pred[1, 1:4, 3] = 0                     # drop one column: 6/9 overlap
    rep = evaluate({"s": pred}, {"s": gt}, tolerance_px=1)
    j_manual = 6 / 9
    f_manual = contour_f(pred[1], gt[1], 1)
    mono = all(contour_f(m, np.roll(m, 2, axis=1), t) <= contour_f(m, np.roll(m, 2, axis=1), t + 1) + 1e-15
               for t in range(4))
    return [
        Check("metrics", "identical masks J == 1", abs(jaccard(m, m) - 1), 1e-15),
        Check("metrics", "identical masks F == 1", abs(contour_f(m, m) - 1), 1e-15),
        Check("metrics", "disjoint masks J == 0", jaccard(m, other), 1e-15),
        Check("metrics", "disjoint masks F == 0", contour_f(m, other, 1), 1e-15),
        Check("metrics", "2-frame toy J", abs(rep.global_["J"] - j_manual), 1e-9),
        Check("metrics", "2-frame toy JF", abs(rep.global_["JF"] - (j_manual + f_manual) / 2), 1e-9),
        Check("metrics", "F monotone in tolerance", 0.0 if mono else 1.0, 0.5),
    ]


def run_all(include_model: bool = True, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    return (fft_checks(rng) + coefficient_checks() + grad_checks(rng, include_model)
            + loss_checks() + memory_checks() + metric_checks())


def format_table(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'group':<9} {'check':<{width}} {'max error':>11} {'tol':>9}  result"]
    for c in checks:
        lines.append(f"{c.group:<9} {c.name:<{width}} {c.error:>11.3e} {c.tol:>9.1e}  {'PASS' if c.passed else 'FAIL'}")
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    return "\n".join(lines)
