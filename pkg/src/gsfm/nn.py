"""Parameter containers, layers and optimizers on top of :mod:`gsfm.tensor`."""
from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container (no hooks, no magic)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value._walk(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 padding: str = "zero", bias: bool = True, dtype=np.float64):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.padding = padding

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.padding)


class Identity(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return x


def save_module(module: Module, directory: str | Path, prefix: str = "") -> None:
    directory = Path(directory)
    for name, p in module.named_parameters():
        T.save_tensor(directory / f"{prefix}{name}", p)


def load_module(module: Module, directory: str | Path, prefix: str = "") -> None:
    directory = Path(directory)
    state = {name: T.load_tensor(directory / f"{prefix}{name}").data for name, _ in module.named_parameters()}
    module.load_state_dict(state)


class Adam:
    """Adam with an optional step schedule for the learning rate."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.asarray(state["m"][k], dtype=self.params[k].dtype).copy()
            self.v[k] = np.asarray(state["v"][k], dtype=self.params[k].dtype).copy()


class SGD:
    """Plain SGD with heavy-ball momentum."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-2, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            buf = self.m[k]
            buf *= self.momentum
            buf += p.grad
            p.data -= (lr * buf).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": {}}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.asarray(state["m"][k], dtype=self.params[k].dtype).copy()
