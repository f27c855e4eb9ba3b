"""Space-time memory bank and memory read (affinity, top-k softmax, readout)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ReadConfig:
    top_k: int = 50
    similarity: str = "neg_sq_l2"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.similarity != "neg_sq_l2":
            raise ValueError(f"unsupported similarity {self.similarity!r}")


def affinity(kq: Tensor, km: Tensor) -> Tensor:
    """Negative squared L2 distance between every query and memory location.

    ``kq`` is ``[..., C_k, M]``, ``km`` is ``[..., C_k, N]``; result is ``[..., M, N]``.
    Uses ``-|q|^2 + 2 q.k - |k|^2``.
    """
    if kq.shape[-2] != km.shape[-2]:
        raise ValueError(f"key channel mismatch: {kq.shape} vs {km.shape}")
    qq = T.tsum(kq * kq, axis=-2, keepdims=True)          # [..., 1, M]
    kk = T.tsum(km * km, axis=-2, keepdims=True)          # [..., 1, N]
    qk = T.matmul(T.swapaxes(kq, -1, -2), km)             # [..., M, N]
    return qk * 2.0 - T.swapaxes(qq, -1, -2) - kk


def topk_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lowest index."""
    n = a.shape[-1]
    if k >= n:
        return np.ones(a.shape, dtype=bool)
    kth = -np.partition(-a, k - 1, axis=-1)[..., k - 1:k]
    above = a > kth
    need = k - above.sum(axis=-1, keepdims=True)
    tie = a == kth
    return above | (tie & (np.cumsum(tie, axis=-1) <= need))


def topk_normalize(a: Tensor, k: int) -> Tensor:
    """Softmax over the k strongest affinities of each row, zero elsewhere."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= a.shape[-1]:
        return T.softmax(a, axis=-1)
    return T.masked_softmax(a, topk_mask(a.data, k), axis=-1)


def readout(w: Tensor, vm: Tensor) -> Tensor:
    """``[..., C_v, M]`` weighted sum of memory values with rows of ``w`` as weights."""
    return T.matmul(vm, T.swapaxes(w, -1, -2))


def memory_read(kq: Tensor, km: Tensor, vm: Tensor, top_k: int) -> Tensor:
    w = topk_normalize(affinity(kq, km), min(top_k, km.shape[-1]))
    return readout(w, vm)


@dataclass
class MemoryBank:
    """Per-sequence memory. Keys/values are stored per frame as ``[..., C, n]``."""

    capacity: int | None = None
    frame_indices: list[int] = field(default_factory=list)
    _keys: list[Tensor] = field(default_factory=list, repr=False)
    _values: list[Tensor] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.frame_indices)

    @property
    def size(self) -> int:
        return sum(k.shape[-1] for k in self._keys)

    @property
    def keys(self) -> Tensor:
        if not self._keys:
            raise ValueError("memory bank is empty")
        return self._keys[0] if len(self._keys) == 1 else T.concat(self._keys, axis=-1)

    @property
    def values(self) -> Tensor:
        if not self._values:
            raise ValueError("memory bank is empty")
        return self._values[0] if len(self._values) == 1 else T.concat(self._values, axis=-1)

    def add(self, frame_id: int, key: Tensor, value: Tensor) -> None:
        if frame_id in self.frame_indices:
            raise ValueError(f"frame {frame_id} already memorized")
        if self.frame_indices and frame_id < self.frame_indices[-1]:
            raise ValueError(f"frame {frame_id} inserted out of order after {self.frame_indices[-1]}")
        if key.shape[-1] != value.shape[-1]:
            raise ValueError("key and value location counts differ")
        self.frame_indices.append(frame_id)
        self._keys.append(key)
        self._values.append(value)
        self._evict()

    def _evict(self) -> None:
        # FIFO, but the first memorized frame stays
        while self.capacity is not None and self.size > self.capacity and len(self._keys) > 1:
            del self.frame_indices[1], self._keys[1], self._values[1]


def should_memorize(frame_id: int, every_r: int) -> bool:
    if every_r < 1:
        raise ValueError("every_r must be >= 1")
    return frame_id == 0 or frame_id % every_r == 0


def _flatten_spatial(t: Tensor) -> Tensor:
    return t.reshape(t.shape[:-2] + (t.shape[-2] * t.shape[-1],))


def memorize(bank: MemoryBank, frame_id: int, key_features: Tensor, value_features: Tensor,
             every_r: int, flatten: bool = True) -> MemoryBank:
    """Insert features for ``frame_id`` if the schedule selects it.

    ``key_features`` is the frame's query key, reused verbatim as memory key.
    With ``flatten`` the trailing ``H, W`` axes are merged into locations.
    """
    if frame_id in bank.frame_indices:
        raise ValueError(f"frame {frame_id} already memorized")
    if should_memorize(frame_id, every_r):
        if flatten:
            key_features, value_features = _flatten_spatial(key_features), _flatten_spatial(value_features)
        bank.add(frame_id, key_features, value_features)
    return bank
