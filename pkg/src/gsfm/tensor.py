"""Small numpy-backed tensor with reverse-mode autodiff.

Only the handful of ops the model needs are implemented. Every op accepts
arbitrary leading batch dimensions where that makes sense, so ``[C, H, W]``
and ``[B, C, H, W]`` inputs both work.
"""
from __future__ import annotations

import contextlib
import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_state = threading.local()
_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense real array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _raise_not_scalar():
    raise ValueError("only size-1 tensors can be converted to a Python scalar")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a recorded op.

    ``backward_fn(g)`` receives the upstream gradient and returns one gradient
    array (or None) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def build_tape(root: Tensor) -> list[Tensor]:
    """Recorded ops reachable from ``root``, inputs before consumers."""
    return [t for t in _topological(root) if t._backward is not None]


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing was recorded")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: accumulate into .grad
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(f"grad shape {pg.shape} != {parent.shape} in {node.op}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from exc


def add(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_op(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul,
    "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log,
}


def elementwise(op: str, a, b=None) -> Tensor:
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(as_tensor(a))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_op(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return make_op(np.array(out, dtype=x.dtype), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ax = axis if axis >= 0 else tensors[0].ndim + 1 + axis
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return make_op(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return make_op(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def masked_softmax(x: Tensor, keep: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the entries where ``keep`` is true; zeros elsewhere."""
    masked = np.where(keep, x.data, -np.inf)
    z = masked - masked.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0).astype(x.dtype)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "masked_softmax")


# ---------------------------------------------------------------------------
# spatial ops on [..., C, H, W]
# ---------------------------------------------------------------------------


def _fold_replicate(gp: np.ndarray) -> np.ndarray:
    # adjoint of np.pad(..., 1, mode="edge") on the last two axes
    gp = gp.copy()
    gp[..., 1, :] += gp[..., 0, :]
    gp[..., -2, :] += gp[..., -1, :]
    gp = gp[..., 1:-1, :]
    gp[..., :, 1] += gp[..., :, 0]
    gp[..., :, -2] += gp[..., :, -1]
    return np.ascontiguousarray(gp[..., :, 1:-1])


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "zero") -> Tensor:
    """Same-size 2-D cross-correlation with a 1x1 or 3x3 kernel."""
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    k = kernel.shape[2]
    if k not in (1, 3):
        raise ValueError(f"unsupported kernel size {k}")
    if padding not in ("zero", "replicate"):
        raise ValueError(f"unknown padding mode {padding!r}")
    if x.ndim < 3 or x.shape[-3] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape}, kernel {kernel.shape}")
    lead = x.shape[:-3]
    cin, h, w = x.shape[-3:]
    cout = kernel.shape[0]
    xb = x.data.reshape((-1, cin, h, w))
    wmat = kernel.data.reshape(cout, cin * k * k)

    if k == 1:
        cols = xb.reshape(xb.shape[0], cin, h * w)
    else:
        pad = ((0, 0), (0, 0), (1, 1), (1, 1))
        xp = np.pad(xb, pad, mode="constant" if padding == "zero" else "edge")
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(-2, -1))
        # [B, C, H, W, 3, 3] -> [B, C, 3, 3, H, W]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(xb.shape[0], cin * 9, h * w)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1)
    out = out.reshape(lead + (cout, h, w))

    def bw(g):
        gb = g.reshape(-1, cout, h * w)
        gk = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None
        gbias = gb.sum(axis=(0, 2)).reshape(bias.shape) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gb)
            if k == 1:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(-1, cin, 3, 3, h, w)
                gp = np.zeros((gcols.shape[0], cin, h + 2, w + 2), dtype=g.dtype)
                for i in range(3):
                    for j in range(3):
                        gp[:, :, i:i + h, j:j + w] += gcols[:, :, i, j]
                gx = (gp[:, :, 1:-1, 1:-1] if padding == "zero" else _fold_replicate(gp))
                gx = np.ascontiguousarray(gx).reshape(x.shape)
        return (gx, gk) if bias is None else (gx, gk, gbias)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, parents, bw, "conv2d")


def avg_pool2x(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x needs even spatial size, got {(h, w)}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        return (g.astype(x.dtype),)

    return make_op(out, (x,), bw, "avg_pool2x")


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # bilinear x2, align_corners=False: out[2j] = .75 a[j] + .25 a[j-1], out[2j+1] = .75 a[j] + .25 a[j+1]
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    # prev contributions: a[j-1] gets .25 ge[j]; a[0] also gets .25 ge[0]
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    # next contributions: a[j+1] gets .25 go[j]; a[-1] also gets .25 go[-1]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample2x(x: Tensor) -> Tensor:
    out = _up_axis(_up_axis(x.data, -1), -2)
    return make_op(np.ascontiguousarray(out), (x,),
                   lambda g: (np.ascontiguousarray(_up_axis_adjoint(_up_axis_adjoint(g, -2), -1)),),
                   "upsample2x")


# ---------------------------------------------------------------------------
# checking and serialization
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between autodiff and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    y.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def save_tensor(stem: str | Path, t: Tensor | np.ndarray) -> None:
    """Write ``<stem>.bin`` (little-endian float32) and ``<stem>.json``."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{stem}.bin").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(f"{stem}.json").write_text(json.dumps({"shape": list(arr.shape), "dtype": "float32"}))


def load_tensor(stem: str | Path, requires_grad: bool = False) -> Tensor:
    stem = Path(stem)
    meta = json.loads(Path(f"{stem}.json").read_text())
    if meta.get("dtype") != "float32":
        raise ValueError(f"unsupported serialized dtype {meta.get('dtype')}")
    arr = np.frombuffer(Path(f"{stem}.bin").read_bytes(), dtype="<f4").reshape(meta["shape"])
    return Tensor(arr.astype(np.float32), requires_grad=requires_grad)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
