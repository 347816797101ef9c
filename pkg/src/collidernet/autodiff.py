"""Minimal reverse-mode autodiff over numpy arrays.

Only the ops the prognosis CNN needs are provided: 3x3 same-padding
convolution, ReLU, floor 2x2 max-pooling, dense layers, inverted dropout,
column slicing/concatenation, elementwise arithmetic and reductions, MSE.

Conventions
-----------
- convolution is cross-correlation (no kernel flip), zero padding of 1
- max-pooling floors odd spatial sizes (51 -> 25) and routes the gradient to
  the first maximal element of each window
- dropout is inverted (kept units scaled by 1/(1-p)); masks come from an
  explicit generator so a step is reproducible and a mask can be frozen
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; each node is visited exactly once."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if pg is None or not _needs_grad(parent):
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor(data, _parents=parents, op=op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(a.data * b.data, (a, b), backward, "mul")


def square(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, 2.0 * a.data * g),)

    return _make(a.data * a.data, (a,), backward, "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return ((a, g * mask),)

    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), backward, "relu")


def maximum0(a: Tensor) -> Tensor:
    """Hinge max(0, a) for scalars; gradient is 0 at the kink."""
    return relu(a)


# ----------------------------------------------------------------- reductions

def sum_(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, np.broadcast_to(g, a.shape).astype(a.dtype)),)

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        return ((a, np.broadcast_to(g / n, a.shape).astype(a.dtype)),)

    return _make(np.asarray(a.data.mean()), (a,), backward, "mean")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error; gradient 2(pred - target)/m."""
    target_t = as_tensor(target, pred.dtype)
    if pred.shape != target_t.shape:
        raise ShapeError(f"mse: shape {pred.shape} vs {target_t.shape}")
    diff = pred.data - target_t.data
    m = diff.size

    def backward(g):
        gp = (2.0 / m) * diff * g
        return ((pred, gp), (target_t, -gp))

    return _make(np.asarray(np.mean(diff * diff)), (pred, target_t), backward, "mse")


# ------------------------------------------------------------------ structure

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-d tensor."""
    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return ((a, full),)

    return _make(a.data[:, start:stop], (a,), backward, "columns")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append((t, g[tuple(idx)]))
        return out

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), backward, "concat")


# --------------------------------------------------------------------- layers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with x (B, n_in), w (n_in, n_out), b (n_out,)."""
    if x.data.ndim != 2 or w.shape[0] != x.shape[1] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: x {x.shape}, w {w.shape}, b {b.shape}")

    def backward(g):
        return ((x, g @ w.data.T), (w, x.data.T @ g), (b, g.sum(axis=0)))

    return _make(x.data @ w.data + b.data, (x, w, b), backward, "dense")


def _im2col3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: (B, C, h+2, w+2) -> (B, C*9, h*w), row order (c, ki, kj)
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 9, h, w), dtype=xp.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, :, k] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * 9, h * w)


def conv2d_3x3(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padding 3x3 cross-correlation: (B,C,H,W) x (F,C,3,3) -> (B,F,H,W)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d_3x3: input must be 4-d, got {x.shape}")
    B, C, H, W = x.shape
    if kernels.shape[1:] != (C, 3, 3) or bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d_3x3: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    if H < 3 or W < 3:
        raise ShapeError("conv2d_3x3: spatial size must be >= 3")
    F = kernels.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, H, W)
    wmat = kernels.data.reshape(F, C * 9)
    out = (np.matmul(wmat, cols) + bias.data[:, None]).reshape(B, F, H, W)

    def backward(g):
        g2 = g.reshape(B, F, H * W)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        gb = g2.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(B, C, 9, H, W)
            gxp = np.zeros_like(xp)
            for k in range(9):
                i, j = divmod(k, 3)
                gxp[:, :, i:i + H, j:j + W] += dcols[:, :, k]
            gx = gxp[:, :, 1:-1, 1:-1]
        return ((x, gx), (kernels, gw), (bias, gb))

    return _make(out, (x, kernels, bias), backward, "conv2d_3x3")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 max-pooling with floored output size."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2: input must be 4-d, got {x.shape}")
    H, W = x.shape[2:]
    h, w = H // 2, W // 2
    if h == 0 or w == 0:
        raise ShapeError("maxpool2x2: spatial size must be >= 2")
    # window elements in scan order: (0,0), (0,1), (1,0), (1,1)
    quads = [x.data[:, :, di:2 * h:2, dj:2 * w:2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (quads[k] == out) & ~taken
            taken |= hit
            gx[:, :, di:2 * h:2, dj:2 * w:2] = g * hit
        return ((x, gx),)

    return _make(out, (x,), backward, "maxpool2x2")


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None,
            training: bool = True, mask: np.ndarray | None = None) -> Tensor:
    if not training or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in training mode needs a generator or a frozen mask")
        mask = dropout_mask(x.shape, p, rng, x.dtype)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask {mask.shape} vs input {x.shape}")
    return mul(x, Tensor(mask))


def affine_const(x: Tensor, coef: np.ndarray, intercept: float) -> Tensor:
    """x @ coef + intercept with coef held constant (no gradient to coef)."""
    coef = np.asarray(coef, dtype=x.dtype)

    def backward(g):
        return ((x, np.outer(g, coef)),)

    return _make(x.data @ coef + intercept, (x,), backward, "affine_const")


# ---------------------------------------------------------------------- adam

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState,
              grads: Sequence[np.ndarray | None] | None = None) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


# ----------------------------------------------------------------- gradcheck

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    entries: int = 0
    refined: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], tolerance: float,
               h: float = 1e-5, name: str = "", max_entries: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-7,
               refine: int = 2) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``fn`` must be deterministic (freeze dropout masks before calling).  The
    relative error per entry is |a - n| / max(|a|, |n|, floor); ``floor``
    keeps round-off on near-zero gradients from reading as failure.  With
    ``max_entries`` a random subset of entries per parameter is probed.

    An entry over tolerance is re-probed with steps h/10, h/100 (``refine``
    times): a step that straddles a ReLU or max-pool kink gives a wrong
    difference quotient that shrinks with h, while a wrong backward rule
    stays wrong at every step.  The smallest error is kept and counted in
    ``refined``.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.zero_grad()
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def central(flat, i, step):
        old = flat[i]
        flat[i] = old + step
        fp = float(fn().data)
        flat[i] = old - step
        fm = float(fn().data)
        flat[i] = old
        return (fp - fm) / (2 * step)

    worst, count, refined = 0.0, 0, 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            ana = a.reshape(-1)[i]
            step = h
            err = np.inf
            for attempt in range(refine + 1):
                num = central(flat, i, step)
                err = min(err, abs(ana - num) / max(abs(ana), abs(num), floor))
                if err < tolerance:
                    break
                step /= 10
            refined += attempt > 0
            count += 1
            worst = max(worst, err)
    return GradCheckReport(name, worst, tolerance, count, refined)


# ------------------------------------------------------------- serialization

CHECKPOINT_MAGIC = b"CNETCKP1"
_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write tensors to a flat binary checkpoint.

    Layout (all little-endian): magic ``CNETCKP1``, u32 count, then per tensor a
    header (u16 name length, utf-8 name, u8 dtype code 0=f32/1=f64, u8 ndim,
    u64 dims...), followed by all payloads in header order.
    """
    headers = []
    payloads = []
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        h = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _DTYPES[dt], arr.ndim)
        h += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        headers.append(h)
        payloads.append(arr.astype(dt, copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(headers)))
        for h in headers:
            fh.write(h)
        for p in payloads:
            fh.write(p)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        table.append((name, _DTYPE_CODES[code], shape))
    out = {}
    for name, dt, shape in table:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                                  offset=pos).reshape(shape).copy()
        pos += nbytes
    return out
