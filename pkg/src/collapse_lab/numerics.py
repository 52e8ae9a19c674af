"""Small fp64 tensor engine with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor`. While a :class:`Tape` is active
(``with Tape() as tape:``) each op whose inputs require gradients appends a
backward closure to it; ``tape.backward(loss)`` replays them in reverse and
accumulates into ``Tensor.grad``. The active tape lives in a ``ContextVar`` so
independent runs in different threads never share one.

Conventions: ReLU has derivative 0 at exactly 0; ``maxpool2`` routes the
gradient to the first maximal element in row-major order.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """Raised when a NaN/Inf shows up in a forward value or gradient."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, what: str) -> "Tensor":
        # ops hand over freshly computed arrays; skip the defensive copy
        if not np.isfinite(arr).all():
            raise NumericError(f"{what} produced non-finite values")
        t = cls.__new__(cls)
        t.values = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values.copy(), False, "detach")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


class Tape:
    """Op log for one forward pass. Not reusable across passes."""

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._entries.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.values.size != 1:
            raise ValueError("backward() expects a scalar loss")
        loss.grad = np.ones_like(loss.values)
        for out, fn in reversed(self._entries):
            if out.grad is None:
                continue
            if not np.isfinite(out.grad).all():
                raise NumericError("non-finite gradient during backward pass")
            fn(out.grad)
        self._entries.clear()


_active_tape: ContextVar[Tape | None] = ContextVar("collapse_lab_tape", default=None)


@contextmanager
def no_grad():
    """Suspend recording on the active tape (evaluation passes)."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward)
    return out


# ----------------------------------------------------------------------------
# dense ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor._wrap(a.values @ b.values, False, "matmul")

    def backward(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _record(out, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast add: ``x[N, k] + bias[k]``."""
    if x.values.ndim != 2 or bias.shape != (x.shape[1],):
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    out = Tensor._wrap(x.values + bias.values, False, "add_bias")

    def backward(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=0))

    return _record(out, (x, bias), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add_bias(matmul(x, weight), bias)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[N, C, H, W] + bias[C]``."""
    if x.values.ndim != 4 or bias.shape != (x.shape[1],):
        raise ValueError(f"add_channel_bias shape mismatch: {x.shape} + {bias.shape}")
    out = Tensor._wrap(x.values + bias.values[None, :, None, None], False, "add_channel_bias")

    def backward(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _record(out, (x, bias), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    out = Tensor._wrap(np.where(mask, x.values, 0.0), False, "relu")

    def backward(g):
        _accumulate(x, g * mask)

    return _record(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = Tensor._wrap(x.values.reshape(shape[0], -1).copy(), False, "flatten")

    def backward(g):
        _accumulate(x, g.reshape(shape))

    return _record(out, (x,), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; backward scatter-adds."""
    idx = np.asarray(index, dtype=np.intp)
    out = Tensor._wrap(x.values[idx].copy(), False, "take_rows")

    def backward(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _record(out, (x,), backward)


def mix(a: Tensor, b: Tensor, lam: float) -> Tensor:
    """``lam * a + (1 - lam) * b`` for same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mix shape mismatch: {a.shape} vs {b.shape}")
    lam = float(lam)
    out = Tensor._wrap(lam * a.values + (1.0 - lam) * b.values, False, "mix")

    def backward(g):
        _accumulate(a, lam * g)
        _accumulate(b, (1.0 - lam) * g)

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.values + b.values, False, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(a.values * c, False, "scale")

    def backward(g):
        _accumulate(a, g * c)

    return _record(out, (a,), backward)


# ----------------------------------------------------------------------------
# convolution / pooling


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: padded [N, C, H+2, W+2] -> [N, H, W, C, 3, 3]
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], h, w, xp.shape[1], 3, 3),
        strides=(s[0], s[2], s[3], s[1], s[2], s[3]),
        writeable=False,
    )
    return cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding, stride 1 / pad 1 only."""
    if stride != 1 or pad != 1:
        raise ValueError("conv2d supports stride=1, pad=1 only")
    if x.values.ndim != 4 or kernel.values.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects N*C*H*W input and O*C*3*3 kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o = kernel.shape[0]
    if kernel.shape[1] != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {kernel.shape[1]}")
    xp = np.pad(x.values, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w).reshape(n * h * w, c * 9)
    kmat = kernel.values.reshape(o, c * 9)
    res = (cols @ kmat.T).reshape(n, h, w, o).transpose(0, 3, 1, 2)
    out = Tensor._wrap(np.ascontiguousarray(res), False, "conv2d")

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * w, o)
        _accumulate(kernel, (gm.T @ cols).reshape(kernel.shape))
        if x.requires_grad:
            # full correlation of g with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gcols = _im2col(gp, h, w).reshape(n * h * w, o * 9)
            kflip = kernel.values[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * 9)
            dx = (gcols @ kflip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            _accumulate(x, dx)

    return _record(out, (x, kernel), backward)


def maxpool2(x: Tensor) -> Tensor:
    if x.values.ndim != 4:
        raise ValueError(f"maxpool2 expects N*C*H*W, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.values.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum, i.e. row-major tie-breaking inside the window
    arg = win.argmax(axis=-1)
    out = Tensor._wrap(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], False, "maxpool2")

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        dx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, dx)

    return _record(out, (x,), backward)


# ----------------------------------------------------------------------------
# loss


def log_softmax(o: np.ndarray) -> np.ndarray:
    shifted = o - o.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(o: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(o))


def softmax_xent(o: Tensor, target) -> Tensor:
    """Batch-mean cross entropy of logits ``o`` against soft targets.

    ``target`` rows must be probability vectors (row sums within 1e-9).
    """
    t = target.values if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if o.values.ndim != 2 or t.shape != o.shape:
        raise ValueError(f"softmax_xent shape mismatch: logits {o.shape}, target {t.shape}")
    if o.shape[1] < 2:
        raise ValueError("softmax_xent needs at least 2 classes")
    if not np.isfinite(o.values).all():
        raise NumericError("NaN/Inf logits")
    if np.abs(t.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("softmax_xent target rows must sum to 1")
    n = o.shape[0]
    logp = log_softmax(o.values)
    loss = -(t * logp).sum() / n
    out = Tensor._wrap(np.array(loss), False, "softmax_xent")

    def backward(g):
        _accumulate(o, g * (np.exp(logp) - t) / n)

    return _record(out, (o,), backward)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ----------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64 output for a given seed is fixed across platforms and numpy
    releases (numpy's stream-compatibility policy for bit generators), so a
    seed pins every draw. Only the raw primitives (``random``,
    ``standard_normal``, ``integers``, ``permutation``) are taken from numpy;
    Gamma/Beta sampling is done here.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, size=None):
        return self._gen.random(size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, index: int) -> "Rng":
        """Independent stream for sub-run ``index`` (seed xor index)."""
        return Rng(self.seed ^ int(index))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state


def gamma_sample(rng: Rng, alpha: float) -> float:
    """Gamma(alpha, 1) via Marsaglia-Tsang; alpha < 1 boosted by U^(1/alpha)."""
    if not alpha > 0:
        raise ValueError(f"gamma shape must be > 0, got {alpha}")
    boost = 1.0
    if alpha < 1.0:
        boost = rng.random() ** (1.0 / alpha)
        alpha += 1.0
    d = alpha - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * x ** 4:
            return d * v * boost
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v * boost


def beta_sample(rng: Rng, alpha: float) -> float:
    """Symmetric Beta(alpha, alpha) draw as g1 / (g1 + g2)."""
    if not alpha > 0:
        raise ValueError(f"Beta alpha must be > 0, got {alpha}")
    while True:
        g1 = gamma_sample(rng, alpha)
        g2 = gamma_sample(rng, alpha)
        s = g1 + g2
        # both gammas can underflow to 0 for tiny alpha; 0 and 1 are excluded
        if s > 0.0 and 0.0 < g1 < s:
            return g1 / s


# ----------------------------------------------------------------------------
# gradient checking


def numerical_grad(fn: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``t.values`` (in place)."""
    g = np.zeros_like(t.values)
    flat = t.values.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn()
        flat[i] = old - eps
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences."""
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        num = numerical_grad(lambda: loss_fn().item(), p, eps)
        worst = max(worst, max_rel_error(a, num))
    return worst
