"""Double-precision tensors and a tape-based reverse-mode autodiff.

Only the layers the matching network needs are provided: dilated
convolution, max pooling, fully connected, ReLU, channel concatenation,
flattening, the two-unit softmax and binary cross-entropy.

Ops record themselves on the active :class:`Tape` (see ``with Tape():``)
whenever at least one input needs a gradient.  Tensors are never mutated
after creation; gradients live on the tape, except for trainable
:class:`Parameter` objects which accumulate into their ``grad`` buffer.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ActivationPattern",
    "ShapeError",
    "conv2d",
    "conv2d_direct",
    "conv_output_size",
    "pool_output_size",
    "max_pool",
    "fully_connected",
    "relu",
    "concat",
    "flatten",
    "softmax2",
    "cross_entropy",
    "dilate_kernel",
]

DTYPE = np.float64
PROB_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d losses to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable tensor with its own gradient buffer and freeze flag."""

    __slots__ = ("name", "grad", "_frozen")

    def __init__(self, name: str, data, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self._frozen = frozen
        self.grad = np.zeros_like(self.data)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen

    def assign(self, values: np.ndarray) -> None:
        """Overwrite the values in place (optimizer updates, checkpoint loads)."""
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != self.data.shape:
            raise ShapeError(
                f"parameter {self.name}: expected shape {self.data.shape}, got {values.shape}"
            )
        self.data[...] = values

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; one tape per forward pass and thread."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every unfrozen Parameter reachable from loss."""
        if not self._records:
            raise RuntimeError("backward called on an empty tape (no forward pass recorded)")
        if loss.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._records):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            in_grads = vjp(g_out)
            for g in in_grads:
                if g is not None:
                    _check_finite(g, "backward op")
            for t, g in zip(inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if isinstance(t, Parameter):
                    t.grad += g
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g


class ActivationPattern:
    """Record, then replay, every ReLU mask and max-pool argmax of a forward pass.

    Replaying evaluates the network on the fixed linear piece that contains
    the recorded point, so finite differences there do not straddle kinks.
    """

    def __init__(self):
        self.steps: list[np.ndarray] = []
        self._replay: int | None = None

    def replay(self) -> "ActivationPattern":
        self._replay = 0
        return self

    def __enter__(self) -> "ActivationPattern":
        _local.pattern = self
        if self._replay is not None:
            self._replay = 0
        return self

    def __exit__(self, *exc) -> None:
        _local.pattern = None

    def step(self, current: np.ndarray) -> np.ndarray:
        if self._replay is None:
            self.steps.append(current)
            return current
        pinned = self.steps[self._replay]
        self._replay += 1
        if pinned.shape != current.shape:
            raise ShapeError("replayed activation pattern does not match the forward pass")
        return pinned


def _pattern_step(current: np.ndarray) -> np.ndarray:
    pattern = getattr(_local, "pattern", None)
    return current if pattern is None else pattern.step(current)


def _track(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    _check_finite(out_data, "forward op")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, rate: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - ((k - 1) * rate + 1)) // stride + 1


def _conv_checks(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, rate: int, stride: int, pad: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got input {x.shape} and kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape} (in-channels {w.shape[1]})"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias {b.shape} does not match kernel {w.shape}")
    if rate < 1 or stride < 1 or pad < 0:
        raise ValueError(f"invalid conv settings rate={rate} stride={stride} pad={pad}")
    kh, kw = w.shape[2:]
    oh = conv_output_size(x.shape[2], kh, rate, stride, pad)
    ow = conv_output_size(x.shape[3], kw, rate, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel {w.shape} at rate {rate}")
    return oh, ow


def _im2col(xp: np.ndarray, kh: int, kw: int, rate: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix laid out (C, kh, kw, N, oh, ow) so it reshapes to (C*kh*kw, N*oh*ow)."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=DTYPE)
    for i in range(kh):
        y0 = i * rate
        for j in range(kw):
            x0 = j * rate
            cols[:, i, j] = xt[:, :, y0:y0 + stride * (oh - 1) + 1:stride, x0:x0 + stride * (ow - 1) + 1:stride]
    return cols


def _col2im(cols: np.ndarray, padded_shape, kh, kw, rate, stride, oh, ow) -> np.ndarray:
    n, c, hp, wp = padded_shape
    xt = np.zeros((c, n, hp, wp), dtype=DTYPE)
    for i in range(kh):
        y0 = i * rate
        for j in range(kw):
            x0 = j * rate
            xt[:, :, y0:y0 + stride * (oh - 1) + 1:stride, x0:x0 + stride * (ow - 1) + 1:stride] += cols[:, i, j]
    return xt.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, rate: int = 1,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Dilated cross-correlation, lowered to a matrix product.

    Output size per axis is ``floor((H + 2*pad - ((k-1)*rate + 1)) / stride) + 1``.
    """
    xd, wd = x.data, weight.data
    bd = None if bias is None else bias.data
    oh, ow = _conv_checks(xd, wd, bd, rate, stride, pad)
    n, c, h, w_ = xd.shape
    o, _, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, rate, stride, oh, ow).reshape(c * kh * kw, n * oh * ow)
    w2 = wd.reshape(o, c * kh * kw)
    out = (w2 @ cols).reshape(o, n, oh, ow)
    if bd is not None:
        out += bd[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, oh, ow)
            gxp = _col2im(gcols, xp.shape, kh, kw, rate, stride, oh, ow)
            gx = gxp[:, :, pad:pad + h, pad:pad + w_] if pad else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _track(out, inputs, vjp)


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, *,
                  rate: int = 1, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Reference convolution by explicit loops over output sites (no autodiff)."""
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    oh, ow = _conv_checks(x, weight, bias, rate, stride, pad)
    n = x.shape[0]
    o, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, oh, ow), dtype=DTYPE)
    for b in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            y = i * stride + ki * rate
                            xx = j * stride + kj * rate
                            acc += float(np.dot(weight[oc, :, ki, kj], xp[b, :, y, xx]))
                    out[b, oc, i, j] = acc + (0.0 if bias is None else bias[oc])
    return out


def dilate_kernel(weight: np.ndarray, rate: int) -> np.ndarray:
    """Insert ``rate - 1`` zeros between neighbouring kernel taps."""
    o, c, kh, kw = weight.shape
    out = np.zeros((o, c, (kh - 1) * rate + 1, (kw - 1) * rate + 1), dtype=DTYPE)
    out[:, :, ::rate, ::rate] = weight
    return out


# ---------------------------------------------------------------------------
# pooling


def pool_output_size(n: int, window: int, stride: int) -> int:
    # ceil mode, windows start inside the input
    return -(-(n - window) // stride) + 1 if n >= window else 1


def max_pool(x: Tensor, window=(2, 2), stride=(2, 2)) -> Tensor:
    """Ceil-mode max pooling; ties go to the first site in row-major window order."""
    wh, ww = (window, window) if isinstance(window, int) else window
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if min(wh, ww, sh, sw) <= 0:
        raise ValueError(f"max_pool window {window} and stride {stride} must be positive")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"max_pool expects a 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    oh, ow = pool_output_size(h, wh, sh), pool_output_size(w, ww, sw)
    ph = max((oh - 1) * sh + wh, h)
    pw = max((ow - 1) * sw + ww, w)
    xp = np.full((n, c, ph, pw), -np.inf, dtype=DTYPE)
    xp[:, :, :h, :w] = xd
    best = np.full((n, c, oh, ow), -np.inf, dtype=DTYPE)
    arg = np.zeros((n, c, oh, ow), dtype=np.int64)
    k = 0
    for i in range(wh):
        for j in range(ww):
            cand = xp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw]
            better = cand > best
            best = np.where(better, cand, best)
            arg = np.where(better, k, arg)
            k += 1
    pinned = _pattern_step(arg)
    if pinned is not arg:
        arg = pinned
        di, dj = np.divmod(arg, ww)
        best = xp[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                  np.arange(oh)[None, None, :, None] * sh + di,
                  np.arange(ow)[None, None, None, :] * sw + dj]

    def vjp(g):
        gxp = np.zeros((n, c, ph, pw), dtype=DTYPE)
        di, dj = np.divmod(arg, ww)
        rows = np.arange(oh)[None, None, :, None] * sh + di
        cols = np.arange(ow)[None, None, None, :] * sw + dj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (nn_, cc, rows, cols), g)
        return (gxp[:, :, :h, :w],)

    return _track(best, (x,), vjp)


# ---------------------------------------------------------------------------
# dense ops


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``W x + b`` per batch row; ``weight`` is (out, in)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"fully_connected: input {xd.shape} incompatible with weight {wd.shape}")
    if bias is not None and bias.shape != (wd.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} does not match weight {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _track(out, inputs, vjp)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = _pattern_step(xd > 0)
    return _track(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[a.shape for a in arrays]}") from exc
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _track(out, tuple(tensors), vjp)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _track(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def softmax2(units: Tensor) -> Tensor:
    """Probability of unit 1 out of two: exp(s1) / (exp(s0) + exp(s1)), per row."""
    s = units.data
    if s.ndim != 2 or s.shape[1] != 2:
        raise ShapeError(f"softmax2 expects (batch, 2) units, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("softmax2 received non-finite units")
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    p = e[:, 1] / e.sum(axis=1)

    def vjp(g):
        d = g * p * (1.0 - p)
        return (np.stack([-d, d], axis=1),)

    return _track(p, (units,), vjp)


def cross_entropy(p: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of same-person probabilities against 0/1 labels."""
    labels = np.asarray(labels, dtype=DTYPE).reshape(-1)
    pd = p.data.reshape(-1)
    if pd.shape != labels.shape:
        raise ShapeError(f"cross_entropy: {pd.shape[0]} probabilities vs {labels.shape[0]} labels")
    if pd.size == 0:
        raise ValueError("cross_entropy on an empty batch")
    pc = np.clip(pd, PROB_EPS, 1.0 - PROB_EPS)
    losses = -(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc))
    n = pd.size
    inside = (pd > PROB_EPS) & (pd < 1.0 - PROB_EPS)

    def vjp(g):
        d = -(labels / pc - (1.0 - labels) / (1.0 - pc)) / n
        return ((g * d * inside).reshape(p.shape),)

    return _track(np.array(losses.mean()), (p,), vjp)


def scalar_loss(p: float, label: int) -> float:
    """Plain-float cross-entropy for one probability, clamped like :func:`cross_entropy`."""
    pc = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return -(label * math.log(pc) + (1 - label) * math.log(1.0 - pc))
