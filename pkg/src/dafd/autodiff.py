"""Tape-based reverse-mode automatic differentiation on numpy arrays.

Operations only record themselves while a :class:`Tape` is active::

    with Tape() as tape:
        loss = softmax_cross_entropy(dense(x, w, b), labels)
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what
evaluation code relies on for speed.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError, UsageError

_ACTIVE: list["Tape"] = []
_DEBUG_FINITE = os.environ.get("DAFD_DEBUG_NAN", "") not in ("", "0")


def set_debug_finite(flag: bool) -> None:
    """Assert that every recorded forward value is finite."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


_FLOATS = (np.dtype(np.float64), np.dtype(np.float32))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        self.data = arr if arr.dtype in _FLOATS else arr.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of these are tape-recorded ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_pair(self, other)[1]))

    def __rsub__(self, other):
        return add(_pair(other, self)[0], neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, so every record's inputs were
    produced by an earlier record (or are leaves). ``backward`` walks the log
    once in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Tensors for a binary op; plain Python numbers adopt the other side's dtype."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _colsum(a2: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array as a BLAS product, much faster than sum(axis=0)
    when there are many rows and few columns."""
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def _make(data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it on the active tape.

    ``grad_fn(g)`` maps the upstream gradient to one gradient (or None) per
    input, in order.
    """
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(tuple(inputs), out, grad_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every requires_grad tensor on ``tape``.

    Gradients accumulate into existing ``.grad`` buffers; call
    ``zero_grad`` explicitly between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = t
    for key, t in touched.items():
        if not t.requires_grad:
            continue
        g = grads[key]
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------
# generic primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# ----------------------------------------------------------------------
# network layers


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0] or bias.shape != (wd.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return _make(
        xd @ wd + bias.data,
        (x, weight, bias),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
    )


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """'Same' zero-padded, stride-1 convolution.

    ``x`` is [B, L, Cin], ``kernel`` [K, Cin, Cout] with K odd, ``bias`` [Cout].
    """
    xd, wd = x.data, kernel.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape}, kernel {kernel.shape}")
    k, cin, cout = wd.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel length must be odd, got {k}")
    if xd.shape[2] != cin or bias.shape != (cout,):
        raise ConfigurationError(
            f"conv1d: input has {xd.shape[2]} channels, kernel expects {cin}; bias {bias.shape}"
        )
    b, length, _ = xd.shape
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    # im2col: cols[b * length + t, j * cin + c] = xp[b, t + j, c]
    cols = np.concatenate([xp[:, j : j + length, :] for j in range(k)], axis=2).reshape(-1, k * cin)
    w2 = wd.reshape(k * cin, cout)
    out = (cols @ w2 + bias.data).reshape(b, length, cout)
    need_x = x.requires_grad

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if need_x:
            gcols = (g2 @ w2.T).reshape(b, length, k, cin)
            # tap j carries output position t back to input position t + j - pad
            gx = gcols[:, :, pad, :].copy()
            for j in range(k):
                d = pad - j
                if d == 0 or abs(d) >= length:
                    continue
                if d > 0:
                    gx[:, : length - d, :] += gcols[:, d:, j, :]
                else:
                    gx[:, -d:, :] += gcols[:, : length + d, j, :]
        return gx, (cols.T @ g2).reshape(wd.shape), _colsum(g2)

    return _make(out, (x, kernel, bias), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    # np.maximum keeps NaN visible; np.where(x > 0, ...) would silently zero it
    mask = x.data > 0
    return _make(np.maximum(x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    threshold = rate * 256
    if threshold == int(threshold):
        # rates on a 1/256 grid (0.5 included) are drawn exactly from random bytes
        keep = np.frombuffer(rng.bytes(x.data.size), dtype=np.uint8).reshape(x.shape) >= int(threshold)
    else:
        keep = rng.random(x.shape, dtype=np.float32) >= rate
    scale = keep * x.data.dtype.type(1.0 / (1.0 - rate))
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"logits must be [B, C], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - shifted[rows, labels])

    def grad_fn(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), (logits,), grad_fn)


def gradient_reversal(x: Tensor, lambda_d: float) -> Tensor:
    """Identity forward; multiplies the upstream gradient by -lambda_d."""
    if lambda_d < 0:
        raise ConfigurationError(f"lambda_d must be >= 0, got {lambda_d}")
    factor = -float(lambda_d)
    return _make(x.data, (x,), lambda g: (g * factor,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalise over every axis but the last with batch statistics.

    Returns ``(y, batch_mean, batch_var)``; the statistics are plain arrays
    (biased variance) so the caller can update running averages.
    """
    xd = x.data
    p = xd.shape[-1]
    x2 = xd.reshape(-1, p)
    m = x2.shape[0]
    mu = _colsum(x2) / m
    xc = x2 - mu
    var = _colsum(xc * xc) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def grad_fn(g):
        g2 = g.reshape(-1, p)
        dgamma = _colsum(g2 * xhat)
        dbeta = _colsum(g2)
        dx = (gd * inv / m) * (m * g2 - dbeta - xhat * dgamma)
        return dx.reshape(xd.shape), dgamma, dbeta

    return _make((gd * xhat + beta.data).reshape(xd.shape), (x, gamma, beta), grad_fn), mu, var


def sq_distances(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows of ``a`` and ``b``.

    The forward pass differences rows directly rather than expanding the
    square, so identical rows give exactly zero.
    """
    ad_, bd = a.data, b.data
    if ad_.ndim != 2 or bd.ndim != 2 or ad_.shape[1] != bd.shape[1]:
        raise ShapeError(f"sq_distances shapes {a.shape} and {b.shape}")
    diff = ad_[:, None, :] - bd[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def grad_fn(g):
        ga = 2.0 * (ad_ * g.sum(axis=1)[:, None] - g @ bd)
        gb = 2.0 * (bd * g.sum(axis=0)[:, None] - g.T @ ad_)
        return ga, gb

    return _make(out, (a, b), grad_fn)
