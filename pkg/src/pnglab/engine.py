"""Minimal reverse-mode autodiff on float64 numpy arrays.

A Tensor records its parents and a backward closure; ``backward()`` on a
scalar loss topologically sorts the tape (iteratively, graphs can be a
few thousand nodes deep) and accumulates gradients.  All compute is
float64; 32-bit floats appear only in checkpoint files.

Non-finite values raise DivergenceError as soon as an op produces them
(toggle with ``set_finite_checks`` for hot loops that check at the loss
instead).  Heavy inner loops (softmax, layer norm, LSTM gates, Adam,
embedding scatter) dispatch through :mod:`pnglab.kernels`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DivergenceError

_GRAD_ENABLED = True
_FINITE_CHECKS = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op finite checks; returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    return prev


def _check_finite(data: np.ndarray, what: str) -> None:
    # isfinite(sum) is ~3x cheaper than isfinite(all); any NaN/Inf in the
    # array poisons the sum, and float64 sums of sane values cannot
    # overflow, so this is an exact detector in practice
    if not np.isfinite(np.sum(data)):
        raise DivergenceError(-1, f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- bookkeeping --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy, not alias: callers may hand the same buffer to several
            # parents (e.g. add) or a view of a grad mutated later
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(g, self.data.shape).copy()
        else:
            self.grad += g

    def _accum_owned(self, g: np.ndarray) -> None:
        # caller hands over a freshly allocated array it will not touch
        # again, so first accumulation can adopt it without a copy
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed needs a scalar")
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.data.shape)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
                # the closure captures node (a reference cycle) and its
                # grad is fully distributed; release both immediately so
                # step memory is bounded by refcounting, not gc cadence
                node._backward = None
                node.grad = None
            node._parents = ()

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(tensor_sum(self, axis, keepdims), 1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, what: str, checked: bool = True) -> Tensor:
    # checked=False is reserved for pure data movement (reshape, gather,
    # concat): values are carried over unchanged from already-checked
    # tensors, so the all-finite invariant is inherited, not re-proven
    if _FINITE_CHECKS and checked:
        _check_finite(data, what)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward(out) if backward is not None else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(out):
        def run():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))

        return run

    return _make(a.data + b.data, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(out):
        def run():
            if a.requires_grad:
                a._accum_owned(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum_owned(_unbroadcast(out.grad * a.data, b.data.shape))

        return run

    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    inv = 1.0 / b.data

    def bwd(out):
        def run():
            if a.requires_grad:
                a._accum_owned(_unbroadcast(out.grad * inv, a.data.shape))
            if b.requires_grad:
                b._accum_owned(_unbroadcast(-out.grad * a.data * inv * inv, b.data.shape))

        return run

    return _make(a.data * inv, (a, b), bwd, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim > 2 and bd.ndim == 2:
        lead = ad.shape[:-1]
        out_data = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*lead, bd.shape[1])

        def bwd(out):
            def run():
                g2 = out.grad.reshape(-1, bd.shape[1])
                if a.requires_grad:
                    a._accum_owned((g2 @ bd.T).reshape(ad.shape))
                if b.requires_grad:
                    b._accum_owned(ad.reshape(-1, ad.shape[-1]).T @ g2)

            return run

        return _make(out_data, (a, b), bwd, "matmul")
    if ad.ndim != bd.ndim or (ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]):
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def bwd(out):
        def run():
            if a.requires_grad:
                a._accum_owned(np.matmul(out.grad, bd.swapaxes(-1, -2)))
            if b.requires_grad:
                b._accum_owned(np.matmul(ad.swapaxes(-1, -2), out.grad))

        return run

    return _make(np.matmul(ad, bd), (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map over the last axis: x @ w + b in one tape node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2 @ w.data
    y += b.data

    def bwd(out):
        def run():
            g2 = out.grad.reshape(-1, w.data.shape[1])
            if x.requires_grad:
                x._accum_owned((g2 @ w.data.T).reshape(x.data.shape))
            if w.requires_grad:
                w._accum_owned(x2.T @ g2)
            if b.requires_grad:
                b._accum_owned(g2.sum(axis=0))

        return run

    return _make(y.reshape(*lead, w.data.shape[1]), (x, w, b), bwd, "linear")


def attention_core(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray,
    heads: int,
    p_drop: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Fused multi-head scaled-dot-product attention over (B, T, d) inputs.

    Head split, 1/sqrt(head_dim) scaling, additive mask, softmax, optional
    attention dropout, and the weighted sum run as a single tape node; the
    hand-derived backward is covered by the finite-difference suite.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    bsz, t, d = q.data.shape
    if d % heads:
        raise ValueError(f"hidden size {d} not divisible by {heads} heads")
    hd = d // heads
    inv = 1.0 / math.sqrt(hd)

    def split(x: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(x.reshape(bsz, t, heads, hd).transpose(0, 2, 1, 3))

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.matmul(qh, kh.swapaxes(-1, -2))
    scores *= inv
    scores += mask
    probs = kernels.softmax_fwd(scores.reshape(-1, t)).reshape(scores.shape)
    if training and p_drop > 0.0:
        if rng is None:
            raise ValueError("attention dropout needs an rng when training")
        dmask = (rng.random(probs.shape) >= p_drop) / (1.0 - p_drop)
        dropped = probs * dmask
    else:
        dmask = None
        dropped = probs
    ctx = np.matmul(dropped, vh)
    out_data = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(bsz, t, d)

    def bwd(out):
        def run():
            gctx = np.ascontiguousarray(out.grad.reshape(bsz, t, heads, hd).transpose(0, 2, 1, 3))
            dprob = np.matmul(gctx, vh.swapaxes(-1, -2))
            if v.requires_grad:
                dvh = np.matmul(dropped.swapaxes(-1, -2), gctx)
                v._accum_owned(np.ascontiguousarray(dvh.transpose(0, 2, 1, 3)).reshape(bsz, t, d))
            if dmask is not None:
                dprob *= dmask
            ds = kernels.softmax_bwd(probs.reshape(-1, t), np.ascontiguousarray(dprob.reshape(-1, t))).reshape(scores.shape)
            ds *= inv
            if q.requires_grad:
                dqh = np.matmul(ds, kh)
                q._accum_owned(np.ascontiguousarray(dqh.transpose(0, 2, 1, 3)).reshape(bsz, t, d))
            if k.requires_grad:
                dkh = np.matmul(ds.swapaxes(-1, -2), qh)
                k._accum_owned(np.ascontiguousarray(dkh.transpose(0, 2, 1, 3)).reshape(bsz, t, d))

        return run

    return _make(out_data, (q, k, v), bwd, "attention")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape

    def bwd(out):
        def run():
            a._accum(out.grad.reshape(orig))

        return run

    return _make(a.data.reshape(shape), (a,), bwd, "reshape", checked=False)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(out):
        def run():
            a._accum_owned(np.ascontiguousarray(out.grad.transpose(inv)))

        return run

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd, "transpose", checked=False)


def take(a: Tensor, idx) -> Tensor:
    """Basic indexing (ints, slices, ellipsis); no repeated indices."""
    a = as_tensor(a)

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            g[idx] += out.grad
            a._accum_owned(g)

        return run

    return _make(a.data[idx].copy(), (a,), bwd, "take", checked=False)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(out):
        def run():
            offset = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(offset, offset + s)
                    t._accum(out.grad[tuple(sl)])
                offset += s

        return run

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat", checked=False)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bwd(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum_owned(np.broadcast_to(g, a.data.shape).copy() if g.shape != a.data.shape else g.copy())

        return run

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0

    def bwd(out):
        def run():
            a._accum_owned(out.grad * pos)

        return run

    return _make(a.data * pos, (a,), bwd, "relu")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def bwd(out):
        def run():
            a._accum_owned(out.grad * (1.0 - y * y))

        return run

    return _make(y, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = sigmoid_array(a.data)

    def bwd(out):
        def run():
            a._accum_owned(out.grad * y * (1.0 - y))

        return run

    return _make(y, (a,), bwd, "sigmoid")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic on a plain array."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {p}")
    if not training or p == 0.0:
        return a
    a = as_tensor(a)
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def bwd(out):
        def run():
            a._accum_owned(out.grad * keep)

        return run

    return _make(a.data * keep, (a,), bwd, "dropout")


def shift_right(a: Tensor) -> Tensor:
    """Shift the last axis right by one, zero-filling position 0."""
    a = as_tensor(a)
    y = np.zeros_like(a.data)
    y[..., 1:] = a.data[..., :-1]

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            g[..., :-1] = out.grad[..., 1:]
            a._accum_owned(g)

        return run

    return _make(y, (a,), bwd, "shift_right", checked=False)


# ---------------------------------------------------------------------------
# fused ops through the kernel backends


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if axis not in (-1, a.data.ndim - 1):
        raise ValueError("softmax supports the last axis only")
    shape = a.data.shape
    x2 = np.ascontiguousarray(a.data.reshape(-1, shape[-1]))
    y2 = kernels.softmax_fwd(x2)

    def bwd(out):
        def run():
            dy2 = np.ascontiguousarray(out.grad.reshape(-1, shape[-1]))
            a._accum_owned(kernels.softmax_bwd(y2, dy2).reshape(shape))

        return run

    return _make(y2.reshape(shape), (a,), bwd, "softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    shape = a.data.shape
    x2 = np.ascontiguousarray(a.data.reshape(-1, shape[-1]))
    y2, xhat, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, eps)

    def bwd(out):
        def run():
            dy2 = np.ascontiguousarray(out.grad.reshape(-1, shape[-1]))
            dx, dg, db = kernels.layer_norm_bwd(xhat, rstd, gain.data, dy2)
            if a.requires_grad:
                a._accum_owned(dx.reshape(shape))
            if gain.requires_grad:
                gain._accum_owned(dg)
            if bias.requires_grad:
                bias._accum_owned(db)

        return run

    return _make(y2.reshape(shape), (a, gain, bias), bwd, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def bwd(out):
        def run():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            rows = np.ascontiguousarray(out.grad.reshape(-1, table.data.shape[1]))
            kernels.scatter_add_rows(table.grad, ids.reshape(-1), rows)

        return run

    return _make(out_data, (table,), bwd, "embedding", checked=False)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; indices may repeat."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(out):
        def run():
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            kernels.scatter_add_rows(a.grad, idx, np.ascontiguousarray(out.grad))

        return run

    return _make(a.data[idx], (a,), bwd, "gather_rows", checked=False)


def lstm_gates(z: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Fused LSTM nonlinearity; returns (h_next, c_next).

    z is the (n, 4h) pre-activation in gate order [i, f, g, o].  The
    packed (n, 2h) output is a single tape node, sliced for the callers.
    """
    z, c_prev = as_tensor(z), as_tensor(c_prev)
    out_data, gates, tanh_c = kernels.lstm_gates_fwd(z.data, c_prev.data)
    c_prev_data = c_prev.data

    def bwd(out):
        def run():
            dz, dc_prev = kernels.lstm_gates_bwd(gates, tanh_c, c_prev_data, np.ascontiguousarray(out.grad))
            if z.requires_grad:
                z._accum_owned(dz)
            if c_prev.requires_grad:
                c_prev._accum_owned(dc_prev)

        return run

    packed = _make(out_data, (z, c_prev), bwd, "lstm_gates")
    h = packed.shape[1] // 2
    return take(packed, (slice(None), slice(0, h))), take(packed, (slice(None), slice(h, 2 * h)))


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step: w is ((in+h), 4h), b is (4h,)."""
    z = add(matmul(concat([x, h_prev], axis=1), w), b)
    return lstm_gates(z, c_prev)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean cross entropy over mask-true rows of (N, V) logits."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("cross_entropy: empty loss mask")
        rows = np.nonzero(mask)[0]
        sub = gather_rows(logits, rows)
        sub_targets = targets[rows]
    else:
        if logits.data.shape[0] == 0:
            raise ValueError("cross_entropy: empty loss mask")
        sub = logits
        sub_targets = targets
    losses, probs = kernels.cross_entropy_fwd(np.ascontiguousarray(sub.data), sub_targets)
    n = losses.shape[0]

    def bwd(out):
        def run():
            d = probs.copy()
            d[np.arange(n), sub_targets] -= 1.0
            d *= out.grad / n
            sub._accum_owned(d)

        return run

    return _make(np.array(losses.mean()), (sub,), bwd, "cross_entropy")


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean stable BCE over mask-true elements; targets in {0, 1}."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if mask is None:
        mask = np.ones(logits.data.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("binary_cross_entropy: empty loss mask")
    n = int(mask.sum())
    x = logits.data
    per = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))

    def bwd(out):
        def run():
            g = (sigmoid_array(x) - targets) * mask
            logits._accum_owned(g * (out.grad / n))

        return run

    return _make(np.array((per * mask).sum() / n), (logits,), bwd, "binary_cross_entropy")


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over mask-true positions (mask broadcasts)."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if mask is None:
        w = np.ones(pred.data.shape)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.data.shape)
    n = w.sum()
    if n == 0:
        raise ValueError("masked_mse: empty mask")
    diff = (pred.data - target) * w

    def bwd(out):
        def run():
            pred._accum_owned(out.grad * 2.0 * diff / n)

        return run

    return _make(np.array((diff * diff).sum() / n), (pred,), bwd, "masked_mse")


# ---------------------------------------------------------------------------
# optimization


class AdamState:
    """Adam moments for a fixed set of named parameters.

    L2 regularization is coupled (added to the gradient before the moment
    updates) by default; set ``decoupled=True`` for decoupled weight decay
    applied directly to the parameter.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        l2: float = 0.0,
        decoupled: bool = False,
    ):
        self.names = sorted(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.l2 = l2
        self.decoupled = decoupled
        self.step_count = 0
        self.m = {n: np.zeros(params[n].data.size) for n in self.names}
        self.v = {n: np.zeros(params[n].data.size) for n in self.names}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Apply one Adam update in place; missing grads count as zero."""
    state.step_count += 1
    t = state.step_count
    for name in state.names:
        p = params[name]
        flat = p.data.reshape(-1)
        if p.grad is None:
            g = np.zeros_like(flat)
        else:
            g = p.grad.reshape(-1)
            if _FINITE_CHECKS:
                _check_finite(g, f"gradient of {name}")
        if state.l2 != 0.0:
            if state.decoupled:
                flat -= lr * state.l2 * flat
            else:
                g = g + state.l2 * flat
        kernels.adam_update(flat, np.ascontiguousarray(g), state.m[name], state.v[name], lr, state.beta1, state.beta2, state.eps, t)


def zero_grads(params: dict[str, Tensor] | Iterable[Tensor]) -> None:
    it = params.values() if isinstance(params, dict) else params
    for p in it:
        p.grad = None


def linear_decay_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr scaled by (1 - step/total_steps), floored at zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return base_lr * max(0.0, 1.0 - step / total_steps)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``fn()`` against central differences.

    Returns the max relative error |a - n| / max(1, |a|, |n|) over all
    checked coordinates (all coordinates, or ``sample`` per tensor drawn
    with ``rng``).  ``fn`` must rebuild its graph on every call.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        if sample is None or sample >= flat.size:
            coords = range(flat.size)
        else:
            if rng is None:
                raise ValueError("sampled grad_check needs an rng")
            coords = rng.choice(flat.size, size=sample, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            rel = abs(aflat[i] - num) / max(1.0, abs(aflat[i]), abs(num))
            worst = max(worst, rel)
    return worst


def param(rng: np.random.Generator, shape: tuple[int, ...], scale: float | None = None) -> Tensor:
    """Gaussian-initialized trainable tensor; default scale 1/sqrt(fan_in)."""
    if scale is None:
        scale = 1.0 / math.sqrt(max(1, shape[0]))
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
