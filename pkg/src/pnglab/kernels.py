"""Numeric hot-path kernels with two interchangeable backends.

Every kernel exists twice: a plain numpy version (suffix ``_np``) and a
numba ``@njit`` version (suffix ``_nb``).  The module-level names used by
the rest of the package (``softmax_fwd`` etc.) are rebound by
:func:`select_backend`.  The default backend is numba when importable,
unless the environment variable ``PNGLAB_NUMBA`` is set to ``0``,
``false`` or ``off``.

All kernels take and return float64 C-contiguous arrays; id arrays are
int64.  Shapes are 2-D unless stated otherwise (callers flatten leading
dims).  The two backends agree to ~1e-13 relative (summation order may
differ in the last ulps); within one backend results are bit-exact for
identical inputs.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# softmax over the last axis of a 2-D array


def softmax_fwd_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@njit(cache=True)
def softmax_fwd_nb(x):
    n, m = x.shape
    out = np.empty((n, m))
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            v = np.exp(x[i, j] - mx)
            out[i, j] = v
            s += v
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


def softmax_bwd_np(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    inner = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - inner)


@njit(cache=True)
def softmax_bwd_nb(y, dy):
    n, m = y.shape
    dx = np.empty((n, m))
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner += y[i, j] * dy[i, j]
        for j in range(m):
            dx[i, j] = y[i, j] * (dy[i, j] - inner)
    return dx


# ---------------------------------------------------------------------------
# layer norm over the last axis; backward consumes the cached normalized
# input and reciprocal std


def layer_norm_fwd_np(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


@njit(cache=True)
def layer_norm_fwd_nb(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty((n, d))
    xhat = np.empty((n, d))
    rstd = np.empty(n)
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            t = x[i, j] - mean
            var += t * t
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mean) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


def layer_norm_bwd_np(xhat, rstd, gain, dy):
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias


@njit(cache=True)
def layer_norm_bwd_nb(xhat, rstd, gain, dy):
    n, d = xhat.shape
    dx = np.empty((n, d))
    dgain = np.zeros(d)
    dbias = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = dy[i, j] * gain[j]
            m1 += g
            m2 += g * xhat[i, j]
        m1 /= d
        m2 /= d
        r = rstd[i]
        for j in range(d):
            g = dy[i, j] * gain[j]
            dx[i, j] = r * (g - m1 - xhat[i, j] * m2)
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# fused LSTM gate nonlinearity: z is the pre-activation (n, 4h) in gate
# order [input, forget, cell, output]; output packs [h_next | c_next] as
# (n, 2h) so the autodiff layer sees a single node


def lstm_gates_fwd_np(z, c_prev):
    n, four_h = z.shape
    h = four_h // 4
    gi = 1.0 / (1.0 + np.exp(-z[:, 0 * h : 1 * h]))
    gf = 1.0 / (1.0 + np.exp(-z[:, 1 * h : 2 * h]))
    gg = np.tanh(z[:, 2 * h : 3 * h])
    go = 1.0 / (1.0 + np.exp(-z[:, 3 * h : 4 * h]))
    c_next = gf * c_prev + gi * gg
    tanh_c = np.tanh(c_next)
    out = np.empty((n, 2 * h))
    out[:, :h] = go * tanh_c
    out[:, h:] = c_next
    gates = np.concatenate([gi, gf, gg, go], axis=1)
    return out, gates, tanh_c


@njit(cache=True)
def lstm_gates_fwd_nb(z, c_prev):
    n, four_h = z.shape
    h = four_h // 4
    out = np.empty((n, 2 * h))
    gates = np.empty((n, four_h))
    tanh_c = np.empty((n, h))
    for i in range(n):
        for j in range(h):
            gi = 1.0 / (1.0 + np.exp(-z[i, j]))
            gf = 1.0 / (1.0 + np.exp(-z[i, h + j]))
            gg = np.tanh(z[i, 2 * h + j])
            go = 1.0 / (1.0 + np.exp(-z[i, 3 * h + j]))
            c = gf * c_prev[i, j] + gi * gg
            t = np.tanh(c)
            gates[i, j] = gi
            gates[i, h + j] = gf
            gates[i, 2 * h + j] = gg
            gates[i, 3 * h + j] = go
            tanh_c[i, j] = t
            out[i, j] = go * t
            out[i, h + j] = c
    return out, gates, tanh_c


def lstm_gates_bwd_np(gates, tanh_c, c_prev, dout):
    n, four_h = gates.shape
    h = four_h // 4
    gi = gates[:, 0 * h : 1 * h]
    gf = gates[:, 1 * h : 2 * h]
    gg = gates[:, 2 * h : 3 * h]
    go = gates[:, 3 * h : 4 * h]
    dh = dout[:, :h]
    dc = dout[:, h:] + dh * go * (1.0 - tanh_c * tanh_c)
    dz = np.empty((n, four_h))
    dz[:, 0 * h : 1 * h] = dc * gg * gi * (1.0 - gi)
    dz[:, 1 * h : 2 * h] = dc * c_prev * gf * (1.0 - gf)
    dz[:, 2 * h : 3 * h] = dc * gi * (1.0 - gg * gg)
    dz[:, 3 * h : 4 * h] = dh * tanh_c * go * (1.0 - go)
    dc_prev = dc * gf
    return dz, dc_prev


@njit(cache=True)
def lstm_gates_bwd_nb(gates, tanh_c, c_prev, dout):
    n, four_h = gates.shape
    h = four_h // 4
    dz = np.empty((n, four_h))
    dc_prev = np.empty((n, h))
    for i in range(n):
        for j in range(h):
            gi = gates[i, j]
            gf = gates[i, h + j]
            gg = gates[i, 2 * h + j]
            go = gates[i, 3 * h + j]
            t = tanh_c[i, j]
            dh = dout[i, j]
            dc = dout[i, h + j] + dh * go * (1.0 - t * t)
            dz[i, j] = dc * gg * gi * (1.0 - gi)
            dz[i, h + j] = dc * c_prev[i, j] * gf * (1.0 - gf)
            dz[i, 2 * h + j] = dc * gi * (1.0 - gg * gg)
            dz[i, 3 * h + j] = dh * t * go * (1.0 - go)
            dc_prev[i, j] = dc * gf
    return dz, dc_prev


# ---------------------------------------------------------------------------
# Adam update, in place on flat views; t is the 1-based step count after
# incrementing, g already includes any coupled L2 term


def adam_update_np(p, g, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


@njit(cache=True)
def adam_update_nb(p, g, m, v, lr, beta1, beta2, eps, t):
    c1 = 1.0 / (1.0 - beta1**t)
    c2 = 1.0 / (1.0 - beta2**t)
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi * c1) / (np.sqrt(vi * c2) + eps)


# ---------------------------------------------------------------------------
# fused row-wise cross entropy: returns per-row loss and softmax probs


def cross_entropy_fwd_np(logits, targets):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    probs = e / z[:, None]
    rows = np.arange(logits.shape[0])
    losses = np.log(z) - shifted[rows, targets]
    return losses, probs


@njit(cache=True)
def cross_entropy_fwd_nb(logits, targets):
    n, m = logits.shape
    losses = np.empty(n)
    probs = np.empty((n, m))
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, m):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(m):
            v = np.exp(logits[i, j] - mx)
            probs[i, j] = v
            s += v
        inv = 1.0 / s
        for j in range(m):
            probs[i, j] *= inv
        losses[i] = np.log(s) - (logits[i, targets[i]] - mx)
    return losses, probs


# ---------------------------------------------------------------------------
# row scatter-add for embedding gradients: table[ids[i]] += rows[i]


def scatter_add_rows_np(table, ids, rows):
    np.add.at(table, ids, rows)


@njit(cache=True)
def scatter_add_rows_nb(table, ids, rows):
    n, d = rows.shape
    for i in range(n):
        r = ids[i]
        for j in range(d):
            table[r, j] += rows[i, j]


# ---------------------------------------------------------------------------
# Levenshtein distance between two int sequences (unit costs)


def levenshtein_np(a: np.ndarray, b: np.ndarray) -> int:
    la, lb = len(a), len(b)
    prev = np.arange(lb + 1)
    cur = np.empty(lb + 1, dtype=np.int64)
    for i in range(1, la + 1):
        cur[0] = i
        sub = prev[:-1] + (b != a[i - 1])
        dele = prev[1:] + 1
        np.minimum(sub, dele, out=cur[1:])
        for j in range(1, lb + 1):
            ins = cur[j - 1] + 1
            if ins < cur[j]:
                cur[j] = ins
        prev, cur = cur, prev
    return int(prev[lb])


@njit(cache=True)
def levenshtein_nb(a, b):
    la = a.shape[0]
    lb = b.shape[0]
    prev = np.empty(lb + 1, dtype=np.int64)
    cur = np.empty(lb + 1, dtype=np.int64)
    for j in range(lb + 1):
        prev[j] = j
    for i in range(1, la + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, lb + 1):
            cost = 0 if b[j - 1] == ai else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        for j in range(lb + 1):
            prev[j] = cur[j]
    return prev[lb]


# ---------------------------------------------------------------------------
# backend selection

_KERNEL_NAMES = [
    "softmax_fwd",
    "softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "lstm_gates_fwd",
    "lstm_gates_bwd",
    "adam_update",
    "cross_entropy_fwd",
    "scatter_add_rows",
    "levenshtein",
]

ACTIVE_BACKEND = ""


def select_backend(name: str) -> None:
    """Rebind the public kernel names to one backend ("numba" or "numpy").

    Callers that want to observe the switch must call kernels via module
    attribute (``kernels.softmax_fwd(...)``), which the engine does.
    """
    global ACTIVE_BACKEND
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend: {name!r}")
    suffix = "_nb" if name == "numba" else "_np"
    g = globals()
    for kn in _KERNEL_NAMES:
        g[kn] = g[kn + suffix]
    ACTIVE_BACKEND = name


def _default_backend() -> str:
    flag = os.environ.get("PNGLAB_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return "numpy"
    return "numba" if HAS_NUMBA else "numpy"


select_backend(_default_backend())
