"""Differentiable primitives.

Every op validates shapes explicitly. There is no implicit broadcasting; the
only mixed-shape forms are tensor-by-python-scalar and ``matmul`` against a
shared 2-D weight. Use :func:`expand` or :func:`take` to align shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, get_dtype, record
from .. import kernels

LOG_EPS = 1e-12


class ShapeError(ValueError):
    pass


def _mismatch(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise _mismatch(op, a.shape, b.shape)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return record(a.data + c, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _same("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("sub", a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("mul", a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return record(a.data * m, (a,), lambda g: (g * m,), "relu")


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return record(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    """Natural log with inputs floored at ``LOG_EPS``."""
    a = as_tensor(a)
    x = a.data
    safe = np.maximum(x, LOG_EPS)
    live = x >= LOG_EPS
    return record(np.log(safe), (a,), lambda g: (g * live / safe,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ------------------------------------------------------------------ structure

def matmul(a, b) -> Tensor:
    """``a @ b`` for equal-rank batched operands or a stack against a 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _mismatch("matmul", a.shape, b.shape)
    shared = b.ndim == 2
    if not shared and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
        raise _mismatch("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        if ad.ndim == 1:
            ga = g @ bd.T
            gb = np.outer(ad, g)
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T (+ bias)`` with ``weight`` stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise _mismatch("linear", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise _mismatch("linear(bias)", weight.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ wd
        g2 = g.reshape(-1, wd.shape[0])
        gw = g2.T @ xd.reshape(-1, wd.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, parents, backward, "linear")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise _mismatch("concat", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return record(out, ts, lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def index(a, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, key, g)
        return (out,)

    return record(a.data[key], (a,), backward, "index")


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather rows ``a[idx]`` (embedding lookup)."""
    if axis != 0:
        raise ValueError("take only supports axis=0")
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return record(a.data[idx], (a,), backward, "take")


def slice_(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    return index(a, tuple(key))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(a, axis: int, n: int) -> Tensor:
    """Repeat a size-1 axis ``n`` times (explicit broadcast)."""
    a = as_tensor(a)
    if a.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of {a.shape} is not 1")
    reps = [1] * a.ndim
    reps[axis] = n
    return record(np.tile(a.data, reps), (a,), lambda g: (g.sum(axis=axis, keepdims=True),), "expand")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(out), (a,), backward, "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum(a), 1.0 / a.data.size)


# -------------------------------------------------------------- normalisation

def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax; entries where ``mask`` is False get probability 0."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise _mismatch("softmax(mask)", x.shape, mask.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = e.sum(axis=axis, keepdims=True)
    y = e / np.where(z > 0, z, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (a,), backward, "softmax")


def l2_norm(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g / safe, axis) * x,)

    return record(n, (a,), backward, "l2_norm")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _mismatch("layer_norm", x.shape, gain.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gain.data + bias.data

    def backward(g):
        gd = g.reshape(-1, d)
        gb = gd.sum(axis=0)
        gg = (gd * xh.reshape(-1, d)).sum(axis=0)
        gxh = g * gain.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record(out, (x, gain, bias), backward, "layer_norm")


def dropout(a, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout whose mask comes from the caller's seeded stream."""
    a = as_tensor(a)
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    keep = keep.astype(a.data.dtype)
    return record(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ------------------------------------------------------------- fused kernels

def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """One GRU step: r, z gates and candidate n stacked as [r; z; n] in the weights.

    h' = (1 - z) * n + z * h, n = tanh(W_in x + b_in + r * (W_hn h + b_hn)).
    """
    x, h, w_ih, w_hh, b_ih, b_hh = map(as_tensor, (x, h, w_ih, w_hh, b_ih, b_hh))
    H = h.shape[-1]
    if w_ih.shape != (3 * H, x.shape[-1]) or w_hh.shape != (3 * H, H):
        raise _mismatch("gru_cell", x.shape, w_ih.shape)
    if b_ih.shape != (3 * H,) or b_hh.shape != (3 * H,) or x.shape[:-1] != h.shape[:-1]:
        raise _mismatch("gru_cell", h.shape, b_ih.shape)
    xd, hd = x.data, h.data
    gi = xd @ w_ih.data.T + b_ih.data
    gh = hd @ w_hh.data.T + b_hh.data
    r = _sigmoid(gi[..., :H] + gh[..., :H])
    z = _sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    hn = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * hn)
    out = (1.0 - z) * n + z * hd

    def backward(g):
        gn = g * (1.0 - z)
        gz = g * (hd - n)
        gh_prev = g * z
        dn = gn * (1.0 - n * n)
        dz = gz * z * (1.0 - z)
        dr = dn * hn * r * (1.0 - r)
        dgi = np.concatenate([dr, dz, dn], axis=-1)
        dgh = np.concatenate([dr, dz, dn * r], axis=-1)
        gx = dgi @ w_ih.data
        gh_prev = gh_prev + dgh @ w_hh.data
        dgi2 = dgi.reshape(-1, 3 * H)
        dgh2 = dgh.reshape(-1, 3 * H)
        gw_ih = dgi2.T @ xd.reshape(-1, xd.shape[-1])
        gw_hh = dgh2.T @ hd.reshape(-1, H)
        return gx, gh_prev, gw_ih, gw_hh, dgi2.sum(axis=0), dgh2.sum(axis=0)

    return record(out, (x, h, w_ih, w_hh, b_ih, b_hh), backward, "gru_cell")


def tucker3(core, v1, v2, v3, rows=None) -> Tensor:
    """Three-mode product ``sum_ijk core[i,j,k] v1[i] v2[j] v3[k]``.

    Vectors give a scalar. With stacked inputs the product is taken row-wise;
    ``rows`` maps each row of ``v3`` to a row of ``v1``/``v2`` so a query's
    mode-1/2 contraction is shared by all of its candidates.
    """
    core, v1, v2, v3 = map(as_tensor, (core, v1, v2, v3))
    I, J, K = core.shape
    vector = v1.ndim == 1
    a, b, c = (v1.data[None], v2.data[None], v3.data[None]) if vector else (v1.data, v2.data, v3.data)
    if a.shape[1] != I or b.shape[1] != J or c.shape[1] != K or a.shape[0] != b.shape[0]:
        raise ShapeError(f"tucker3: core {core.shape} vs v1 {v1.shape}, v2 {v2.shape}, v3 {v3.shape}")
    if rows is None:
        if c.shape[0] != a.shape[0]:
            raise _mismatch("tucker3", v1.shape, v3.shape)
        rows = np.arange(a.shape[0])
    else:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.shape != (c.shape[0],):
            raise _mismatch("tucker3(rows)", rows.shape, v3.shape)
    W = core.data
    M = kernels.tucker_mode12(W, a, b)  # (Q, K)
    Mr = M[rows]
    out = (Mr * c).sum(axis=1)

    def backward(g):
        g = np.atleast_1d(g)
        gM = np.zeros_like(M)
        np.add.at(gM, rows, g[:, None] * c)
        gc = g[:, None] * Mr
        Q = a.shape[0]
        ab = (a[:, :, None] * b[:, None, :]).reshape(Q, I * J)
        gW = (ab.T @ gM).reshape(I, J, K)
        T = (gM @ W.reshape(I * J, K).T).reshape(Q, I, J)
        ga = np.matmul(T, b[:, :, None])[..., 0]
        gb = np.matmul(a[:, None, :], T)[:, 0, :]
        if vector:
            return gW, ga[0], gb[0], gc[0]
        return gW, ga, gb, gc

    return record(out[0] if vector else out, (core, v1, v2, v3), backward, "tucker3")


def time_encoding(dt, omega, phi) -> Tensor:
    """``sqrt(1/d) * cos(omega * dt + phi)`` for every entry of the constant ``dt``."""
    omega, phi = as_tensor(omega), as_tensor(phi)
    d = omega.shape[0]
    if omega.shape != (d,) or phi.shape != (d,):
        raise _mismatch("time_encoding", omega.shape, phi.shape)
    dt = np.asarray(dt, dtype=get_dtype())
    arg = dt[..., None] * omega.data + phi.data
    s = np.sqrt(1.0 / d)
    out = s * np.cos(arg)

    def backward(g):
        sg = -s * np.sin(arg) * g
        flat = sg.reshape(-1, d)
        return (flat * dt.reshape(-1, 1)).sum(axis=0), flat.sum(axis=0)

    return record(out, (omega, phi), backward, "time_encoding")
