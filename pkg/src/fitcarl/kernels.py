"""Hot numeric loops, each with a numba-compiled and a pure-numpy path.

``FITCARL_NUMBA=0`` forces the numpy path; otherwise numba is used when it is
importable. Both paths return identical results up to float reassociation, and
the integer-valued kernels (selection, counting) are exactly equal.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


_use_numba = NUMBA_AVAILABLE and os.environ.get("FITCARL_NUMBA", "1") != "0"


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` at runtime (benchmarks, parity tests)."""
    global _use_numba
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend() -> str:
    return "numba" if _use_numba else "numpy"


# ----------------------------------------------------------------- tucker3

def _tucker_mode12_np(W, a, b):
    # (Q,I) x (I,J,K) -> (Q,J,K), then contract J with b
    t = np.tensordot(a, W, axes=(1, 0))
    return np.einsum("qjk,qj->qk", t, b)


@njit(cache=True)
def _tucker_mode12_nb(W, a, b):
    Q = a.shape[0]
    I, J, K = W.shape
    # mode-1 product through BLAS, then a fused loop over J
    t = np.dot(a, W.reshape(I, J * K))
    out = np.zeros((Q, K), dtype=W.dtype)
    for q in range(Q):
        for j in range(J):
            bj = b[q, j]
            base = j * K
            for k in range(K):
                out[q, k] += bj * t[q, base + k]
    return out


def tucker_mode12(W: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``M[q, k] = sum_ij W[i, j, k] a[q, i] b[q, j]``."""
    if _use_numba:
        return _tucker_mode12_nb(np.ascontiguousarray(W), np.ascontiguousarray(a), np.ascontiguousarray(b))
    return _tucker_mode12_np(W, a, b)


# ------------------------------------------------------------ time scores

def _time_scores_np(dt, w, omega, phi):
    s = np.sqrt(1.0 / omega.shape[0])
    return s * (np.cos(dt[:, None] * omega[None, :] + phi[None, :]) @ w)


@njit(cache=True)
def _time_scores_nb(dt, w, omega, phi):
    n = dt.shape[0]
    d = omega.shape[0]
    s = np.sqrt(1.0 / d)
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for k in range(d):
            acc += w[k] * np.cos(omega[k] * dt[i] + phi[k])
        out[i] = s * acc
    return out


def time_scores(dt: np.ndarray, w: np.ndarray, omega: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """``w . h_dt`` for every entry of ``dt`` without materialising ``h_dt``."""
    dt = np.asarray(dt, dtype=np.float64)
    w, omega, phi = (np.asarray(v, dtype=np.float64) for v in (w, omega, phi))
    if _use_numba:
        return _time_scores_nb(dt, w, omega, phi)
    return _time_scores_np(dt, w, omega, phi)


# ------------------------------------------------------------ segment top-k

def _segment_topk_np(seg_ptr, scores, cap):
    n_seg = len(seg_ptr) - 1
    lengths = np.diff(seg_ptr)
    seg = np.repeat(np.arange(n_seg), lengths)
    pos = np.arange(len(scores))
    order = np.lexsort((pos, -scores, seg))
    rank = np.arange(len(scores)) - np.repeat(seg_ptr[:-1], lengths)
    keep = order[rank < cap]
    # restore (segment, score desc, position asc) order; lexsort already gives it
    counts = np.minimum(lengths, cap)
    out_ptr = np.zeros(n_seg + 1, dtype=np.int64)
    np.cumsum(counts, out=out_ptr[1:])
    return keep.astype(np.int64), out_ptr


@njit(cache=True)
def _segment_topk_nb(seg_ptr, scores, cap):
    n_seg = seg_ptr.shape[0] - 1
    out_ptr = np.zeros(n_seg + 1, dtype=np.int64)
    for s in range(n_seg):
        m = seg_ptr[s + 1] - seg_ptr[s]
        out_ptr[s + 1] = out_ptr[s] + min(m, cap)
    keep = np.empty(out_ptr[n_seg], dtype=np.int64)
    for s in range(n_seg):
        lo = seg_ptr[s]
        m = seg_ptr[s + 1] - lo
        if m == 0:
            continue
        # stable sort of -score keeps position order among ties
        order = np.argsort(-scores[lo:lo + m], kind="mergesort")
        k = min(m, cap)
        for i in range(k):
            keep[out_ptr[s] + i] = lo + order[i]
    return keep, out_ptr


def segment_topk(seg_ptr: np.ndarray, scores: np.ndarray, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Per segment, indices of the ``cap`` best scores (ties: lower index first).

    Returns flat indices into ``scores`` grouped by segment and a new pointer array.
    """
    seg_ptr = np.asarray(seg_ptr, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if _use_numba:
        return _segment_topk_nb(seg_ptr, scores, int(cap))
    return _segment_topk_np(seg_ptr, scores, int(cap))


# ------------------------------------------------------- concept counting

def _concept_counts_np(rel, obj, ent_ptr, ent_concepts, n_rel, n_concepts):
    counts = np.zeros((n_rel, n_concepts), dtype=np.int64)
    lengths = ent_ptr[obj + 1] - ent_ptr[obj]
    fact = np.repeat(np.arange(len(obj)), lengths)
    offs = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    cidx = ent_concepts[ent_ptr[obj][fact] + offs]
    np.add.at(counts, (rel[fact], cidx), 1)
    return counts


@njit(cache=True)
def _concept_counts_nb(rel, obj, ent_ptr, ent_concepts, n_rel, n_concepts):
    counts = np.zeros((n_rel, n_concepts), dtype=np.int64)
    for f in range(rel.shape[0]):
        o = obj[f]
        for p in range(ent_ptr[o], ent_ptr[o + 1]):
            counts[rel[f], ent_concepts[p]] += 1
    return counts


def concept_counts(rel, obj, ent_ptr, ent_concepts, n_rel: int, n_concepts: int) -> np.ndarray:
    """``counts[r, c]`` = number of (fact of r, concept c of its object) pairs."""
    args = (
        np.asarray(rel, dtype=np.int64),
        np.asarray(obj, dtype=np.int64),
        np.asarray(ent_ptr, dtype=np.int64),
        np.asarray(ent_concepts, dtype=np.int64),
    )
    if _use_numba:
        return _concept_counts_nb(*args, int(n_rel), int(n_concepts))
    return _concept_counts_np(*args, int(n_rel), int(n_concepts))


# ---------------------------------------------------- ComplEx BCE gradient

def _complex_parts(E, R, s, r, o):
    h = E.shape[1] // 2
    sr, si = E[s, :h], E[s, h:]
    rr, ri = R[r, :h], R[r, h:]
    orr, oi = E[o, :h], E[o, h:]
    return h, sr, si, rr, ri, orr, oi


def _complex_bce_np(E, R, s, r, o, y):
    h, sr, si, rr, ri, orr, oi = _complex_parts(E, R, s, r, o)
    score = (sr * rr * orr + si * rr * oi + sr * ri * oi - si * ri * orr).sum(axis=1)
    # BCE with logits, mean over the batch
    loss = np.logaddexp(0.0, score) - y * score
    p = 1.0 / (1.0 + np.exp(-score))
    g = ((p - y) / len(y))[:, None]
    gE = np.zeros_like(E)
    gR = np.zeros_like(R)
    np.add.at(gE, s, np.concatenate([g * (rr * orr + ri * oi), g * (rr * oi - ri * orr)], axis=1))
    np.add.at(gE, o, np.concatenate([g * (sr * rr - si * ri), g * (si * rr + sr * ri)], axis=1))
    np.add.at(gR, r, np.concatenate([g * (sr * orr + si * oi), g * (sr * oi - si * orr)], axis=1))
    return loss.mean(), gE, gR


@njit(cache=True)
def _complex_bce_nb(E, R, s, r, o, y):
    n = s.shape[0]
    h = E.shape[1] // 2
    gE = np.zeros_like(E)
    gR = np.zeros_like(R)
    total = 0.0
    for b in range(n):
        es, rr_, eo = s[b], r[b], o[b]
        score = 0.0
        for k in range(h):
            score += (E[es, k] * R[rr_, k] * E[eo, k] + E[es, h + k] * R[rr_, k] * E[eo, h + k]
                      + E[es, k] * R[rr_, h + k] * E[eo, h + k] - E[es, h + k] * R[rr_, h + k] * E[eo, k])
        total += max(score, 0.0) + np.log1p(np.exp(-abs(score))) - y[b] * score
        g = (1.0 / (1.0 + np.exp(-score)) - y[b]) / n
        for k in range(h):
            sr, si = E[es, k], E[es, h + k]
            rr, ri = R[rr_, k], R[rr_, h + k]
            orr, oi = E[eo, k], E[eo, h + k]
            gE[es, k] += g * (rr * orr + ri * oi)
            gE[es, h + k] += g * (rr * oi - ri * orr)
            gE[eo, k] += g * (sr * rr - si * ri)
            gE[eo, h + k] += g * (si * rr + sr * ri)
            gR[rr_, k] += g * (sr * orr + si * oi)
            gR[rr_, h + k] += g * (sr * oi - si * orr)
    return total / n, gE, gR


def complex_bce(E, R, s, r, o, y) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean binary cross-entropy of ComplEx logits and its gradients w.r.t. E and R.

    ``E`` and ``R`` store each vector as real half followed by imaginary half.
    """
    s, r, o = (np.asarray(v, dtype=np.int64) for v in (s, r, o))
    y = np.asarray(y, dtype=np.float64)
    if _use_numba:
        loss, gE, gR = _complex_bce_nb(E, R, s, r, o, y)
        return float(loss), gE, gR
    loss, gE, gR = _complex_bce_np(E, R, s, r, o, y)
    return float(loss), gE, gR
