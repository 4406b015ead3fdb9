"""MIL pooling operators with analytic gradients.

Every operator is implemented once, on a zero-padded batch ``H`` of shape
(B, S, M) with a boolean ``mask`` (B, S) marking real instances. The
per-bag functions (``max_pool``, ``abmil_pool``, ...) wrap the batched
code with B = 1. Padding is exact: padded rows never influence real
outputs or gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solveh_banded

from .errors import EmptyBagError, ParameterError
from .numerics import thomas

KINDS = ("max", "mean", "abmil", "smap", "transmil")


@dataclass
class PoolResult:
    z: np.ndarray
    attention: Optional[np.ndarray] = None


@dataclass
class AbmilParams:
    U: np.ndarray  # (L, M)
    u: np.ndarray  # (L,)

    def named(self) -> dict:
        return {"attn.U": self.U, "attn.u": self.u}

    @classmethod
    def from_named(cls, d: dict) -> AbmilParams:
        return cls(d["attn.U"], d["attn.u"])

    @classmethod
    def init(cls, m: int, hidden: int, rng) -> AbmilParams:
        return cls(rng.normal((hidden, m)) / math.sqrt(m), rng.normal(hidden) / math.sqrt(hidden))


@dataclass
class SmapConfig:
    alpha: float = 0.5
    n_neighbors: int = 1
    inner: Optional[AbmilParams] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ParameterError(f"alpha={self.alpha} outside [0, 1)")
        if self.n_neighbors < 1:
            raise ParameterError("n_neighbors must be >= 1")


@dataclass
class TransmilParams:
    """Exact multi-head self-attention stack with a class token.

    Shapes: W_Q/W_K/W_V (layers, heads, D, W); W_O (layers, W, heads*D);
    class_token (W,); positional_bias (layers, 2P+1) indexed by the clipped
    relative offset k - j between instances; W_in (W, M) optional input
    projection (identity when absent, then W = M).
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    class_token: np.ndarray
    positional_bias: np.ndarray
    W_in: Optional[np.ndarray] = None

    @property
    def n_layers(self) -> int:
        return self.W_Q.shape[0]

    @property
    def n_heads(self) -> int:
        return self.W_Q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.W_Q.shape[2]

    @property
    def width(self) -> int:
        return self.W_Q.shape[3]

    @property
    def max_offset(self) -> int:
        return (self.positional_bias.shape[1] - 1) // 2

    def named(self) -> dict:
        d = {"tm.W_Q": self.W_Q, "tm.W_K": self.W_K, "tm.W_V": self.W_V, "tm.W_O": self.W_O,
             "tm.cls": self.class_token, "tm.pos_bias": self.positional_bias}
        if self.W_in is not None:
            d["tm.W_in"] = self.W_in
        return d

    @classmethod
    def from_named(cls, d: dict) -> TransmilParams:
        return cls(d["tm.W_Q"], d["tm.W_K"], d["tm.W_V"], d["tm.W_O"], d["tm.cls"], d["tm.pos_bias"],
                   d.get("tm.W_in"))

    @classmethod
    def init(cls, m: int, rng, width: Optional[int] = None, n_layers: int = 1, n_heads: int = 2,
             head_dim: Optional[int] = None, max_offset: int = 8) -> TransmilParams:
        width = m if width is None else width
        head_dim = head_dim or max(1, width // n_heads)
        shape = (n_layers, n_heads, head_dim, width)
        w_in = rng.normal((width, m)) / math.sqrt(m) if width != m else None
        return cls(
            W_Q=rng.normal(shape) / math.sqrt(width),
            W_K=rng.normal(shape) / math.sqrt(width),
            W_V=rng.normal(shape) / math.sqrt(width),
            W_O=rng.normal((n_layers, width, n_heads * head_dim)) / math.sqrt(n_heads * head_dim),
            class_token=rng.normal(width) / math.sqrt(width),
            positional_bias=np.zeros((n_layers, 2 * max_offset + 1)),
            W_in=w_in,
        )


def pack(mats) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad a list of (S_i, M) arrays into (B, S_max, M) plus mask."""
    if any(m.shape[0] == 0 for m in mats):
        raise EmptyBagError("bag with zero instances")
    sizes = [m.shape[0] for m in mats]
    H = np.zeros((len(mats), max(sizes), mats[0].shape[1]))
    mask = np.zeros((len(mats), max(sizes)), dtype=bool)
    for i, m in enumerate(mats):
        H[i, :sizes[i]] = m
        mask[i, :sizes[i]] = True
    return H, mask


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.where(mask, logits, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    return a * (da - np.sum(a * da, axis=-1, keepdims=True))


# --- max / mean ------------------------------------------------------------

def _max_fwd(H, mask):
    idx = np.argmax(np.where(mask[..., None], H, -np.inf), axis=1)  # first index wins ties
    z = np.take_along_axis(H, idx[:, None, :], axis=1)[:, 0, :]
    return z, idx


def _max_bwd(shape, idx, dz):
    dH = np.zeros(shape)
    np.put_along_axis(dH, idx[:, None, :], dz[:, None, :], axis=1)
    return dH


def _mean_fwd(H, mask):
    n = mask.sum(axis=1)[:, None]
    return H.sum(axis=1) / n


def _mean_bwd(mask, dz):
    n = mask.sum(axis=1)[:, None, None]
    return mask[..., None] * dz[:, None, :] / n


# --- ABMIL -----------------------------------------------------------------

def _abmil_attn_fwd(X, mask, p: AbmilParams):
    if p.U.shape[1] != X.shape[-1] or p.u.shape != (p.U.shape[0],):
        raise ParameterError(f"ABMIL params {p.U.shape}/{p.u.shape} do not fit width {X.shape[-1]}")
    T = np.tanh(X @ p.U.T)
    a = _masked_softmax(T @ p.u, mask)
    return a, T


def _abmil_attn_bwd(X, T, a, p: AbmilParams, da, need_dX=True):
    ds = _softmax_backward(a, da)
    L = T.shape[-1]
    du = T.reshape(-1, L).T @ ds.reshape(-1)
    dpre = ds[..., None] * p.u * (1.0 - T * T)
    dU = dpre.reshape(-1, L).T @ X.reshape(-1, X.shape[-1])
    dX = dpre @ p.U if need_dX else None
    return dX, {"attn.U": dU, "attn.u": du}


# --- SmAP ------------------------------------------------------------------

def _smap_solve(rhs, mask, alpha: float, n_neighbors: int):
    """Solve ((1-alpha) I + alpha L) X = rhs bag by bag, L the chain Laplacian
    over each bag's real instances. Padded rows come back as zero."""
    B, S = mask.shape
    if n_neighbors == 1:
        valid = mask.astype(float)
        edge = valid[:, 1:] * valid[:, :-1]
        deg = np.zeros((B, S))
        deg[:, 1:] += edge
        deg[:, :-1] += edge
        diag = np.where(mask, (1.0 - alpha) + alpha * deg, 1.0)
        off = -alpha * edge
        return thomas(off, diag, off, np.where(mask[..., None], rhs, 0.0))
    out = np.zeros_like(rhs)
    for b in range(B):
        s = int(mask[b].sum())
        k = min(n_neighbors, s - 1)
        # upper banded form: ab[k + i - j, j] = A[i, j]
        ab = np.zeros((k + 1, s))
        deg = np.array([min(j, n_neighbors) + min(s - 1 - j, n_neighbors) for j in range(s)], dtype=float)
        ab[k] = (1.0 - alpha) + alpha * deg
        ab[:k] = -alpha
        for d in range(1, k + 1):
            ab[k - d, :d] = 0.0
        out[b, :s] = solveh_banded(ab, rhs[b, :s]) if k > 0 else rhs[b, :s] / ab[0][:, None]
    return out


def _smap_smooth(H, mask, alpha, n_neighbors):
    """G = (1 - alpha) A^-1 H. The operator is symmetric, so it is also its own adjoint."""
    if alpha == 0.0:
        return H.copy()
    return _smap_solve((1.0 - alpha) * H, mask, alpha, n_neighbors)


def _smap_attn_fwd(H, mask, cfg: SmapConfig):
    """ABMIL attention on smoothed embeddings without forming them.

    Smoothing is linear, so tanh(G U^T) only needs the L projected columns
    smoothed, and sum_j a_j g_j = sum_j (smoothed a)_j h_j.
    """
    p = cfg.inner
    if p.U.shape[1] != H.shape[-1] or p.u.shape != (p.U.shape[0],):
        raise ParameterError(f"ABMIL params {p.U.shape}/{p.u.shape} do not fit width {H.shape[-1]}")
    B, S, M = H.shape
    P = (H.reshape(-1, M) @ p.U.T).reshape(B, S, -1)
    T = np.tanh(_smap_smooth(P, mask, cfg.alpha, cfg.n_neighbors))
    a = _masked_softmax(T @ p.u, mask)
    return a, T


def _smap_attn_bwd(H, mask, cfg: SmapConfig, T, a, da, need_dH=True):
    p = cfg.inner
    ds = _softmax_backward(a, da)
    L = T.shape[-1]
    du = T.reshape(-1, L).T @ ds.reshape(-1)
    dP = _smap_smooth(ds[..., None] * p.u * (1.0 - T * T), mask, cfg.alpha, cfg.n_neighbors)
    dU = dP.reshape(-1, L).T @ H.reshape(-1, H.shape[-1])
    dH = dP @ p.U if need_dH else None
    return dH, {"attn.U": dU, "attn.u": du}


# --- TransMIL --------------------------------------------------------------

def _offset_buckets(S: int, max_offset: int) -> np.ndarray:
    """(S+1, S+1) bucket index of each (query, key) pair; -1 where the class token is involved."""
    j = np.arange(S)
    idx = np.full((S + 1, S + 1), -1, dtype=np.int64)
    idx[1:, 1:] = np.clip(j[None, :] - j[:, None], -max_offset, max_offset) + max_offset
    return idx


def _heads(X, W, n_heads):
    """(B, T, W) x (heads, D, W) -> (B, heads, T, D) via one GEMM."""
    B, T, _ = X.shape
    D = W.shape[1]
    Y = X.reshape(B * T, -1) @ W.reshape(n_heads * D, -1).T
    return Y.reshape(B, T, n_heads, D).transpose(0, 2, 1, 3)


def _head_weight_grad(dY, X):
    """Gradient of a (heads, D, W) weight given dY (B, heads, T, D) and inputs X (B, T, W)."""
    B, nh, T, D = dY.shape
    flat = dY.transpose(0, 2, 1, 3).reshape(B * T, nh * D)
    return (flat.T @ X.reshape(B * T, -1)).reshape(nh, D, -1)


def _head_input_grad(dY, W):
    B, nh, T, D = dY.shape
    return (dY.transpose(0, 2, 1, 3).reshape(B * T, nh * D) @ W.reshape(nh * D, -1)).reshape(B, T, -1)


def _transmil_fwd(H, mask, p: TransmilParams):
    B, S, M = H.shape
    if p.W_in is not None:
        if p.W_in.shape[1] != M:
            raise ParameterError(f"W_in expects {p.W_in.shape[1]} features, got {M}")
        X0 = (H.reshape(B * S, M) @ p.W_in.T).reshape(B, S, -1)
    elif p.width != M:
        raise ParameterError(f"TransMIL width {p.width} != features {M} and no W_in")
    else:
        X0 = H
    W, nh, D = p.width, p.n_heads, p.head_dim
    X = np.concatenate([np.broadcast_to(p.class_token, (B, 1, W)), X0], axis=1)
    keymask = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)[:, None, None, :]
    buckets = _offset_buckets(S, p.max_offset)
    scale = 1.0 / math.sqrt(D)
    layers = []
    for l in range(p.n_layers):
        Q, K, V = (_heads(X, Wx[l], nh) for Wx in (p.W_Q, p.W_K, p.W_V))
        bias = np.where(buckets >= 0, p.positional_bias[l][buckets], 0.0)
        A = _masked_softmax(Q @ K.transpose(0, 1, 3, 2) * scale + bias, keymask)
        O = (A @ V).transpose(0, 2, 1, 3).reshape(B, S + 1, nh * D)
        layers.append((X, Q, K, V, A, O))
        X = X + O @ p.W_O[l].T
    z = X[:, 0, :]
    attn = A[:, :, 0, 1:].mean(axis=1) * mask
    attn = attn / attn.sum(axis=1, keepdims=True)
    return z, attn, (layers, buckets)


def _transmil_bwd(H, mask, p: TransmilParams, cache, dz, need_dH=True):
    layers, buckets = cache
    B, S, M = H.shape
    nh, D = p.n_heads, p.head_dim
    scale = 1.0 / math.sqrt(D)
    g = {k: np.zeros_like(v) for k, v in p.named().items()}
    dX = np.zeros((B, S + 1, p.width))
    dX[:, 0, :] = dz
    sel = buckets >= 0
    for l in reversed(range(p.n_layers)):
        X, Q, K, V, A, O = layers[l]
        g["tm.W_O"][l] = dX.reshape(-1, p.width).T @ O.reshape(-1, nh * D)
        dO = (dX @ p.W_O[l]).reshape(B, S + 1, nh, D).transpose(0, 2, 1, 3)
        dA = dO @ V.transpose(0, 1, 3, 2)
        dV = A.transpose(0, 1, 3, 2) @ dO
        dlog = _softmax_backward(A, dA)
        g["tm.pos_bias"][l] = np.bincount(buckets[sel], weights=dlog.sum(axis=(0, 1))[sel],
                                          minlength=p.positional_bias.shape[1])
        dQ = dlog @ K * scale
        dK = dlog.transpose(0, 1, 3, 2) @ Q * scale
        for name, Wx, dY in (("tm.W_Q", p.W_Q, dQ), ("tm.W_K", p.W_K, dK), ("tm.W_V", p.W_V, dV)):
            g[name][l] = _head_weight_grad(dY, X)
            dX = dX + _head_input_grad(dY, Wx[l])
    g["tm.cls"] = dX[:, 0, :].sum(axis=0)
    dX0 = dX[:, 1:, :] * mask[..., None]
    dH = None
    if p.W_in is not None:
        g["tm.W_in"] = dX0.reshape(-1, p.width).T @ H.reshape(-1, M)
        if need_dH:
            dH = dX0 @ p.W_in
    elif need_dH:
        dH = dX0
    return dH, g


# --- batched dispatch ------------------------------------------------------

def pool_forward_batch(kind: str, H: np.ndarray, mask: np.ndarray, params=None):
    """Forward pass on a padded batch. Returns (PoolResult, cache) where the
    result holds z (B, W) and attention (B, S) or None."""
    if kind == "max":
        z, idx = _max_fwd(H, mask)
        return PoolResult(z), idx
    if kind == "mean":
        return PoolResult(_mean_fwd(H, mask)), None
    if kind == "abmil":
        a, T = _abmil_attn_fwd(H, mask, params)
        return PoolResult(np.einsum("bs,bsm->bm", a, H), a), (H, T, a)
    if kind == "smap":
        a, T = _smap_attn_fwd(H, mask, params)
        a_s = _smap_smooth(a[..., None], mask, params.alpha, params.n_neighbors)[..., 0]
        return PoolResult(np.einsum("bs,bsm->bm", a_s, H), a), (T, a, a_s)
    if kind == "transmil":
        z, attn, cache = _transmil_fwd(H, mask, params)
        return PoolResult(z, attn), cache
    raise ParameterError(f"unknown pooling kind {kind!r}")


def pool_backward_batch(kind: str, H, mask, params, cache, dz, da=None, need_dH=True):
    """Gradients given upstream dL/dz (B, W) and optionally dL/dattention (B, S).

    Returns (dH or None, dict of parameter gradients)."""
    if kind == "max":
        return (_max_bwd(H.shape, cache, dz) if need_dH else None), {}
    if kind == "mean":
        return (_mean_bwd(mask, dz) if need_dH else None), {}
    if kind == "abmil":
        X, T, a = cache
        da_total = np.einsum("bsm,bm->bs", X, dz) if dz is not None else np.zeros_like(a)
        if da is not None:
            da_total = da_total + da
        dX, grads = _abmil_attn_bwd(X, T, a, params, da_total, need_dX=need_dH)
        if need_dH and dz is not None:
            dX = dX + a[..., None] * dz[:, None, :]
        return dX, grads
    if kind == "smap":
        T, a, a_s = cache
        da_total = np.zeros_like(a)
        if dz is not None:
            da_s = np.einsum("bsm,bm->bs", H, dz)
            da_total += _smap_smooth(da_s[..., None], mask, params.alpha, params.n_neighbors)[..., 0]
        if da is not None:
            da_total = da_total + da
        dH, grads = _smap_attn_bwd(H, mask, params, T, a, da_total, need_dH)
        if need_dH and dz is not None:
            dH = dH + a_s[..., None] * dz[:, None, :]
        return dH, grads
    if kind == "transmil":
        if da is not None:
            raise ParameterError("TransMIL attention is not differentiated")
        return _transmil_bwd(H, mask, params, cache, dz, need_dH)
    raise ParameterError(f"unknown pooling kind {kind!r}")


# --- per-bag API -----------------------------------------------------------

def _single(H) -> tuple[np.ndarray, np.ndarray]:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise ParameterError("H must be a 2-D (S, M) array")
    if H.shape[0] == 0:
        raise EmptyBagError("bag with zero instances")
    return H[None], np.ones((1, H.shape[0]), dtype=bool)


def _unbatch(res: PoolResult) -> PoolResult:
    return PoolResult(res.z[0], None if res.attention is None else res.attention[0])


def max_pool(H) -> PoolResult:
    return _unbatch(pool_forward_batch("max", *_single(H))[0])


def mean_pool(H) -> PoolResult:
    return _unbatch(pool_forward_batch("mean", *_single(H))[0])


def abmil_attention(H, p: AbmilParams) -> np.ndarray:
    Hb, mask = _single(H)
    return _abmil_attn_fwd(Hb, mask, p)[0][0]


def abmil_pool(H, p: AbmilParams) -> PoolResult:
    return _unbatch(pool_forward_batch("abmil", *_single(H), p)[0])


def smap_smooth(H, cfg: SmapConfig) -> np.ndarray:
    Hb, mask = _single(H)
    return _smap_smooth(Hb, mask, cfg.alpha, cfg.n_neighbors)[0]


def smap_pool(H, cfg: SmapConfig) -> PoolResult:
    return _unbatch(pool_forward_batch("smap", *_single(H), cfg)[0])


def transmil_pool(H, p: TransmilParams) -> PoolResult:
    return _unbatch(pool_forward_batch("transmil", *_single(H), p)[0])


def pool_forward(kind: str, H, params=None) -> PoolResult:
    return _unbatch(pool_forward_batch(kind, *_single(H), params)[0])


def pool_backward(kind: str, H, params, upstream: PoolResult):
    """Exact gradients (grad_H, grad_params) of the forward map for one bag.

    ``upstream`` carries dL/dz in ``z`` and, optionally, dL/dattention in
    ``attention`` (ABMIL and SmAP only).
    """
    if kind not in KINDS:
        raise ParameterError(f"unknown pooling kind {kind!r}")
    Hb, mask = _single(H)
    _, cache = pool_forward_batch(kind, Hb, mask, params)
    da = None if upstream.attention is None else np.asarray(upstream.attention, float)[None]
    dz = None if upstream.z is None else np.asarray(upstream.z, float)[None]
    dH, grads = pool_backward_batch(kind, Hb, mask, params, cache, dz, da)
    return dH[0], grads
