"""Seeded sampling, log-space helpers and tridiagonal solves.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ParameterError, SingularSystemError

LOG_2PI = math.log(2.0 * math.pi)


class SeededRng:
    """PCG64 stream keyed by ``(seed, stream)``.

    Normal deviates come from the cosine branch of Box-Muller applied to
    pairs of uniforms, so ``normal(size=n)`` consumes exactly ``2n``
    uniforms and equals ``n`` successive scalar draws.
    """

    def __init__(self, seed: int, stream: int = 0, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self.stream = int(stream)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list[SeededRng]:
        """Independent child streams; child ``i`` depends only on ``(seed, stream, i)``
        provided no earlier spawn happened on this object."""
        return [SeededRng(self.seed, self.stream, _seq=s) for s in self._seq.spawn(n)]

    def child(self, key: int) -> SeededRng:
        """Deterministic child stream addressed by ``key`` (no internal state change)."""
        seq = np.random.SeedSequence(self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + (int(key),))
        return SeededRng(self.seed, self.stream, _seq=seq)

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = self._gen.random(2 * n)
        z = np.sqrt(-2.0 * np.log1p(-u[0::2])) * np.cos(2.0 * np.pi * u[1::2])
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers on the closed range ``[low, high]``."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def bernoulli(self, p: float) -> int:
        return int(self._gen.random() < p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """Indices drawn with replacement."""
        return self._gen.integers(0, n, size=size)


def gaussian_sample(rng: SeededRng, mean: float, std: float) -> float:
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    return mean + std * rng.normal()


def log_gaussian_pdf(x, mean, std):
    """Elementwise log N(x | mean, std^2); accepts scalars or arrays."""
    if np.any(np.asarray(std) <= 0):
        raise ParameterError("std must be positive")
    z = (np.asarray(x, dtype=float) - mean) / std
    out = -0.5 * LOG_2PI - np.log(std) - 0.5 * z * z
    return float(out) if np.ndim(out) == 0 else out


def log_sum_exp(values) -> float:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ParameterError("log_sum_exp of an empty array")
    if v.size == 1:
        return float(v[0])
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


@dataclass(frozen=True)
class Tridiagonal:
    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray

    def __post_init__(self):
        n = len(self.diag)
        if len(self.sub) != n - 1 or len(self.sup) != n - 1:
            raise ParameterError("off-diagonals must have length n-1")

    @property
    def n(self) -> int:
        return len(self.diag)

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.sub, -1) + np.diag(self.sup, 1)

    def matmul(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.diag[:, None] * x if x.ndim == 2 else self.diag * x
        out[1:] += (self.sub[:, None] if x.ndim == 2 else self.sub) * x[:-1]
        out[:-1] += (self.sup[:, None] if x.ndim == 2 else self.sup) * x[1:]
        return out


def thomas(sub: np.ndarray, diag: np.ndarray, sup: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Thomas algorithm over the last two axes of ``rhs`` (n, m).

    All arguments may carry the same leading batch shape; ``sub``/``sup``
    have length n-1 along their last axis, ``diag`` has length n.
    """
    n = diag.shape[-1]
    if rhs.shape[-2] != n:
        raise ParameterError(f"rhs has {rhs.shape[-2]} rows, system has {n}")
    cp = np.empty(diag.shape[:-1] + (max(n - 1, 0),))
    dp = np.empty(np.broadcast_shapes(rhs.shape, diag.shape + (1,)))
    pivots = np.empty(diag.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        pivots[..., 0] = diag[..., 0]
        if n > 1:
            cp[..., 0] = sup[..., 0] / pivots[..., 0]
        dp[..., 0, :] = rhs[..., 0, :] / pivots[..., 0, None]
        for i in range(1, n):
            pivots[..., i] = diag[..., i] - sub[..., i - 1] * cp[..., i - 1]
            if i < n - 1:
                cp[..., i] = sup[..., i] / pivots[..., i]
            dp[..., i, :] = (rhs[..., i, :] - sub[..., i - 1, None] * dp[..., i - 1, :]) / pivots[..., i, None]
    if np.any(pivots == 0):
        raise SingularSystemError("zero pivot in tridiagonal solve")
    for i in range(n - 2, -1, -1):
        dp[..., i, :] -= cp[..., i, None] * dp[..., i + 1, :]
    return dp


def tridiag_solve(sys: Tridiagonal, rhs: np.ndarray) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    vector = rhs.ndim == 1
    x = thomas(np.asarray(sys.sub, float), np.asarray(sys.diag, float), np.asarray(sys.sup, float),
               rhs[:, None] if vector else rhs)
    return x[:, 0] if vector else x


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not eps > 0:
        raise ParameterError("eps must be positive")
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g
