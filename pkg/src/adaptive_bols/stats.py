"""Normal distribution helpers, samplers and counter-based random streams."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "RandomStream",
    "derive_key",
    "normal_cdf",
    "normal_sf",
    "normal_pdf",
    "normal_quantile",
    "beta_sample",
    "gaussian_sample",
    "ks_distance",
]


def normal_cdf(x):
    """Standard normal CDF. Accepts scalars or arrays."""
    out = special.ndtr(x)
    return float(out) if np.ndim(out) == 0 else out


def normal_sf(x):
    """Upper tail ``1 - Phi(x)`` without cancellation for large ``x``."""
    out = special.ndtr(np.negative(x))
    return float(out) if np.ndim(out) == 0 else out


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return float(out) if out.ndim == 0 else out


def normal_quantile(p):
    """Inverse standard normal CDF.

    Raises ``ValueError`` outside the open unit interval.
    """
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise ValueError("normal_quantile needs p in (0, 1)")
    out = special.ndtri(arr)
    return float(out) if out.ndim == 0 else out


def derive_key(*parts: int) -> int:
    """Hash a tuple of integers into a 64-bit stream key.

    Parts are packed as signed 64-bit words, so keys are stable across
    platforms and Python versions.
    """
    h = hashlib.blake2b(digest_size=8, person=b"bols-rng")
    for part in parts:
        h.update(struct.pack("<q", int(part)))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RandomStream:
    """A Philox stream addressed by a 64-bit key and a 64-bit counter.

    Streams are cheap to build, so every (replication, role) pair gets its
    own and nothing is ever shared between workers.
    """

    key: int
    counter: int = 0

    def __post_init__(self):
        if not (0 <= self.key < 2**64 and 0 <= self.counter < 2**64):
            raise ValueError("key and counter must be unsigned 64-bit integers")

    @classmethod
    def from_parts(cls, *parts: int) -> "RandomStream":
        return cls(derive_key(*parts))

    def bit_generator(self) -> np.random.Philox:
        return np.random.Philox(key=self.key, counter=self.counter)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(self.bit_generator())

    def advanced(self, steps: int) -> "RandomStream":
        """Jump ``steps`` Philox blocks ahead in O(1)."""
        return RandomStream(self.key, (self.counter + steps) % 2**64)

    def raw(self, n: int) -> np.ndarray:
        """First ``n`` raw 64-bit outputs, used for golden-vector checks."""
        return self.bit_generator().random_raw(n)


def beta_sample(alpha, beta, rng: np.random.Generator, size=None):
    if np.any(np.asarray(alpha) <= 0) or np.any(np.asarray(beta) <= 0):
        raise ValueError("beta parameters must be positive")
    return rng.beta(alpha, beta, size)


def gaussian_sample(mean, sd, rng: np.random.Generator, size=None):
    if np.any(np.asarray(sd) <= 0):
        raise ValueError("sd must be positive")
    return mean + sd * rng.standard_normal(size)


def ks_distance(sample, cdf=normal_cdf) -> float:
    """Kolmogorov distance sup |F_n(x) - F(x)| between a sample and ``cdf``."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("ks_distance needs a non-empty sample")
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - f)
    d_minus = np.max(f - (i - 1) / n)
    return float(max(d_plus, d_minus))


_GL_NODES = {}


def _gauss_legendre(k: int):
    if k not in _GL_NODES:
        _GL_NODES[k] = np.polynomial.legendre.leggauss(k)
    return _GL_NODES[k]


def prob_beta_greater(a1, b1, a0, b0, nodes: int = 64, tail: float = 1e-13):
    """``P(X1 > X0)`` for independent ``X1 ~ Beta(a1, b1)``, ``X0 ~ Beta(a0, b0)``.

    Gauss-Legendre quadrature of one density against the other CDF.  The
    tighter of the two posteriors supplies the density and its
    ``[tail, 1 - tail]`` quantile window is the integration range, so the
    integrand stays smooth on the grid.  Vectorized over the parameters.
    """
    a1, b1, a0, b0 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a1, b1, a0, b0)))
    if np.any(a1 <= 0) or np.any(b1 <= 0) or np.any(a0 <= 0) or np.any(b0 <= 0):
        raise ValueError("beta parameters must be positive")

    def var(a, b):
        s = a + b
        return a * b / (s * s * (s + 1.0))

    use1 = var(a1, b1) <= var(a0, b0)
    da, db = np.where(use1, a1, a0), np.where(use1, b1, b0)
    oa, ob = np.where(use1, a0, a1), np.where(use1, b0, b1)
    lo = special.betaincinv(da, db, tail)[..., None]
    hi = special.betaincinv(da, db, 1.0 - tail)[..., None]
    t, w = _gauss_legendre(nodes)
    half = 0.5 * (hi - lo)
    x = lo + half * (t + 1.0)
    logpdf = ((da[..., None] - 1.0) * np.log(x) + (db[..., None] - 1.0) * np.log1p(-x)
              - special.betaln(da, db)[..., None])
    other_cdf = special.betainc(oa[..., None], ob[..., None], x)
    # density arm is X1: P(X1 > X0) = E[F0(X1)]; otherwise 1 - E[F1(X0)]
    inner = np.where(use1[..., None], other_cdf, 1.0 - other_cdf)
    dens = w * np.exp(logpdf)
    # dividing by the quadrature mass removes the truncated tails to first order
    q = np.clip((dens * inner).sum(axis=-1) / dens.sum(axis=-1), 0.0, 1.0)
    return float(q) if q.ndim == 0 else q
