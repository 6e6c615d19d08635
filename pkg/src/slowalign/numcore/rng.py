"""Counter-based random streams and multivariate normal sampling.

Uniform words come from the Philox-4x64 block cipher keyed by ``seed``; block
``counter`` yields four 64-bit words. A draw of ``n`` uniforms consumes
``ceil(n / 4)`` blocks and advances the counter by that many, so a stream is
fully described by ``(seed, counter)``. Uniforms are ``((w >> 11) + 0.5) / 2**53``,
strictly inside (0, 1). Standard normals use Box-Muller on consecutive pairs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation
from .linalg import cholesky_jittered

_MASK64 = (1 << 64) - 1


@dataclass
class RngState:
    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter)

    def copy(self):
        return RngState(self.seed, self.counter)

    def spawn(self, tag):
        """Independent child stream derived from this seed and a tag."""
        h = hashlib.blake2b(f"{self.seed}:{tag}".encode(), digest_size=8).digest()
        return RngState(int.from_bytes(h, "little"), 0)

    def _words(self, n):
        blocks = -(-n // 4)
        bg = np.random.Philox(key=self.seed, counter=self.counter)
        words = bg.random_raw(4 * blocks)
        self.counter += blocks
        return words[:n]

    def uniform(self, n):
        w = self._words(int(n))
        return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)

    def normal(self, shape):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape))
        m = -(-n // 2)
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        ang = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(ang)
        z[1::2] = r * np.sin(ang)
        return z[:n].reshape(shape)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, high, size):
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)


def sample_mvn(mu, cov, n, rng):
    """Draw ``n`` rows from N(mu, cov).

    ``cov`` is a d-vector of variances (diagonal) or a d x d matrix (full or
    shared). Full matrices are factored with the jittered Cholesky routine.
    """
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if n < 1:
        raise ContractViolation("n must be >= 1")
    d = mu.shape[0]
    z = rng.normal((n, d))
    if cov.ndim == 1:
        if cov.shape != (d,) or (cov < 0).any():
            raise ContractViolation("diagonal covariance must be a non-negative d-vector")
        return mu + z * np.sqrt(cov)
    if cov.shape != (d, d):
        raise ContractViolation(f"covariance shape {cov.shape} does not match mean of length {d}")
    L, _ = cholesky_jittered(cov)
    return mu + z @ L.T
