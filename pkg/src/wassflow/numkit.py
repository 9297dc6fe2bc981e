"""Seeded sampling, small symmetric linear algebra and empirical statistics.

Every random draw in the package goes through :class:`Rng`, a thin wrapper
around numpy's counter-based Philox bit generator.  Gaussian variates use
numpy's ziggurat sampler (``Generator.standard_normal``), so a given seed
yields the same stream on every platform with IEEE doubles.
"""
from __future__ import annotations

import numpy as np

PSD_CLAMP_TOL = 1e-10


class Rng:
    """Owned, seedable random stream.

    ``spawn`` derives statistically independent child streams, which is how
    the solver keeps its training, initialization and evaluation draws apart.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if seed < 0 or seed >= 2**64:
                raise ValueError("seed must be an unsigned 64-bit integer")
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    @property
    def seed(self) -> int:
        return int(self._seq.entropy)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(s) for s in self._seq.spawn(n)]

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def sample_std_gaussian(rng: Rng, dim: int, count: int) -> np.ndarray:
    """``count`` i.i.d. rows from N(0, I_dim), shape (count, dim)."""
    return rng.normal((count, dim))


def as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("a sample batch is a non-empty (count, dim) array")
    return x


def empirical_mean_cov(batch) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (1/(M-1)) covariance of a (M, d) batch."""
    x = as_batch(batch)
    m = x.shape[0]
    if m < 2:
        raise ValueError("insufficient samples for covariance")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / (m - 1)
    return mean, 0.5 * (cov + cov.T)


def symmetrize(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return 0.5 * (s + s.T)


def mat_sqrt_spd(s) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix.

    2x2 inputs use the closed form (S + sqrt(det S) I) / sqrt(tr S + 2 sqrt(det S));
    anything else goes through a symmetric eigendecomposition.  Eigenvalues in
    [-1e-10, 0] are clamped to zero, anything more negative is rejected.
    """
    s = symmetrize(np.atleast_2d(s))
    d = s.shape[0]
    if d == 1:
        if s[0, 0] < -PSD_CLAMP_TOL:
            raise ValueError("matrix not PSD")
        return np.sqrt(np.maximum(s, 0.0))
    if d == 2:
        det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
        tr = s[0, 0] + s[1, 1]
        # eigenvalues are (tr +- disc)/2
        disc = np.sqrt(max((s[0, 0] - s[1, 1]) ** 2 + 4 * s[0, 1] ** 2, 0.0))
        lo = 0.5 * (tr - disc)
        if lo < -PSD_CLAMP_TOL:
            raise ValueError("matrix not PSD")
        if lo > PSD_CLAMP_TOL:
            rdet = np.sqrt(det)
            return (s + rdet * np.eye(2)) / np.sqrt(tr + 2 * rdet)
    lam, q = np.linalg.eigh(s)
    if lam.min() < -PSD_CLAMP_TOL:
        raise ValueError("matrix not PSD")
    lam = np.clip(lam, 0.0, None)
    r = (q * np.sqrt(lam)) @ q.T
    return symmetrize(r)


def w2_1d_empirical(a, b) -> float:
    """Exact W2 between two equal-size 1D empirical measures."""
    a = np.sort(np.ravel(np.asarray(a, dtype=float)))
    b = np.sort(np.ravel(np.asarray(b, dtype=float)))
    if a.size != b.size:
        raise ValueError("sample counts must match")
    if a.size == 0:
        raise ValueError("at least one sample required")
    return float(np.sqrt(np.mean((a - b) ** 2)))
