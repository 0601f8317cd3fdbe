"""Diagonal Gaussians, categoricals and the seeded random stream.

The array-level helpers (``gaussian_log_pdf`` and friends) broadcast over any
leading batch axes; the last axis is the event dimension.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
PROB_FLOOR = 1e-12


class SeededRng:
    """Reproducible, splittable random stream backed by the Philox counter generator.

    Child streams are addressed by name, so ``rng.split("noise")`` yields the
    same sequence no matter how much the parent has already consumed.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, name: str) -> "SeededRng":
        return SeededRng(self.seed, self.key + (zlib.crc32(name.encode("utf-8")),))

    def snapshot(self) -> "SeededRng":
        """Independent copy positioned at the current point of this stream."""
        twin = SeededRng(self.seed, self.key)
        twin.generator.bit_generator.state = self.generator.bit_generator.state
        return twin

    @property
    def counter(self) -> int:
        """Position of the underlying Philox block counter plus buffered output."""
        st = self.generator.bit_generator.state
        words = [int(w) for w in st["state"]["counter"]]
        value = 0
        for w in reversed(words):
            value = (value << 64) | w
        # each block yields four 64-bit words; buffer_pos says how many are used
        return value * 4 + int(st["buffer_pos"])

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)


def sample_standard_normal(rng: SeededRng, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError("dimension must be at least 1")
    return rng.normal(d)


def clamp_log_var(log_var):
    return np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance ``exp(log_var)``.

    ``log_var`` is clamped to [-10, 10] on construction. Arrays may carry
    leading batch axes.
    """

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        log_var = np.asarray(self.log_var, dtype=np.float64)
        if mean.shape != log_var.shape:
            raise ShapeError(f"mean shape {mean.shape} != log_var shape {log_var.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", clamp_log_var(log_var))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


def gaussian_log_pdf(x, mean, log_var):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    r = x - mean
    return -0.5 * (
        mean.shape[-1] * LOG_2PI
        + np.sum(log_var, axis=-1)
        + np.sum(r * r * np.exp(-log_var), axis=-1)
    )


def log_cross_terms(mean_a, var_a, mean_b, var_b):
    """``log N(mean_a | mean_b, var_a + var_b)`` summed over the last axis."""
    s = var_a + var_b
    r = mean_a - mean_b
    return -0.5 * (
        mean_a.shape[-1] * LOG_2PI + np.sum(np.log(s), axis=-1) + np.sum(r * r / s, axis=-1)
    )


def expected_log_prior_terms(mean, var):
    """``E[log N(z; 0, I)]`` for ``z ~ N(mean, diag(var))``."""
    return -0.5 * (mean.shape[-1] * LOG_2PI + np.sum(mean * mean + var, axis=-1))


def _check_dims(g: DiagGaussian, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != g.dim:
        raise ShapeError(f"point has dimension {z.shape[-1]}, distribution has {g.dim}")
    return z


def diag_gaussian_log_pdf(g: DiagGaussian, z):
    z = _check_dims(g, z)
    out = gaussian_log_pdf(z, g.mean, g.log_var)
    return float(out) if np.ndim(out) == 0 else out


def log_cross_density(a: DiagGaussian, b: DiagGaussian):
    """Log of the overlap integral of two Gaussians; symmetric in its arguments."""
    if a.dim != b.dim:
        raise ShapeError(f"dimension mismatch: {a.dim} vs {b.dim}")
    out = log_cross_terms(a.mean, a.var, b.mean, b.var)
    return float(out) if np.ndim(out) == 0 else out


def reparameterize(g: DiagGaussian, eps):
    eps = _check_dims(g, eps)
    return g.mean + g.std * eps


def expected_log_std_normal_prior(g: DiagGaussian):
    out = expected_log_prior_terms(g.mean, g.var)
    return float(out) if np.ndim(out) == 0 else out


def _check_simplex(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probabilities must be a non-empty vector")
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities are not on the simplex")
    return p


def categorical_log_pmf(probs, k: int) -> float:
    p = _check_simplex(probs)
    if not 0 <= k < p.size:
        raise ValueError(f"class index {k} out of range for {p.size} classes")
    return float(np.log(max(p[k], PROB_FLOOR)))


def categorical_entropy(probs) -> float:
    p = _check_simplex(probs)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))
