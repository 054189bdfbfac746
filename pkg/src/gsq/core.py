"""Featured 2D Gaussian primitives.

A featured Gaussian carries, beyond its position and covariance, a
D-dimensional coefficient vector that it deposits onto a feature grid,
weighted by an anisotropic Gaussian falloff:

    weight(p) = exp(-1/2 (p - mu)^T Sigma^-1 (p - mu))

The covariance is factorized as Sigma = (R S)(R S)^T with R a rotation by
theta and S = diag(s1, s2), so Sigma stays positive definite for any real
theta and positive scales.

Conventions
-----------
- Positions live in continuous pixel coordinates of the target grid: the
  center of pixel (row i, col j) is at (x, y) = (j + 0.5, i + 0.5).
- Scales are stored as log_s and exponentiated on use, so unconstrained
  gradient steps cannot produce a non-positive scale.
- theta is stored unconstrained; Sigma is pi-periodic in theta, so the
  canonical angle in [0, pi) matters only for serialization and display.
- Weights are cut to exactly zero beyond Mahalanobis radius ``cutoff``
  (default 3.0).  The ellipse inside the cutoff is the Gaussian's valid
  coverage region; it keeps every per-Gaussian pixel sum finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCovarianceError, InvalidParameterError, ShapeError

DEFAULT_CUTOFF = 3.0

# Smallest usable scale, in feature-map pixels. Below this the covariance is
# numerically singular.
S_MIN = 1e-4


def canonical_angle(theta: float) -> float:
    """Reduce an unconstrained angle to the canonical range [0, pi)."""
    t = float(np.mod(theta, np.pi))
    if t >= np.pi:  # np.mod can round up to pi for tiny negative inputs
        t = 0.0
    return t


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Gaussian2D:
    """One featured 2D Gaussian unit: position, angle, log-scales, features.

    The raw parameter vector (mu, theta_raw, log_s, zeta) has length 5 + D
    and is what gradient optimization acts on.
    """

    mu: np.ndarray
    theta_raw: float
    log_s: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _readonly(self.mu))
        object.__setattr__(self, "theta_raw", float(self.theta_raw))
        object.__setattr__(self, "log_s", _readonly(self.log_s))
        object.__setattr__(self, "zeta", _readonly(self.zeta))
        if self.mu.shape != (2,):
            raise ShapeError(f"mu must be a 2-vector, got shape {self.mu.shape}")
        if self.log_s.shape != (2,):
            raise ShapeError(f"log_s must be a 2-vector, got shape {self.log_s.shape}")
        if self.zeta.ndim != 1 or self.zeta.shape[0] < 1:
            raise ShapeError(f"zeta must be a 1-D vector, got shape {self.zeta.shape}")
        for name, v in (("mu", self.mu), ("log_s", self.log_s), ("zeta", self.zeta)):
            if not np.all(np.isfinite(v)):
                raise InvalidParameterError(f"{name} contains non-finite values: {v}")
        if not np.isfinite(self.theta_raw):
            raise InvalidParameterError(f"theta_raw is not finite: {self.theta_raw}")
        if not np.all(np.isfinite(np.exp(self.log_s))):
            raise InvalidParameterError(f"exp(log_s) overflows: log_s={self.log_s}")

    @property
    def feature_dim(self) -> int:
        return self.zeta.shape[0]

    @property
    def theta(self) -> float:
        """Canonical rotation angle in [0, pi)."""
        return canonical_angle(self.theta_raw)

    @property
    def s(self) -> np.ndarray:
        """Effective (strictly positive) scaling factors exp(log_s)."""
        return np.exp(self.log_s)


@dataclass(frozen=True)
class GaussianSet:
    """An ordered collection of featured Gaussians targeting an h x w grid.

    K = 0 is valid and denotes the empty scene.
    """

    gaussians: tuple
    feature_dim: int
    map_height: int
    map_width: int

    def __post_init__(self):
        object.__setattr__(self, "gaussians", tuple(self.gaussians))
        if self.feature_dim < 1:
            raise ShapeError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.map_height < 1 or self.map_width < 1:
            raise ShapeError(
                f"map size must be positive, got {self.map_height}x{self.map_width}"
            )
        for i, g in enumerate(self.gaussians):
            if g.feature_dim != self.feature_dim:
                raise ShapeError(
                    f"gaussian {i} has feature dim {g.feature_dim}, "
                    f"set declares {self.feature_dim}"
                )

    def __len__(self) -> int:
        return len(self.gaussians)

    def __iter__(self):
        return iter(self.gaussians)

    def as_arrays(self):
        """Return (mu [K,2], theta_raw [K], log_s [K,2], zeta [K,D]) float64 views."""
        k = len(self.gaussians)
        mu = np.empty((k, 2))
        theta = np.empty(k)
        log_s = np.empty((k, 2))
        zeta = np.empty((k, self.feature_dim))
        for i, g in enumerate(self.gaussians):
            mu[i] = g.mu
            theta[i] = g.theta_raw
            log_s[i] = g.log_s
            zeta[i] = g.zeta
        return mu, theta, log_s, zeta

    @classmethod
    def from_arrays(cls, mu, theta_raw, log_s, zeta, map_height, map_width):
        mu = np.asarray(mu, dtype=np.float64)
        theta_raw = np.asarray(theta_raw, dtype=np.float64)
        log_s = np.asarray(log_s, dtype=np.float64)
        zeta = np.asarray(zeta, dtype=np.float64)
        k = mu.shape[0]
        if theta_raw.shape != (k,) or log_s.shape != (k, 2) or zeta.shape[0] != k:
            raise ShapeError(
                f"inconsistent array lengths: mu {mu.shape}, theta {theta_raw.shape}, "
                f"log_s {log_s.shape}, zeta {zeta.shape}"
            )
        gs = tuple(
            Gaussian2D(mu[i], theta_raw[i], log_s[i], zeta[i]) for i in range(k)
        )
        dim = zeta.shape[1] if zeta.ndim == 2 else 1
        return cls(gs, dim, map_height, map_width)


@dataclass(frozen=True)
class Covariance2D:
    """Covariance Sigma = (R S)(R S)^T with its exact inverse.

    sigma is symmetric positive definite by construction; sigma_inv is
    computed from the same rotation/scale factorization, so
    sigma @ sigma_inv = I to within a few ulp.
    """

    sigma: np.ndarray
    sigma_inv: np.ndarray
    theta: float
    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma", _readonly(self.sigma))
        object.__setattr__(self, "sigma_inv", _readonly(self.sigma_inv))
        object.__setattr__(self, "s", _readonly(self.s))


def rotation_matrix(theta: float) -> np.ndarray:
    """2x2 rotation [[cos, -sin], [sin, cos]]."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def covariance_from(theta: float, s, *, s_min: float = S_MIN, clamp: bool = True) -> Covariance2D:
    """Build Sigma = (R S)(R S)^T and its inverse from angle and scales.

    Scales below ``s_min`` are clamped up by default; with ``clamp=False``
    they raise DegenerateCovarianceError instead.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (2,):
        raise ShapeError(f"s must be a 2-vector, got shape {s.shape}")
    if not (np.isfinite(theta) and np.all(np.isfinite(s))):
        raise InvalidParameterError(f"non-finite covariance inputs: theta={theta}, s={s}")
    if np.any(s < s_min):
        if not clamp:
            raise DegenerateCovarianceError(f"scales {s} below s_min={s_min}")
        s = np.maximum(s, s_min)

    r = rotation_matrix(theta)
    sigma = r @ np.diag(s * s) @ r.T
    sigma_inv = r @ np.diag(1.0 / (s * s)) @ r.T
    return Covariance2D(sigma, sigma_inv, canonical_angle(theta), s)


def mahalanobis_sq(mu, cov: Covariance2D, p) -> float:
    """Squared Mahalanobis distance (p - mu)^T Sigma^-1 (p - mu)."""
    d = np.asarray(p, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    return float(d @ cov.sigma_inv @ d)


def gaussian_weight(mu, cov: Covariance2D, p, cutoff: float = DEFAULT_CUTOFF) -> float:
    """Gaussian falloff at p, exactly 0 outside the cutoff ellipse.

    Returns exp(-q/2) with q the squared Mahalanobis distance when
    q <= cutoff^2, else 0.0.  The value is in (0, 1] inside the region.
    """
    q = mahalanobis_sq(mu, cov, p)
    if q > cutoff * cutoff:
        return 0.0
    return float(np.exp(-0.5 * q))


def contribution(g: Gaussian2D, cov: Covariance2D, p, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Feature deposit of one Gaussian at p: weight * zeta (zero outside cutoff)."""
    return gaussian_weight(g.mu, cov, p, cutoff) * g.zeta
