"""Tile-based splatting of featured Gaussians and its analytic backward pass.

Forward (per pixel p at (col + 0.5, row + 0.5)):

    out(p) = sum_k  w_k(p) * zeta_k,     w_k(p) = exp(-q_k(p) / 2) * [q_k(p) <= r_c^2]

with q_k the squared Mahalanobis distance under Sigma_k = (R S)(R S)^T.

Backward: gradients of L = sum_p <grad_out(p), out(p)> with respect to every
Gaussian parameter.  Writing A = Sigma^-1, d = p - mu, b = A d, u = <grad_out, zeta>
and v = -w u / 2 (= dL/dq at p), the per-Gaussian gradients are

    dL/dzeta  = sum_p grad_out(p) * w(p)          (the regional error sum)
    dL/dmu    = -2 sum_p v b
    dL/dSigma = -  sum_p v b b^T                  =: G
    dL/dtheta = <G, J Sigma - Sigma J>_F,   J = [[0,-1],[1,0]] rotation generator
    dL/dlog_si = 2 s_i^2 (r_i^T G r_i)            (r_i = i-th column of R)

The cutoff indicator is treated as a constant (no gradient through the
coverage boundary).  All accumulation is float64.

Tiling: Gaussians are binned to 16x16-pixel tiles (configurable) by the
conservative axis-aligned bounding box of their cutoff ellipse.  Tiles write
disjoint output regions, every per-tile sum runs in ascending Gaussian index
order, and per-tile gradient partials are merged in fixed tile order, so the
result is bit-identical for any thread count.  Thread count comes from the
``threads`` argument or the GSQ_THREADS environment variable (default 1).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_CUTOFF, S_MIN, GaussianSet, rotation_matrix
from .errors import InvalidSceneError, ShapeError

DEFAULT_TILE_SIZE = 16


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FeatureMap:
    """An H x W x D grid of real-valued features."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _readonly(self.data))
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be H x W x D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"feature map dims must be positive, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidSceneError("feature map contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, height: int, width: int, dim: int) -> "FeatureMap":
        return cls(np.zeros((height, width, dim)))


@dataclass(frozen=True)
class GradientBundle:
    """Per-Gaussian gradients for every raw parameter."""

    d_mu: np.ndarray      # K x 2
    d_theta: np.ndarray   # K
    d_log_s: np.ndarray   # K x 2
    d_zeta: np.ndarray    # K x D


@dataclass(frozen=True)
class _TileBin:
    y0: int
    y1: int
    x0: int
    x1: int
    indices: np.ndarray  # ascending Gaussian indices whose cutoff box meets the tile


@dataclass(frozen=True)
class SplatAux:
    """Backward-pass cache: tile bins plus per-Gaussian derived quantities.

    Per-pixel weights are recomputed in the backward pass from the cached
    inverse covariances rather than stored (memory over time).
    """

    height: int
    width: int
    tile_size: int
    cutoff: float
    tiles: tuple
    mu: np.ndarray        # K x 2
    inv_cov: np.ndarray   # K x 3: (a, b, c) of Sigma^-1 = [[a, b], [b, c]]
    sigma: np.ndarray     # K x 3: (xx, xy, yy) of Sigma
    s_eff: np.ndarray     # K x 2 effective scales (after s_min clamp)
    ds_dlog: np.ndarray   # K x 2 derivative of s_eff w.r.t. log_s (0 when clamped)
    cos_t: np.ndarray
    sin_t: np.ndarray
    zeta: np.ndarray      # K x D


def _thread_count(threads) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("GSQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _derived(theta: np.ndarray, log_s: np.ndarray):
    """Per-Gaussian covariance pieces from raw parameters (vectorized)."""
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    s_raw = np.exp(log_s)
    s_eff = np.maximum(s_raw, S_MIN)
    ds_dlog = np.where(s_raw > S_MIN, s_raw, 0.0)
    s2 = s_eff * s_eff
    inv_s2 = 1.0 / s2
    c2, sc, s2t = cos_t * cos_t, cos_t * sin_t, sin_t * sin_t
    # Sigma = R diag(s^2) R^T; Sigma^-1 = R diag(s^-2) R^T
    sigma = np.stack(
        [
            c2 * s2[:, 0] + s2t * s2[:, 1],
            sc * (s2[:, 0] - s2[:, 1]),
            s2t * s2[:, 0] + c2 * s2[:, 1],
        ],
        axis=1,
    )
    inv_cov = np.stack(
        [
            c2 * inv_s2[:, 0] + s2t * inv_s2[:, 1],
            sc * (inv_s2[:, 0] - inv_s2[:, 1]),
            s2t * inv_s2[:, 0] + c2 * inv_s2[:, 1],
        ],
        axis=1,
    )
    return sigma, inv_cov, s_eff, ds_dlog, cos_t, sin_t


def _bin_tiles(mu, sigma, h, w, tile_size, cutoff):
    """Conservative AABB binning of each Gaussian's cutoff ellipse to tiles."""
    nty = (h + tile_size - 1) // tile_size
    ntx = (w + tile_size - 1) // tile_size
    bins = [[] for _ in range(nty * ntx)]
    k = mu.shape[0]
    if k:
        rx = cutoff * np.sqrt(sigma[:, 0])
        ry = cutoff * np.sqrt(sigma[:, 2])
        # pixel-center index ranges covered by the box
        jmin = np.ceil(mu[:, 0] - rx - 0.5).astype(np.int64)
        jmax = np.floor(mu[:, 0] + rx - 0.5).astype(np.int64)
        imin = np.ceil(mu[:, 1] - ry - 0.5).astype(np.int64)
        imax = np.floor(mu[:, 1] + ry - 0.5).astype(np.int64)
        for g in range(k):
            j0, j1 = max(jmin[g], 0), min(jmax[g], w - 1)
            i0, i1 = max(imin[g], 0), min(imax[g], h - 1)
            if j0 > j1 or i0 > i1:
                continue
            for ty in range(i0 // tile_size, i1 // tile_size + 1):
                for tx in range(j0 // tile_size, j1 // tile_size + 1):
                    bins[ty * ntx + tx].append(g)
    tiles = []
    for ty in range(nty):
        for tx in range(ntx):
            idx = bins[ty * ntx + tx]
            if not idx:
                continue
            tiles.append(
                _TileBin(
                    y0=ty * tile_size,
                    y1=min((ty + 1) * tile_size, h),
                    x0=tx * tile_size,
                    x1=min((tx + 1) * tile_size, w),
                    indices=np.asarray(idx, dtype=np.int64),
                )
            )
    return tuple(tiles)


def _tile_weights(tile: _TileBin, mu, inv_cov, cutoff):
    """Stack of per-pixel weights for the tile's Gaussians: (nk, th, tw)."""
    idx = tile.indices
    xs = np.arange(tile.x0, tile.x1, dtype=np.float64) + 0.5
    ys = np.arange(tile.y0, tile.y1, dtype=np.float64) + 0.5
    dx = xs[np.newaxis, :] - mu[idx, 0][:, np.newaxis]   # nk x tw
    dy = ys[np.newaxis, :] - mu[idx, 1][:, np.newaxis]   # nk x th
    a = inv_cov[idx, 0][:, np.newaxis, np.newaxis]
    b = inv_cov[idx, 1][:, np.newaxis, np.newaxis]
    c = inv_cov[idx, 2][:, np.newaxis, np.newaxis]
    dxk = dx[:, np.newaxis, :]
    dyk = dy[:, :, np.newaxis]
    q = a * dxk * dxk + 2.0 * b * dxk * dyk + c * dyk * dyk
    inside = q <= cutoff * cutoff
    w = np.zeros_like(q)
    np.exp(-0.5 * q, out=w, where=inside)
    return w, dxk, dyk


def _validate_scene(mu, theta, log_s, zeta):
    finite = (
        np.all(np.isfinite(mu))
        and np.all(np.isfinite(theta))
        and np.all(np.isfinite(log_s))
        and np.all(np.isfinite(zeta))
        and np.all(np.isfinite(np.exp(log_s)))
    )
    if not finite:
        raise InvalidSceneError("scene contains non-finite Gaussian parameters")


def render_arrays(mu, theta, log_s, zeta, h, w, *, tile_size=DEFAULT_TILE_SIZE,
                  cutoff=DEFAULT_CUTOFF, threads=None, validate=True):
    """Array-level tiled forward splat. Returns (out [h,w,D], SplatAux)."""
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    log_s = np.asarray(log_s, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    if h < 1 or w < 1:
        raise ShapeError(f"target size must be positive, got {h}x{w}")
    if zeta.ndim != 2:
        raise ShapeError(f"zeta must be K x D, got shape {zeta.shape}")
    if validate:
        _validate_scene(mu, theta, log_s, zeta)

    d = zeta.shape[1]
    sigma, inv_cov, s_eff, ds_dlog, cos_t, sin_t = _derived(theta, log_s)
    tiles = _bin_tiles(mu, sigma, h, w, tile_size, cutoff)
    out = np.zeros((h, w, d))

    def run_tile(tile: _TileBin):
        wgt, _, _ = _tile_weights(tile, mu, inv_cov, cutoff)
        # fixed accumulation order: ascending Gaussian index within the tile
        out[tile.y0:tile.y1, tile.x0:tile.x1, :] += np.einsum(
            "kyx,kd->yxd", wgt, zeta[tile.indices]
        )

    nthreads = _thread_count(threads)
    if nthreads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            list(pool.map(run_tile, tiles))
    else:
        for tile in tiles:
            run_tile(tile)

    aux = SplatAux(
        height=h, width=w, tile_size=tile_size, cutoff=cutoff, tiles=tiles,
        mu=mu, inv_cov=inv_cov, sigma=sigma, s_eff=s_eff, ds_dlog=ds_dlog,
        cos_t=cos_t, sin_t=sin_t, zeta=zeta,
    )
    return out, aux


def backward_arrays(aux: SplatAux, grad_out: np.ndarray, *, threads=None):
    """Array-level analytic backward. Returns (d_mu, d_theta, d_log_s, d_zeta)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    k, d = aux.zeta.shape
    if grad_out.shape != (aux.height, aux.width, d):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"({aux.height}, {aux.width}, {d})"
        )

    d_zeta = np.zeros((k, d))
    d_mu = np.zeros((k, 2))
    g_sig = np.zeros((k, 3))  # dL/dSigma as (xx, xy, yy)

    def run_tile(tile: _TileBin):
        idx = tile.indices
        wgt, dxk, dyk = _tile_weights(tile, aux.mu, aux.inv_cov, aux.cutoff)
        gt = grad_out[tile.y0:tile.y1, tile.x0:tile.x1, :]
        dz = np.einsum("kyx,yxd->kd", wgt, gt)
        u = np.einsum("yxd,kd->kyx", gt, aux.zeta[idx])
        v = -0.5 * wgt * u
        a = aux.inv_cov[idx, 0][:, np.newaxis, np.newaxis]
        b = aux.inv_cov[idx, 1][:, np.newaxis, np.newaxis]
        c = aux.inv_cov[idx, 2][:, np.newaxis, np.newaxis]
        bx = a * dxk + b * dyk
        by = b * dxk + c * dyk
        dmu = np.stack(
            [-2.0 * np.sum(v * bx, axis=(1, 2)), -2.0 * np.sum(v * by, axis=(1, 2))],
            axis=1,
        )
        gs = np.stack(
            [
                -np.sum(v * bx * bx, axis=(1, 2)),
                -np.sum(v * bx * by, axis=(1, 2)),
                -np.sum(v * by * by, axis=(1, 2)),
            ],
            axis=1,
        )
        return idx, dz, dmu, gs

    nthreads = _thread_count(threads)
    if nthreads > 1 and len(aux.tiles) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            partials = list(pool.map(run_tile, aux.tiles))
    else:
        partials = [run_tile(t) for t in aux.tiles]

    # merge in fixed tile order so the result is thread-count independent
    for idx, dz, dmu, gs in partials:
        d_zeta[idx] += dz
        d_mu[idx] += dmu
        g_sig[idx] += gs

    # chain dL/dSigma to theta and log_s
    gxx, gxy, gyy = g_sig[:, 0], g_sig[:, 1], g_sig[:, 2]
    sxx, sxy, syy = aux.sigma[:, 0], aux.sigma[:, 1], aux.sigma[:, 2]
    # dSigma/dtheta = J Sigma - Sigma J = [[-2 sxy, sxx - syy], [sxx - syy, 2 sxy]]
    d_theta = gxx * (-2.0 * sxy) + 2.0 * gxy * (sxx - syy) + gyy * (2.0 * sxy)
    # dSigma/ds_i = 2 s_i r_i r_i^T with r_i the i-th rotation column
    quad1 = gxx * aux.cos_t**2 + 2.0 * gxy * aux.cos_t * aux.sin_t + gyy * aux.sin_t**2
    quad2 = gxx * aux.sin_t**2 - 2.0 * gxy * aux.cos_t * aux.sin_t + gyy * aux.cos_t**2
    d_log_s = np.stack(
        [
            2.0 * aux.s_eff[:, 0] * aux.ds_dlog[:, 0] * quad1,
            2.0 * aux.s_eff[:, 1] * aux.ds_dlog[:, 1] * quad2,
        ],
        axis=1,
    )
    return d_mu, d_theta, d_log_s, d_zeta


def splat_forward(gset: GaussianSet, h: int, w: int, *, tile_size: int = DEFAULT_TILE_SIZE,
                  cutoff: float = DEFAULT_CUTOFF, threads=None):
    """Render a GaussianSet onto an h x w grid. Returns (FeatureMap, SplatAux)."""
    mu, theta, log_s, zeta = gset.as_arrays()
    out, aux = render_arrays(
        mu, theta, log_s, zeta.reshape(len(gset), gset.feature_dim),
        h, w, tile_size=tile_size, cutoff=cutoff, threads=threads,
    )
    return FeatureMap(out), aux


def splat_dense_reference(gset: GaussianSet, h: int, w: int, *,
                          cutoff: float = DEFAULT_CUTOFF) -> FeatureMap:
    """Brute-force oracle: evaluate every (pixel, Gaussian) pair, no tiling.

    Same cutoff rule as the tiled path, but independently assembled: the
    covariance comes from an explicit (R S)(R S)^T product and a numpy
    inverse, and the quadratic form is evaluated on the full grid.
    Intended for small scenes.
    """
    mu, theta, log_s, zeta = gset.as_arrays()
    _validate_scene(mu, theta, log_s, zeta)
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)  # h x w each
    out = np.zeros((h, w, gset.feature_dim))
    for k in range(len(gset)):
        s = np.maximum(np.exp(log_s[k]), S_MIN)
        m = rotation_matrix(theta[k]) @ np.diag(s)
        sigma = m @ m.T
        inv = np.linalg.inv(sigma)
        dx = px - mu[k, 0]
        dy = py - mu[k, 1]
        q = inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy
        w_k = np.where(q <= cutoff * cutoff, np.exp(-0.5 * q), 0.0)
        out += w_k[:, :, np.newaxis] * zeta[k][np.newaxis, np.newaxis, :]
    return FeatureMap(out)


def splat_backward(gset: GaussianSet, aux: SplatAux, grad_out, *, threads=None) -> GradientBundle:
    """Analytic gradients of sum_p <grad_out(p), out(p)> for all parameters."""
    data = grad_out.data if isinstance(grad_out, FeatureMap) else np.asarray(grad_out)
    d_mu, d_theta, d_log_s, d_zeta = backward_arrays(aux, data, threads=threads)
    return GradientBundle(d_mu=d_mu, d_theta=d_theta, d_log_s=d_log_s, d_zeta=d_zeta)
