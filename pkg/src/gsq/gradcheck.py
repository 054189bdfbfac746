"""Finite-difference verification of the analytic backward pass.

The scalar loss under test is L = sum_p <grad_out(p), render(p)> for a
fixed random grad_out, so the analytic gradient is exactly what
splat_backward returns.  Each raw parameter coordinate is perturbed by
+-step (central differences, float64) and compared against the analytic
value with

    rel_err = |fd - analytic| / max(|fd|, |analytic|, 1e-7)

(the absolute floor keeps near-zero coordinates from amplifying FD noise).

Perturbations that move any pixel across a Gaussian's cutoff boundary make
the loss discontinuous there; those coordinates are detected by comparing
the perturbed coverage masks against the unperturbed one and skipped.
Scenes draw anisotropic scales so the rotation angle always has signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_CUTOFF
from .rasterizer import backward_arrays, render_arrays

FD_STEP = 1e-5
REL_FLOOR = 1e-7


@dataclass
class Scene:
    mu: np.ndarray
    theta: np.ndarray
    log_s: np.ndarray
    zeta: np.ndarray
    height: int
    width: int
    cutoff: float = DEFAULT_CUTOFF

    def copy(self) -> "Scene":
        return Scene(
            self.mu.copy(), self.theta.copy(), self.log_s.copy(), self.zeta.copy(),
            self.height, self.width, self.cutoff,
        )


@dataclass
class CheckResult:
    max_rel_err: float
    checked: int
    skipped: int


def random_scene(rng: np.random.Generator, *, k_max: int = 6, d_max: int = 4,
                 size_range=(8, 24)) -> Scene:
    k = int(rng.integers(1, k_max + 1))
    d = int(rng.integers(1, d_max + 1))
    h = int(rng.integers(size_range[0], size_range[1] + 1))
    w = int(rng.integers(size_range[0], size_range[1] + 1))
    mu = np.stack(
        [rng.uniform(1.0, w - 1.0, size=k), rng.uniform(1.0, h - 1.0, size=k)], axis=1
    )
    theta = rng.uniform(0.0, np.pi, size=k)
    # anisotropic scales: an isotropic Gaussian has no angle signal at all
    base = rng.uniform(np.log(0.8), np.log(3.0), size=k)
    split = rng.uniform(0.2, 0.9, size=k) * rng.choice([-1.0, 1.0], size=k)
    log_s = np.stack([base + split / 2, base - split / 2], axis=1)
    zeta = rng.normal(0.0, 1.0, size=(k, d))
    return Scene(mu, theta, log_s, zeta, h, w)


def _loss(scene: Scene, grad_out: np.ndarray) -> float:
    out, _ = render_arrays(
        scene.mu, scene.theta, scene.log_s, scene.zeta,
        scene.height, scene.width, cutoff=scene.cutoff, validate=False,
    )
    return float(np.sum(grad_out * out))


def _cover_mask(scene: Scene, k: int) -> np.ndarray:
    """Boolean coverage of Gaussian k over the full pixel grid."""
    from .core import S_MIN, rotation_matrix

    s = np.maximum(np.exp(scene.log_s[k]), S_MIN)
    r = rotation_matrix(scene.theta[k])
    inv = r @ np.diag(1.0 / (s * s)) @ r.T
    xs = np.arange(scene.width) + 0.5
    ys = np.arange(scene.height) + 0.5
    dx = xs[np.newaxis, :] - scene.mu[k, 0]
    dy = ys[:, np.newaxis] - scene.mu[k, 1]
    q = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
    return q <= scene.cutoff * scene.cutoff


def _coords(scene: Scene):
    """All raw coordinates: (label, gaussian index, setter, affects_coverage)."""
    k, d = scene.zeta.shape
    for g in range(k):
        for ax in range(2):
            yield "mu", g, lambda s, v, g=g, ax=ax: s.mu.__setitem__((g, ax), v), True
        yield "theta", g, lambda s, v, g=g: s.theta.__setitem__(g, v), True
        for ax in range(2):
            yield "log_s", g, lambda s, v, g=g, ax=ax: s.log_s.__setitem__((g, ax), v), True
        for c in range(d):
            yield "zeta", g, lambda s, v, g=g, c=c: s.zeta.__setitem__((g, c), v), False


def _coord_values(scene: Scene):
    k, d = scene.zeta.shape
    for g in range(k):
        yield scene.mu[g, 0]
        yield scene.mu[g, 1]
        yield scene.theta[g]
        yield scene.log_s[g, 0]
        yield scene.log_s[g, 1]
        for c in range(d):
            yield scene.zeta[g, c]


def _analytic_values(scene: Scene, grad_out: np.ndarray):
    _, aux = render_arrays(
        scene.mu, scene.theta, scene.log_s, scene.zeta,
        scene.height, scene.width, cutoff=scene.cutoff, validate=False,
    )
    d_mu, d_theta, d_log_s, d_zeta = backward_arrays(aux, grad_out)
    k, d = scene.zeta.shape
    for g in range(k):
        yield d_mu[g, 0]
        yield d_mu[g, 1]
        yield d_theta[g]
        yield d_log_s[g, 0]
        yield d_log_s[g, 1]
        for c in range(d):
            yield d_zeta[g, c]


def check_scene(scene: Scene, rng: np.random.Generator, *, step: float = FD_STEP) -> CheckResult:
    """Compare the analytic bundle of one scene against central differences."""
    grad_out = rng.normal(0.0, 1.0, size=(scene.height, scene.width, scene.zeta.shape[1]))
    analytic = list(_analytic_values(scene, grad_out))
    values = list(_coord_values(scene))
    coords = list(_coords(scene))
    assert len(analytic) == len(values) == len(coords)

    max_err = 0.0
    checked = skipped = 0
    base_masks = [_cover_mask(scene, g) for g in range(scene.zeta.shape[0])]
    for (label, g, setter, covers), x0, an in zip(coords, values, analytic):
        plus, minus = scene.copy(), scene.copy()
        setter(plus, x0 + step)
        setter(minus, x0 - step)
        if covers:
            if not (
                np.array_equal(_cover_mask(plus, g), base_masks[g])
                and np.array_equal(_cover_mask(minus, g), base_masks[g])
            ):
                skipped += 1
                continue
        fd = (_loss(plus, grad_out) - _loss(minus, grad_out)) / (2.0 * step)
        rel = abs(fd - an) / max(abs(fd), abs(an), REL_FLOOR)
        max_err = max(max_err, rel)
        checked += 1
    return CheckResult(max_rel_err=max_err, checked=checked, skipped=skipped)


def run_suite(seed: int, scenes: int, *, step: float = FD_STEP) -> CheckResult:
    """FD-check ``scenes`` random scenes; aggregates the worst relative error."""
    rng = np.random.default_rng(seed)
    max_err = 0.0
    checked = skipped = 0
    for _ in range(scenes):
        result = check_scene(random_scene(rng), rng, step=step)
        max_err = max(max_err, result.max_rel_err)
        checked += result.checked
        skipped += result.skipped
    return CheckResult(max_rel_err=max_err, checked=checked, skipped=skipped)
