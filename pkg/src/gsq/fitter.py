"""Per-image direct optimization of a featured Gaussian scene.

Each step quantizes the feature coefficients against the codebook (when
enabled), splats the quantized features with the continuous positions and
covariances, and minimizes

    L = MSE(render, target) + vq_weight * vq_loss + commit_weight * commit_loss

with two Adam instances (beta1 0.5, beta2 0.9): one for the Gaussian
parameters, one for the codebook entries.  The gradient reaching the
pre-quantization coefficients is the straight-through copy of the render
gradient plus the commitment pull; the vq pull moves only the codebook.
The learning rate follows a linear warmup into a cosine decay that reaches
zero at the final step.

Renders are clamped to [0, 1] only for metric computation, never inside
the loss.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .codebook import Codebook, codebook_gradient, quantize_set, update_codebook, usage_histogram
from .core import DEFAULT_CUTOFF, GaussianSet
from .errors import DivergenceError, InvalidParameterError, ShapeError
from .rasterizer import DEFAULT_TILE_SIZE, FeatureMap, backward_arrays, render_arrays

PARAM_KEYS = ("mu", "theta", "log_s", "zeta")


@dataclass
class FitConfig:
    """All knobs of one fitting run."""

    num_gaussians: int
    feature_dim: int = 3
    codebook_size: int = 1024
    height: int = 32
    width: int = 32
    steps: int = 1000
    base_lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int | None = None  # default: 5% of steps
    commit_weight: float = 0.25
    vq_weight: float = 1.0
    quantize_enabled: bool = True
    cutoff: float = DEFAULT_CUTOFF
    tile_size: int = DEFAULT_TILE_SIZE
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        for name in ("num_gaussians",):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        for name in ("feature_dim", "codebook_size", "height", "width", "steps", "tile_size"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be positive")
        if self.base_lr <= 0:
            raise InvalidParameterError("base_lr must be > 0")
        for name in ("commit_weight", "vq_weight", "weight_decay"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be non-negative")
        if self.warmup_steps is not None and not 0 <= self.warmup_steps < self.steps:
            raise InvalidParameterError("warmup_steps must lie in [0, steps)")

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return min(self.steps - 1, round(0.05 * self.steps))


@dataclass
class AdamState:
    """First/second-moment accumulators per named parameter tensor."""

    m: dict
    v: dict
    step_count: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class FitReport:
    rec_losses: np.ndarray
    vq_losses: np.ndarray
    commit_losses: np.ndarray
    total_losses: np.ndarray
    final_psnr: float
    final_ssim: float
    utilization: float
    seconds: float


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: FitConfig):
    """One bias-corrected Adam update.  Returns (new_params, new_state)."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("params, grads and state must share the same keys")
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    t = state.step_count + 1
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for '{key}'")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = b1 * state.m[key] + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[key] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(m=new_m, v=new_v, step_count=t)


def cosine_warmup_lr(step: int, cfg: FitConfig) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then cosine decay to 0."""
    if not 0 <= step < cfg.steps:
        raise InvalidParameterError(f"step {step} outside [0, {cfg.steps})")
    warmup = cfg.resolved_warmup
    if step < warmup:
        return cfg.base_lr * step / warmup
    span = max(1, cfg.steps - 1 - warmup)
    progress = (step - warmup) / span
    return cfg.base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def _target_data(target) -> np.ndarray:
    return target.data if isinstance(target, FeatureMap) else np.asarray(target, dtype=np.float64)


def init_gaussians(cfg: FitConfig, target, rng: np.random.Generator) -> GaussianSet:
    """Grid-with-jitter positions; scales sized so each unit's 1-sigma disk
    covers roughly h*w/K pixels; features sampled from the target at mu."""
    data = _target_data(target)
    h, w = data.shape[0], data.shape[1]
    k = cfg.num_gaussians
    if k > h * w:
        warnings.warn(f"num_gaussians={k} exceeds pixel count {h * w}", stacklevel=2)

    grid = max(1, int(np.ceil(np.sqrt(k))))
    cell_w, cell_h = w / grid, h / grid
    cells = [(gy, gx) for gy in range(grid) for gx in range(grid)][:k]
    jitter = rng.uniform(-0.5, 0.5, size=(k, 2))
    mu = np.empty((k, 2))
    for i, (gy, gx) in enumerate(cells):
        mu[i, 0] = (gx + 0.5 + jitter[i, 0]) * cell_w
        mu[i, 1] = (gy + 0.5 + jitter[i, 1]) * cell_h

    s0 = np.sqrt(h * w / (max(k, 1) * np.pi))
    log_s = np.full((k, 2), np.log(s0))
    theta = np.zeros(k)

    zeta = np.empty((k, cfg.feature_dim))
    for i in range(k):
        col = int(np.clip(np.floor(mu[i, 0]), 0, w - 1))
        row = int(np.clip(np.floor(mu[i, 1]), 0, h - 1))
        zeta[i] = data[row, col, : cfg.feature_dim]

    return GaussianSet.from_arrays(mu, theta, log_s, zeta, h, w)


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


def fit_image(target, cfg: FitConfig, *, init: GaussianSet | None = None):
    """Optimize a scene (and codebook) against one target feature map.

    Returns (GaussianSet, Codebook, FitReport).  Deterministic for a fixed
    seed and independent of the rasterizer thread count.
    """
    data = _target_data(target)
    if data.ndim != 3 or data.shape[2] != cfg.feature_dim:
        raise ShapeError(
            f"target shape {data.shape} does not match feature_dim {cfg.feature_dim}"
        )
    if not _finite(data):
        raise InvalidParameterError("target contains non-finite values")
    h, w = data.shape[0], data.shape[1]
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()

    scene = init if init is not None else init_gaussians(cfg, data, rng)
    if scene.feature_dim != cfg.feature_dim:
        raise ShapeError("initial scene feature dim does not match config")
    mu, theta, log_s, zeta = scene.as_arrays()
    params = {"mu": mu, "theta": theta, "log_s": log_s, "zeta": zeta.reshape(len(scene), cfg.feature_dim)}
    k = len(scene)

    book = (
        Codebook.init_from_samples(params["zeta"], cfg.codebook_size, rng)
        if k
        else Codebook(np.zeros((cfg.codebook_size, cfg.feature_dim)))
    )
    g_state = AdamState.init(params)
    b_state = AdamState.init({"entries": book.entries})

    rec_hist = np.zeros(cfg.steps)
    vq_hist = np.zeros(cfg.steps)
    commit_hist = np.zeros(cfg.steps)
    total_hist = np.zeros(cfg.steps)
    quantizing = cfg.quantize_enabled and k > 0

    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.steps):
            lr = cosine_warmup_lr(step, cfg)

            if quantizing:
                qres = quantize_set(book, params["zeta"])
                zeta_used = qres.quantized
                vq_loss, commit_loss = qres.vq_loss, qres.commit_loss
            else:
                zeta_used = params["zeta"]
                vq_loss = commit_loss = 0.0

            render, aux = render_arrays(
                params["mu"], params["theta"], params["log_s"], zeta_used,
                h, w, tile_size=cfg.tile_size, cutoff=cfg.cutoff,
                threads=cfg.threads, validate=False,
            )
            rec_loss = float(np.mean((render - data) ** 2))
            total = rec_loss + cfg.vq_weight * vq_loss + cfg.commit_weight * commit_loss
            if not np.isfinite(total):
                raise DivergenceError(
                    step, {"rec": rec_loss, "vq": vq_loss, "commit": commit_loss}
                )
            rec_hist[step] = rec_loss
            vq_hist[step] = vq_loss
            commit_hist[step] = commit_loss
            total_hist[step] = total

            grad_out = 2.0 * (render - data) / render.size
            d_mu, d_theta, d_log_s, d_zeta = backward_arrays(
                aux, grad_out, threads=cfg.threads
            )
            zeta_step = params["zeta"]  # pre-update values, the ones quantized above
            if quantizing:
                # straight-through copy of the render gradient + commitment pull
                d_zeta = d_zeta + cfg.commit_weight * 2.0 * (zeta_step - zeta_used) / k
            grads = {"mu": d_mu, "theta": d_theta, "log_s": d_log_s, "zeta": d_zeta}
            params, g_state = adam_step(params, grads, g_state, lr, cfg)

            if quantizing:
                def book_step(entries, g):
                    nonlocal b_state
                    stepped, b_state = adam_step(
                        {"entries": entries}, {"entries": g}, b_state, lr, cfg
                    )
                    return stepped["entries"]

                book_grad = cfg.vq_weight * codebook_gradient(
                    book, zeta_step, qres.indices
                )
                book = update_codebook(book, book_grad, book_step)

    final_zeta = params["zeta"]
    if quantizing:
        qres = quantize_set(book, params["zeta"])
        final_zeta = qres.quantized
    render, _ = render_arrays(
        params["mu"], params["theta"], params["log_s"], final_zeta,
        h, w, tile_size=cfg.tile_size, cutoff=cfg.cutoff,
        threads=cfg.threads, validate=False,
    )
    clamped = np.clip(render, 0.0, 1.0)
    ref = np.clip(data, 0.0, 1.0)
    final_psnr = metrics.psnr(clamped, ref)
    final_ssim = (
        metrics.ssim(clamped, ref)
        if min(h, w) >= metrics.SSIM_WIN
        else float("nan")
    )
    utilization = usage_histogram(book).utilization if quantizing else 0.0

    report = FitReport(
        rec_losses=rec_hist,
        vq_losses=vq_hist,
        commit_losses=commit_hist,
        total_losses=total_hist,
        final_psnr=final_psnr,
        final_ssim=final_ssim,
        utilization=utilization,
        seconds=time.perf_counter() - t0,
    )
    final_scene = GaussianSet.from_arrays(
        params["mu"], params["theta"], params["log_s"], params["zeta"], h, w
    )
    return final_scene, book, report
