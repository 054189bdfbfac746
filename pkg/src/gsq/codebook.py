"""Discrete codebook quantization of feature coefficients.

Quantization replaces each D-vector by its nearest codeword under the
Euclidean norm (ties broken by lowest index, so the lookup is a pure
deterministic function).  Training uses the two stop-gradient pulls

    vq_loss     = mean_k || sg[zeta_k] - e_idx(k) ||^2   (moves the codebook)
    commit_loss = mean_k || zeta_k - sg[e_idx(k)] ||^2   (moves the encoder side)

which are numerically the same scalar; they differ only in which side the
gradient flows to.  The lookup itself is bypassed by the straight-through
estimator: the forward value is the codeword, the backward gradient is
copied unchanged onto the pre-quantization vector.

Usage counters record every quantization query since the last reset and
feed the utilization / top-20%-cumulative report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyStatisticsError, InvalidParameterError, ShapeError


@dataclass
class Codebook:
    """N x D table of embedding vectors plus resettable usage counters.

    Lookups are read-only on ``entries`` and may run concurrently (counter
    bumps are GIL-serialized); replacing entries via update_codebook needs
    exclusive access.
    """

    entries: np.ndarray
    usage_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.entries = np.ascontiguousarray(np.asarray(self.entries, dtype=np.float64))
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise ShapeError(f"entries must be N x D with N >= 1, got {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise InvalidParameterError("codebook entries contain non-finite values")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.entries.shape[0], dtype=np.int64)
        else:
            self.usage_counts = np.asarray(self.usage_counts, dtype=np.int64).copy()
            if self.usage_counts.shape != (self.entries.shape[0],):
                raise ShapeError("usage_counts length must match entry count")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0

    @classmethod
    def init_from_samples(cls, samples, size: int, rng: np.random.Generator) -> "Codebook":
        """Seed N entries from rows of a sample batch (with replacement if N
        exceeds the batch), which avoids early dead codes better than a
        uniform random init."""
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ShapeError(f"need a non-empty M x D sample batch, got {samples.shape}")
        picks = rng.choice(samples.shape[0], size=size, replace=size > samples.shape[0])
        return cls(samples[picks].copy())


@dataclass(frozen=True)
class QuantizationResult:
    indices: np.ndarray    # K ints in [0, N)
    quantized: np.ndarray  # K x D, exact codebook rows
    vq_loss: float
    commit_loss: float


@dataclass(frozen=True)
class UsageStats:
    frequencies: np.ndarray     # sorted descending, sums to 1
    utilization: float          # fraction of codewords used at least once
    top20_cumulative: float     # mass of the top 20% most-used codewords


def _sq_distances(book: Codebook, zetas: np.ndarray) -> np.ndarray:
    # literal (z - e)^2 sum, matching a brute-force scan bit for bit
    diff = zetas[:, np.newaxis, :] - book.entries[np.newaxis, :, :]
    return np.sum(diff * diff, axis=2)


def nearest(book: Codebook, query) -> int:
    """Index of the closest codeword; ties go to the lowest index."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (book.dim,):
        raise ShapeError(f"query shape {query.shape} does not match codebook dim {book.dim}")
    idx = int(np.argmin(_sq_distances(book, query[np.newaxis, :])[0]))
    book.usage_counts[idx] += 1
    return idx


def quantize_set(book: Codebook, zetas) -> QuantizationResult:
    """Per-row nearest lookup with the two stop-gradient losses (means over rows)."""
    zetas = np.asarray(zetas, dtype=np.float64)
    if zetas.ndim != 2 or zetas.shape[1] != book.dim:
        raise ShapeError(f"zetas must be K x {book.dim}, got {zetas.shape}")
    k = zetas.shape[0]
    if k == 0:
        return QuantizationResult(
            indices=np.zeros(0, dtype=np.int64),
            quantized=np.zeros((0, book.dim)),
            vq_loss=0.0,
            commit_loss=0.0,
        )
    d2 = _sq_distances(book, zetas)
    indices = np.argmin(d2, axis=1)
    np.add.at(book.usage_counts, indices, 1)
    quantized = book.entries[indices].copy()
    mean_sq = float(np.mean(np.sum((zetas - quantized) ** 2, axis=1)))
    return QuantizationResult(
        indices=indices, quantized=quantized, vq_loss=mean_sq, commit_loss=mean_sq
    )


def straight_through(zeta, codeword, upstream_grad):
    """Forward the codeword, copy the upstream gradient onto zeta unchanged.

    The caller adds the commitment pull 2 * (zeta - codeword) * weight
    separately; this helper only models the lookup bypass.
    """
    zeta = np.asarray(zeta, dtype=np.float64)
    codeword = np.asarray(codeword, dtype=np.float64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if not (zeta.shape == codeword.shape == upstream_grad.shape):
        raise ShapeError(
            f"mismatched shapes: zeta {zeta.shape}, codeword {codeword.shape}, "
            f"grad {upstream_grad.shape}"
        )
    return codeword.copy(), upstream_grad.copy()


def usage_histogram(book: Codebook) -> UsageStats:
    """Frequency report over recorded queries (error if none recorded)."""
    total = int(book.usage_counts.sum())
    if total == 0:
        raise EmptyStatisticsError("no quantization queries recorded")
    freq = np.sort(book.usage_counts / total)[::-1]
    utilization = float(np.count_nonzero(book.usage_counts) / book.size)
    n_top = math.ceil(0.2 * book.size)
    return UsageStats(
        frequencies=freq,
        utilization=utilization,
        top20_cumulative=float(freq[:n_top].sum()),
    )


def codebook_gradient(book: Codebook, zetas, indices) -> np.ndarray:
    """d(vq_loss)/d(entries): 2 (e_idx - zeta) / K scattered onto matched rows.

    Unused entries receive exactly zero.
    """
    zetas = np.asarray(zetas, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    if zetas.ndim != 2 or zetas.shape[1] != book.dim:
        raise ShapeError(f"zetas must be K x {book.dim}, got {zetas.shape}")
    if indices.shape != (zetas.shape[0],):
        raise ShapeError("indices length must match zetas rows")
    grads = np.zeros_like(book.entries)
    if zetas.shape[0]:
        np.add.at(grads, indices, 2.0 * (book.entries[indices] - zetas) / zetas.shape[0])
    return grads


def update_codebook(book: Codebook, grads, step) -> Codebook:
    """Apply the caller's optimizer step to the entries; usage counts carry over.

    ``step`` maps (entries, grads) to new entries (e.g. an SGD or Adam rule).
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != book.entries.shape:
        raise ShapeError(
            f"grads shape {grads.shape} does not match entries {book.entries.shape}"
        )
    new_entries = np.asarray(step(book.entries, grads), dtype=np.float64)
    if new_entries.shape != book.entries.shape:
        raise ShapeError("optimizer step changed the entries shape")
    return Codebook(new_entries, usage_counts=book.usage_counts)
