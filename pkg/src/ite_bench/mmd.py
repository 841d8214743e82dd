"""Squared maximum mean discrepancy between treatment groups.

Uses the biased V-statistic estimator with an RBF Gaussian kernel
k(u, v) = exp(-||u - v||^2 / (2 * bandwidth^2)). The bandwidth is either
fixed or set by the median heuristic over the data at hand; in the latter
case gradients treat it as a constant (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, InsufficientDataError, NumericError, ShapeError


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel configuration; bandwidth None means median heuristic."""

    bandwidth: float | None = None

    def validate(self) -> "KernelSpec":
        if self.bandwidth is not None and not self.bandwidth > 0.0:
            raise ConfigError("kernel bandwidth must be positive")
        return self


def _as_samples(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a matrix of sample rows, got ndim={a.ndim}")
    if a.shape[0] < 1:
        raise InsufficientDataError(f"{name} must contain at least one sample")
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite values in {name}")
    return a


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.maximum(d2, 0.0)


def rbf_kernel(u, v, bandwidth: float) -> float:
    """k(u, v) = exp(-||u - v||^2 / (2 * bandwidth^2)) for two vectors."""
    if not bandwidth > 0.0:
        raise ConfigError("kernel bandwidth must be positive")
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"kernel inputs differ in dimension: {u.shape} vs {v.shape}")
    diff = u - v
    return float(np.exp(-(diff @ diff) / (2.0 * bandwidth * bandwidth)))


def median_heuristic(samples) -> float:
    """Median pairwise Euclidean distance; falls back to 1.0 when it is zero."""
    x = _as_samples(samples, "samples")
    if x.shape[0] < 2:
        raise InsufficientDataError("median heuristic needs at least two samples")
    d2 = _sqdist(x, x)
    iu = np.triu_indices(x.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0.0 else 1.0


def resolve_bandwidth(samples, kernel: KernelSpec) -> float:
    kernel.validate()
    if kernel.bandwidth is not None:
        return kernel.bandwidth
    return median_heuristic(samples)


def _gram(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-_sqdist(a, b) / (2.0 * bandwidth * bandwidth))


def _mmd2_terms(a: np.ndarray, b: np.ndarray, bandwidth: float):
    kaa = _gram(a, a, bandwidth)
    kbb = _gram(b, b, bandwidth)
    kab = _gram(a, b, bandwidth)
    value = kaa.mean() + kbb.mean() - 2.0 * kab.mean()
    return value, kaa, kbb, kab


def _mmd2_grads(a, b, kaa, kbb, kab, bandwidth):
    m, n = a.shape[0], b.shape[0]
    s2 = bandwidth * bandwidth
    # d k(u, v) / d u = k(u, v) * (v - u) / bandwidth^2, summed over the
    # V-statistic's ordered pairs.
    ga = (2.0 / (m * m * s2)) * (kaa @ a - kaa.sum(axis=1)[:, None] * a) - (
        2.0 / (m * n * s2)
    ) * (kab @ b - kab.sum(axis=1)[:, None] * a)
    gb = (2.0 / (n * n * s2)) * (kbb @ b - kbb.sum(axis=1)[:, None] * b) - (
        2.0 / (m * n * s2)
    ) * (kab.T @ a - kab.sum(axis=0)[:, None] * b)
    return ga, gb


def mmd2_biased(group_a, group_b, kernel: KernelSpec = KernelSpec()) -> float:
    """Biased V-statistic estimate of MMD^2, clamped at zero against roundoff."""
    a = _as_samples(group_a, "group_a")
    b = _as_samples(group_b, "group_b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"groups differ in embedding dimension: {a.shape[1]} vs {b.shape[1]}"
        )
    bw = resolve_bandwidth(np.vstack([a, b]), kernel)
    value, _, _, _ = _mmd2_terms(a, b, bw)
    return max(float(value), 0.0)


def mmd2_gradient(
    group_a, group_b, kernel: KernelSpec = KernelSpec()
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of mmd2_biased w.r.t. every sample in both groups.

    A median-heuristic bandwidth is treated as a constant.
    """
    a = _as_samples(group_a, "group_a")
    b = _as_samples(group_b, "group_b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"groups differ in embedding dimension: {a.shape[1]} vs {b.shape[1]}"
        )
    bw = resolve_bandwidth(np.vstack([a, b]), kernel)
    _, kaa, kbb, kab = _mmd2_terms(a, b, bw)
    return _mmd2_grads(a, b, kaa, kbb, kab, bw)


def treatment_regularization_loss(
    groups: Mapping[int, np.ndarray],
    kernel: KernelSpec = KernelSpec(),
) -> tuple[float, dict[int, np.ndarray]]:
    """Mean MMD^2 over all unordered pairs of non-empty groups.

    Returns (loss, gradients keyed like groups). Fewer than two non-empty
    groups is a degenerate batch, not an error: loss 0 with zero gradients.
    The median-heuristic bandwidth, when used, is computed once over the
    union of all non-empty groups.
    """
    kernel.validate()
    arrays: dict[int, np.ndarray] = {}
    for key in sorted(groups):
        arr = np.asarray(groups[key], dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        arrays[key] = arr
    grads = {key: np.zeros_like(arr) for key, arr in arrays.items()}
    present = [key for key, arr in arrays.items() if arr.shape[0] > 0]
    if len(present) < 2:
        return 0.0, grads
    dims = {arrays[key].shape[1] for key in present}
    if len(dims) != 1:
        raise ShapeError(f"groups differ in embedding dimension: {sorted(dims)}")
    for key in present:
        if not np.isfinite(arrays[key]).all():
            raise NumericError(f"non-finite values in group {key}")

    bw = resolve_bandwidth(np.vstack([arrays[key] for key in present]), kernel)
    n_pairs = 0
    total = 0.0
    for i, key_a in enumerate(present):
        for key_b in present[i + 1 :]:
            a, b = arrays[key_a], arrays[key_b]
            value, kaa, kbb, kab = _mmd2_terms(a, b, bw)
            ga, gb = _mmd2_grads(a, b, kaa, kbb, kab, bw)
            total += max(float(value), 0.0)
            grads[key_a] += ga
            grads[key_b] += gb
            n_pairs += 1
    loss = total / n_pairs
    for key in present:
        grads[key] /= n_pairs
    return loss, grads
