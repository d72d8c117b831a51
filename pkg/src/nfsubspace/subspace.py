"""Second-order statistics, eigen-analysis and model-order selection.

All functions accept a single observation (N x T) or a stack (..., N, T) and
broadcast over leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EIGEN_FLOOR = 1e-12


def empirical_covariance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    t = x.shape[-1]
    if t < 1:
        raise ValueError("need at least one snapshot")
    return x @ np.conj(np.swapaxes(x, -1, -2)) / t


def autocorrelation_features(x: np.ndarray, tau_max: int) -> np.ndarray:
    """Lagged correlations ``R[tau] = 1/(T - tau) sum_t x(t) x(t + tau)^H``.

    The sum runs over the ``T - tau`` valid pairs so that ``R[0]`` equals the
    empirical covariance. Returns an array of shape (..., tau_max + 1, N, N).
    """
    x = np.asarray(x)
    t = x.shape[-1]
    if not 0 <= tau_max < t:
        raise ValueError(f"tau_max={tau_max} must be below the snapshot count {t}")
    lags = []
    for tau in range(tau_max + 1):
        head = x[..., : t - tau]
        tail = x[..., tau:]
        lags.append(head @ np.conj(np.swapaxes(tail, -1, -2)) / (t - tau))
    return np.stack(lags, axis=-3)


class EigenDecomposition(NamedTuple):
    values: np.ndarray   # descending
    vectors: np.ndarray  # columns matched to values

    def noise_subspace(self, num_sources: int) -> np.ndarray:
        return self.vectors[..., :, num_sources:]

    def signal_subspace(self, num_sources: int) -> np.ndarray:
        return self.vectors[..., :, :num_sources]


def hermitian_evd(r: np.ndarray) -> EigenDecomposition:
    r = np.asarray(r)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("covariance has non-finite entries")
    r = (r + np.conj(np.swapaxes(r, -1, -2))) / 2
    values, vectors = np.linalg.eigh(r)
    return EigenDecomposition(values[..., ::-1].copy(), vectors[..., ::-1].copy())


@dataclass(frozen=True)
class ModelOrderCriterion:
    """Source-count rule: ``threshold`` (count eigenvalues above ``level``), ``mdl`` or ``aic``."""

    rule: str
    level: float | None = None

    def __post_init__(self):
        if self.rule not in ("threshold", "mdl", "aic"):
            raise ValueError(f"unknown model-order rule {self.rule!r}")
        if self.rule == "threshold" and (self.level is None or self.level <= 0):
            raise ValueError("threshold rule needs a positive level")

    @classmethod
    def threshold(cls, level: float) -> "ModelOrderCriterion":
        return cls("threshold", level)

    @property
    def name(self) -> str:
        return self.rule.upper() if self.rule != "threshold" else "Threshold"

    @classmethod
    def parse(cls, spec: str | None, default_level: float = 0.25):
        """``"mdl"``, ``"aic"``, ``"threshold"`` or ``"threshold:0.3"``; ``None``/``"none"`` -> None."""
        if spec is None or spec.lower() == "none":
            return None
        name, _, level = spec.lower().partition(":")
        if name == "threshold":
            return cls.threshold(float(level) if level else default_level)
        return cls(name)


MDL = ModelOrderCriterion("mdl")
AIC = ModelOrderCriterion("aic")


def information_criterion(eigenvalues: np.ndarray, num_snapshots: int, rule: str) -> np.ndarray:
    """Objective values for every candidate ``M = 0 .. N-1`` (descending eigenvalues).

    The penalty counts the ``M(2N - M)`` free parameters of the signal
    subspace, so it grows with ``M``. A ``2M(N - M)`` count would peak
    halfway and pin the estimate near ``N - 1``.
    """
    lam = np.maximum(np.asarray(eigenvalues, dtype=float), EIGEN_FLOOR)
    n = lam.size
    zeta = math.log(num_snapshots) if rule == "mdl" else 2.0
    t = num_snapshots
    out = np.empty(n)
    for m in range(n):
        noise = lam[m:]
        k = n - m
        out[m] = (-t * np.sum(np.log(noise)) + t * k * np.log(np.mean(noise))
                  + 0.5 * (m * (2 * n - m) + 1) * zeta)
    return out


def estimate_num_sources(eigenvalues, num_snapshots: int, rule: ModelOrderCriterion) -> int:
    """Estimated source count in ``0 .. N-1``; argmin ties go to the smaller count."""
    if isinstance(eigenvalues, EigenDecomposition):
        eigenvalues = eigenvalues.values
    lam = np.asarray(eigenvalues, dtype=float)
    if rule.rule == "threshold":
        return int(min(np.sum(lam > rule.level), lam.size - 1))
    return int(np.argmin(information_criterion(lam, num_snapshots, rule.rule)))


def spatial_smoothing(x: np.ndarray, subarray_len: int) -> np.ndarray:
    """Forward spatial smoothing: mean covariance of all contiguous subarrays."""
    x = np.asarray(x)
    n = x.shape[-2]
    if subarray_len < 2:
        raise ValueError("subarray length must be at least 2")
    if subarray_len > n:
        raise ValueError(f"subarray length {subarray_len} exceeds {n} elements")
    r = empirical_covariance(x)
    count = n - subarray_len + 1
    acc = np.zeros(r.shape[:-2] + (subarray_len, subarray_len), dtype=r.dtype)
    for k in range(count):
        acc += r[..., k:k + subarray_len, k:k + subarray_len]
    return acc / count


def default_subarray_len(num_elements: int, max_sources: int) -> int:
    return num_elements - math.ceil(max_sources / 2)
