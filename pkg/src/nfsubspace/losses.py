"""Training losses, permutation-matched errors and the differentiable Maskpeak."""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .array_signal import ArrayGeometry, SteeringModel
from .autodiff import CDTYPE, DTYPE, hermitian_evd_diff

EXHAUSTIVE_LIMIT = 8
EIGEN_FLOOR = 1e-12


def steering_torch(theta: torch.Tensor, rho: torch.Tensor, geometry: ArrayGeometry,
                   model: SteeringModel = SteeringModel.FRESNEL) -> torch.Tensor:
    """Differentiable steering vectors; ``theta``/``rho`` broadcast to (...,), output (..., N)."""
    theta, rho = torch.broadcast_tensors(torch.as_tensor(theta, dtype=DTYPE),
                                         torch.as_tensor(rho, dtype=DTYPE))
    lam = geometry.wavelength
    p = torch.as_tensor(geometry.positions, dtype=DTYPE)
    th = theta.unsqueeze(-1)
    rh = rho.unsqueeze(-1)
    if SteeringModel(model) is SteeringModel.EXACT:
        dist = torch.sqrt(rh ** 2 - 2 * rh * p * torch.sin(th) + p ** 2)
        return torch.exp(-1j * (2 * math.pi / lam) * (rh - dist).to(CDTYPE))
    phase = (-(2 * math.pi / lam) * p * torch.sin(th)
             + (math.pi / lam) * p ** 2 * torch.cos(th) ** 2 / rh)
    a = torch.exp(1j * phase.to(CDTYPE))
    if SteeringModel(model) is SteeringModel.AMPLITUDE:
        dist = torch.sqrt(rh ** 2 - 2 * rh * p * torch.sin(th) + p ** 2)
        a = a * (rh / dist).to(CDTYPE)
    return a


def inverse_spectrum(noise_subspace: torch.Tensor, steering: torch.Tensor) -> torch.Tensor:
    """``||U_W^H a||^2`` for steering vectors (B, ..., N) against (B, N, N-M) subspaces."""
    batch = noise_subspace.shape[0]
    a = steering.reshape(batch, -1, steering.shape[-1])
    proj = a.conj() @ noise_subspace
    return (proj.abs() ** 2).sum(-1).reshape(steering.shape[:-1])


def spectrum_loss(r_hat: torch.Tensor, angles: torch.Tensor, ranges: torch.Tensor,
                  geometry: ArrayGeometry, model: SteeringModel = SteeringModel.FRESNEL,
                  eig=None) -> torch.Tensor:
    """Sum over true sources of the inverse MUSIC spectrum, per sample (shape (B,)).

    ``angles``/``ranges`` are (B, M) with the true M; ``eig`` reuses an
    existing ``(values, vectors)`` decomposition of ``r_hat``.
    """
    m = angles.shape[-1]
    n = r_hat.shape[-1]
    if m >= n:
        raise ValueError(f"spectrum loss needs M < N, got M={m}, N={n}")
    _, vectors = eig if eig is not None else hermitian_evd_diff(r_hat)
    a = steering_torch(angles, ranges, geometry, model)
    return inverse_spectrum(vectors[..., m:], a).sum(-1)


def eigen_threshold_loss(eigenvalues: torch.Tensor, m: int, level: float) -> torch.Tensor:
    """``(lambda_M - level) * (lambda_{M+1} - level)`` on descending eigenvalues."""
    n = eigenvalues.shape[-1]
    if not 1 <= m <= n - 1:
        raise ValueError(f"eigen-threshold loss needs 1 <= M <= N-1, got M={m}")
    return (eigenvalues[..., m - 1] - level) * (eigenvalues[..., m] - level)


def model_order_ic_loss(eigenvalues: torch.Tensor, m: int) -> torch.Tensor:
    """log(arithmetic mean) - mean(log) of the noise eigenvalues; zero iff they are equal."""
    n = eigenvalues.shape[-1]
    if not 0 <= m <= n - 2:
        raise ValueError(f"model-order loss needs at least two noise eigenvalues, M={m}")
    noise = eigenvalues[..., m:].clamp_min(EIGEN_FLOOR)
    return -torch.log(noise).mean(-1) + torch.log(noise.mean(-1))


def regularizer(eigenvalues: torch.Tensor, m: int, kind: str, level: float) -> torch.Tensor:
    if kind == "threshold":
        return eigen_threshold_loss(eigenvalues, m, level)
    if kind == "ic":
        return model_order_ic_loss(eigenvalues, m)
    if kind == "none":
        return torch.zeros(eigenvalues.shape[:-1], dtype=eigenvalues.dtype)
    raise ValueError(f"unknown regularizer {kind!r}")


def wrap_angle(x):
    """Wrap into (-pi/2, pi/2] (modulo pi)."""
    if isinstance(x, torch.Tensor):
        return math.pi / 2 - torch.remainder(math.pi / 2 - x, math.pi)
    return math.pi / 2 - np.mod(math.pi / 2 - np.asarray(x, dtype=float), math.pi)


@lru_cache(maxsize=None)
def _permutations(m: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(m))), dtype=int).reshape(-1, m)


def best_permutation(cost: np.ndarray) -> np.ndarray:
    """Permutation ``p`` minimizing ``sum_i cost[i, p[i]]`` for a square cost matrix.

    Exhaustive search up to 8 sources, Hungarian assignment beyond.
    """
    cost = np.asarray(cost, dtype=float)
    m = cost.shape[0]
    if m == 0:
        return np.empty(0, dtype=int)
    if m <= EXHAUSTIVE_LIMIT:
        perms = _permutations(m)
        totals = cost[np.arange(m), perms].sum(axis=1)
        return perms[int(np.argmin(totals))]
    rows, cols = linear_sum_assignment(cost)
    return cols[np.argsort(rows)]


def _angle_cost(theta, theta_hat):
    diff = wrap_angle(theta[..., :, None] - theta_hat[..., None, :])
    return diff ** 2


def rmspe_angle(theta, theta_hat) -> float:
    """Permutation-minimized RMS of the mod-pi angle error (radians)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    theta_hat = np.asarray(theta_hat, dtype=float).reshape(-1)
    if theta.size != theta_hat.size:
        raise ValueError("angle vectors must have equal length")
    cost = _angle_cost(theta, theta_hat)
    perm = best_permutation(cost)
    return float(np.sqrt(cost[np.arange(theta.size), perm].sum() / theta.size))


def rmspe_angle_torch(theta: torch.Tensor, theta_hat: torch.Tensor
                      ) -> tuple[torch.Tensor, np.ndarray]:
    """Batched angle RMSPE (B,) and the matching permutations (B, M).

    ``perm[b, i]`` is the estimate index paired with true source ``i``.
    """
    cost = _angle_cost(theta, theta_hat)
    perms = np.stack([best_permutation(c) for c in cost.detach().numpy()])
    idx = torch.as_tensor(perms)
    matched = torch.gather(cost, -1, idx.unsqueeze(-1)).squeeze(-1)
    return torch.sqrt(matched.mean(-1)), perms


def range_loss(rho: torch.Tensor, rho_hat: torch.Tensor, perms: np.ndarray) -> torch.Tensor:
    """``||rho - P rho_hat|| / sqrt(M)`` using the angle permutation, not a new matching."""
    idx = torch.as_tensor(np.asarray(perms))
    matched = torch.gather(rho_hat, -1, idx)
    return torch.sqrt(((rho - matched) ** 2).mean(-1))


def cartesian(theta, rho):
    if isinstance(theta, torch.Tensor):
        return torch.stack([rho * torch.sin(theta), rho * torch.cos(theta)], dim=-1)
    theta = np.asarray(theta, dtype=float)
    rho = np.asarray(rho, dtype=float)
    return np.stack([rho * np.sin(theta), rho * np.cos(theta)], axis=-1)


def _position_cost(c, c_hat):
    diff = c[..., :, None, :] - c_hat[..., None, :, :]
    return (diff ** 2).sum(-1)


def position_loss(theta, rho, theta_hat, rho_hat) -> float:
    """Permutation-minimized Cartesian RMS position error in meters."""
    c = cartesian(theta, rho)
    c_hat = cartesian(theta_hat, rho_hat)
    if c.shape != c_hat.shape:
        raise ValueError("truth and estimate must have the same number of sources")
    cost = _position_cost(c, c_hat)
    perm = best_permutation(cost)
    return float(np.sqrt(cost[np.arange(c.shape[0]), perm].sum() / c.shape[0]))


def position_loss_torch(theta, rho, theta_hat, rho_hat) -> torch.Tensor:
    cost = _position_cost(cartesian(theta, rho), cartesian(theta_hat, rho_hat))
    perms = np.stack([best_permutation(c) for c in cost.detach().numpy()])
    matched = torch.gather(cost, -1, torch.as_tensor(perms).unsqueeze(-1)).squeeze(-1)
    return torch.sqrt(matched.mean(-1))


def subset_position_error(theta, rho, theta_hat, rho_hat) -> float | None:
    """Best ``min(M, M_hat)``-subset matching error; None when either side is empty."""
    c = cartesian(np.asarray(theta, float).reshape(-1), np.asarray(rho, float).reshape(-1))
    c_hat = cartesian(np.asarray(theta_hat, float).reshape(-1),
                      np.asarray(rho_hat, float).reshape(-1))
    if len(c) == 0 or len(c_hat) == 0:
        return None
    cost = _position_cost(c, c_hat)
    if len(c) == len(c_hat):
        perm = best_permutation(cost)
        total = cost[np.arange(len(c)), perm].sum()
    else:
        rows, cols = linear_sum_assignment(cost)
        total = cost[rows, cols].sum()
    return float(np.sqrt(total / min(len(c), len(c_hat))))


def subset_angle_error(theta, theta_hat) -> float | None:
    theta = np.asarray(theta, float).reshape(-1)
    theta_hat = np.asarray(theta_hat, float).reshape(-1)
    if theta.size == 0 or theta_hat.size == 0:
        return None
    cost = _angle_cost(theta, theta_hat)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / rows.size))


def maskpeak(spectrum: torch.Tensor, range_axis, half_width: int) -> torch.Tensor:
    """Soft argmax over a ``2L+1`` window centred on the hard peak of each spectrum.

    ``spectrum`` has shape (..., G). The centre is chosen without gradient;
    the window is clipped at the axis ends and the estimate is
    ``ranges[window] . softmax(spectrum[window])``.
    """
    if half_width < 1:
        raise ValueError("mask half-width must be at least 1")
    g = spectrum.shape[-1]
    if g == 0:
        raise ValueError("empty spectrum")
    axis = torch.as_tensor(np.asarray(range_axis, dtype=float), dtype=DTYPE)
    center = spectrum.detach().argmax(-1, keepdim=True)
    offsets = torch.arange(-half_width, half_width + 1)
    idx = center + offsets
    valid = (idx >= 0) & (idx < g)
    idx = idx.clamp(0, g - 1)
    values = torch.gather(spectrum, -1, idx)
    logits = torch.where(valid, values, torch.full_like(values, -math.inf))
    weights = torch.softmax(logits, dim=-1)
    return (weights * axis[idx]).sum(-1)
