"""Model-based near-field localization on a fixed angle/range grid."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .array_signal import ArrayGeometry, SteeringModel, fresnel_region, steering_matrix
from .subspace import (ModelOrderCriterion, default_subarray_len, empirical_covariance,
                       estimate_num_sources, hermitian_evd, spatial_smoothing)

logger = logging.getLogger(__name__)

TINY = np.finfo(float).tiny
# Grid maxima whose steering vectors are this collinear belong to one source:
# a sharp angle-range ridge sampled on a coarse grid yields several of them.
DUPLICATE_COHERENCE = 0.99


class EmptyNoiseSubspaceError(ValueError):
    pass


@dataclass(eq=False)
class SearchGrid:
    angles: np.ndarray
    ranges: np.ndarray
    _steering_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.ranges = np.asarray(self.ranges, dtype=float)
        for name, axis in (("angle", self.angles), ("range", self.ranges)):
            if axis.ndim != 1 or axis.size < 2 or np.any(np.diff(axis) <= 0):
                raise ValueError(f"{name} axis must be strictly increasing with >= 2 points")

    @classmethod
    def default(cls, geometry: ArrayGeometry, angle_step_deg: float = 0.5,
                angle_limit_deg: float = 60.0, range_step: float = 0.5,
                range_limit: str = "half") -> "SearchGrid":
        """Uniform grid from the Fresnel limit to half (``"half"``) or the full
        (``"full"``) Fraunhofer distance."""
        region = fresnel_region(geometry)
        upper = region.rho_max / 2 if range_limit == "half" else region.rho_max
        n_ang = int(round(2 * angle_limit_deg / angle_step_deg)) + 1
        angles = np.deg2rad(np.linspace(-angle_limit_deg, angle_limit_deg, n_ang))
        ranges = np.arange(region.rho_min, upper + 1e-9, range_step)
        return cls(angles, ranges)

    @property
    def shape(self) -> tuple[int, int]:
        return self.angles.size, self.ranges.size

    @property
    def size(self) -> int:
        return self.angles.size * self.ranges.size

    def steering(self, geometry: ArrayGeometry, model: SteeringModel) -> np.ndarray:
        """Steering vectors for every cell, shape (N, G_A, G_R); cached per geometry/model."""
        key = (geometry, SteeringModel(model))
        if key not in self._steering_cache:
            th, rh = np.meshgrid(self.angles, self.ranges, indexing="ij")
            a = steering_matrix(th.ravel(), rh.ravel(), geometry, model)
            self._steering_cache[key] = a.reshape(geometry.num_elements, *self.shape)
        return self._steering_cache[key]


@dataclass
class Spectrum2D:
    values: np.ndarray
    grid: SearchGrid


@dataclass
class Estimate:
    angles: np.ndarray
    ranges: np.ndarray
    far_field: np.ndarray
    method: str = ""
    rule: str | None = None

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float).reshape(-1)
        self.ranges = np.asarray(self.ranges, dtype=float).reshape(-1)
        self.far_field = np.asarray(self.far_field, dtype=bool).reshape(-1)
        if not self.angles.size == self.ranges.size == self.far_field.size:
            raise ValueError("angles, ranges and far-field flags must have equal length")

    @property
    def num_sources(self) -> int:
        return self.angles.size

    @classmethod
    def empty(cls, method: str = "", rule: str | None = None) -> "Estimate":
        return cls(np.empty(0), np.empty(0), np.empty(0, dtype=bool), method, rule)


def music_spectrum_2d(noise_subspace: np.ndarray, grid: SearchGrid, geometry: ArrayGeometry,
                      model: SteeringModel = SteeringModel.FRESNEL) -> Spectrum2D:
    """``P(theta, rho) = 1 / ||U_W^H a(theta, rho)||^2`` over the whole grid.

    ``noise_subspace`` may carry leading batch axes; the spectrum values then
    have shape (..., G_A, G_R).
    """
    u = np.asarray(noise_subspace)
    if u.shape[-1] == 0:
        raise EmptyNoiseSubspaceError("noise subspace is empty (M_hat = N)")
    a = grid.steering(geometry, model)
    n = a.shape[0]
    proj = np.conj(np.swapaxes(u, -1, -2)) @ a.reshape(n, -1)
    denom = np.sum(np.abs(proj) ** 2, axis=-2)
    values = 1.0 / np.maximum(denom, TINY)
    return Spectrum2D(values.reshape(u.shape[:-2] + grid.shape), grid)


def _strict_local_maxima(values: np.ndarray) -> np.ndarray:
    padded = np.pad(values, 1, constant_values=-np.inf)
    g_a, g_r = values.shape
    mask = np.ones_like(values, dtype=bool)
    for da in (-1, 0, 1):
        for dr in (-1, 0, 1):
            if da == dr == 0:
                continue
            neighbour = padded[1 + da:1 + da + g_a, 1 + dr:1 + dr + g_r]
            mask &= values > neighbour
    return mask


def find_peaks_2d(spectrum: Spectrum2D, k: int, method: str = "", rule: str | None = None,
                  steering: np.ndarray | None = None, max_coherence: float | None = None
                  ) -> Estimate:
    """The ``k`` largest strict 8-neighbourhood maxima, in descending order.

    With ``steering`` (N x G_A x G_R) and ``max_coherence``, a maximum whose
    normalized steering vector has ``|a_i^H a_j| >= max_coherence`` with an
    already accepted peak is treated as a duplicate of that source and skipped.
    Missing peaks are filled with the largest remaining cells; ties are broken
    by row-major cell order, so a flat spectrum returns the first cell.
    Sources on the last range cell are flagged far-field.
    """
    values = np.asarray(spectrum.values)
    if k < 1:
        raise ValueError("k must be positive")
    if k > values.size:
        raise ValueError(f"cannot pick {k} peaks from {values.size} cells")
    order = np.argsort(-values.ravel(), kind="stable")
    is_peak = _strict_local_maxima(values).ravel()
    candidates = order[is_peak[order]]
    if steering is not None and max_coherence is not None:
        a = steering.reshape(steering.shape[0], -1)
        a = a / np.linalg.norm(a, axis=0)
        chosen = []
        for i in candidates:
            if chosen and np.max(np.abs(np.conj(a[:, chosen]).T @ a[:, i])) >= max_coherence:
                continue
            chosen.append(int(i))
            if len(chosen) == k:
                break
    else:
        chosen = [int(i) for i in candidates[:k]]
    if len(chosen) < k:
        taken = set(chosen)
        chosen += [int(i) for i in order if i not in taken][: k - len(chosen)]
    ia, ir = np.unravel_index(np.asarray(chosen, dtype=int), values.shape)
    grid = spectrum.grid
    return Estimate(grid.angles[ia], grid.ranges[ir], ir == grid.ranges.size - 1, method, rule)


def esprit_doa(r: np.ndarray, num_sources: int, geometry: ArrayGeometry) -> np.ndarray:
    """Least-squares ESPRIT on the two maximally overlapping subarrays.

    Returns ascending angles in radians. Eigen-phases that map outside the
    visible region are clamped to +-90 degrees with a warning.
    """
    n = r.shape[-1]
    if not 1 <= num_sources < n:
        raise ValueError(f"ESPRIT needs 1 <= M < N, got M={num_sources}, N={n}")
    us = hermitian_evd(r).signal_subspace(num_sources)
    phi, *_ = np.linalg.lstsq(us[:-1], us[1:], rcond=None)
    phases = np.angle(np.linalg.eigvals(phi))
    arg = -phases * geometry.wavelength / (2 * np.pi * geometry.spacing)
    if np.any(np.abs(arg) > 1):
        warnings.warn("ESPRIT phase outside the visible region; clamping", RuntimeWarning)
        arg = np.clip(arg, -1.0, 1.0)
    return np.sort(np.arcsin(arg))


def range_music_1d(noise_subspace: np.ndarray, theta: float, range_axis: np.ndarray,
                   geometry: ArrayGeometry, model: SteeringModel = SteeringModel.FRESNEL
                   ) -> tuple[float, np.ndarray]:
    """Range estimate for one angle: argmax of the 1D MUSIC spectrum along ``range_axis``.

    Returns ``(rho_hat, spectrum)``; an argmax on the last axis cell means far-field.
    """
    range_axis = np.asarray(range_axis, dtype=float)
    if range_axis.size == 0:
        raise ValueError("empty range axis")
    a = steering_matrix(np.full(range_axis.shape, theta), range_axis, geometry, model)
    denom = np.sum(np.abs(np.conj(noise_subspace).T @ a) ** 2, axis=0)
    spectrum = 1.0 / np.maximum(denom, TINY)
    return float(range_axis[int(np.argmax(spectrum))]), spectrum


def localize_2d_music(x: np.ndarray, geometry: ArrayGeometry, grid: SearchGrid,
                      rule: ModelOrderCriterion | None = None, num_sources: int | None = None,
                      coherent: bool = False, subarray_len: int | None = None,
                      model: SteeringModel = SteeringModel.FRESNEL,
                      max_sources: int = 2,
                      max_coherence: float | None = DUPLICATE_COHERENCE) -> Estimate:
    """Near-field 2D MUSIC; with ``coherent`` the covariance is spatially smoothed first.

    Pass ``num_sources`` to skip model-order estimation (``rule`` is then ignored).
    """
    if rule is None and num_sources is None:
        raise ValueError("give either a model-order rule or the number of sources")
    method = "2D-MUSIC+SPS" if coherent else "2D-MUSIC"
    if coherent:
        length = subarray_len or default_subarray_len(geometry.num_elements, max_sources)
        r = spatial_smoothing(x, length)
        geometry = geometry.subarray(length)
    else:
        r = empirical_covariance(x)
    eig = hermitian_evd(r)
    if num_sources is None:
        m_hat = estimate_num_sources(eig.values, x.shape[-1], rule)
        rule_name = rule.name
    else:
        m_hat, rule_name = num_sources, None
    if m_hat == 0:
        return Estimate.empty(method, rule_name)
    spectrum = music_spectrum_2d(eig.noise_subspace(m_hat), grid, geometry, model)
    return find_peaks_2d(spectrum, m_hat, method, rule_name,
                         grid.steering(geometry, model), max_coherence)


def diagonal_load(r: np.ndarray, factor: float = 1e-6) -> np.ndarray:
    n = r.shape[-1]
    return r + factor * np.real(np.trace(r)) / n * np.eye(n)


def beampattern(r: np.ndarray, grid: SearchGrid, geometry: ArrayGeometry,
                model: SteeringModel = SteeringModel.FRESNEL, kind: str = "bartlett"
                ) -> Spectrum2D:
    """Bartlett (``a^H R a / ||a||^2``) or MVDR (``1 / a^H R^-1 a``) power map."""
    a = grid.steering(geometry, model).reshape(geometry.num_elements, -1)
    if kind == "bartlett":
        power = np.real(np.sum(np.conj(a) * (r @ a), axis=0)) / np.sum(np.abs(a) ** 2, axis=0)
    elif kind == "mvdr":
        lam = np.linalg.eigvalsh((r + r.conj().T) / 2)
        if lam[0] <= 1e-10 * lam[-1]:
            r = diagonal_load(r)
        r_inv = np.linalg.inv(r)
        power = 1.0 / np.maximum(np.real(np.sum(np.conj(a) * (r_inv @ a), axis=0)), TINY)
    else:
        raise ValueError(f"unknown beampattern kind {kind!r}")
    return Spectrum2D(power.reshape(grid.shape), grid)


def write_spectrum_csv(spectrum: Spectrum2D, path: str | Path) -> Path:
    """Rows are angles (degrees), columns ranges (meters); first cell is the axis label."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_deg/range_m"] + [repr(float(r)) for r in spectrum.grid.ranges])
        for ang, row in zip(np.rad2deg(spectrum.grid.angles), spectrum.values):
            w.writerow([repr(float(ang))] + [repr(float(v)) for v in row])
    return path


def write_range_spectrum_csv(range_axis, spectrum, path: str | Path, theta: float) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_deg", "range_m", "value"])
        for r, v in zip(range_axis, spectrum):
            w.writerow([repr(math.degrees(theta)), repr(float(r)), repr(float(v))])
    return path
