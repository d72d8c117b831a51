"""Uniform linear array geometry, near-field steering models and snapshot simulation.

Element ``n`` (1-based) of the nominal array sits at ``n * d`` along the array
axis; optional per-element offsets model an unknown miscalibration that is
applied when generating data but never seen by the localizers.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 3e8
BLOB_DTYPE = np.dtype("<f8")


class InvalidGeometryError(ValueError):
    pass


class InvalidSceneError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class SteeringModel(str, enum.Enum):
    """Which near-field steering vector formula generates the array response."""

    FRESNEL = "fresnel"
    AMPLITUDE = "amplitude"
    EXACT = "exact"


class Coherence(str, enum.Enum):
    NON_COHERENT = "non_coherent"
    COHERENT = "coherent"


class Regime(str, enum.Enum):
    NEAR_FIELD = "near_field"
    FAR_FIELD = "far_field"


@dataclass(frozen=True)
class ArrayGeometry:
    num_elements: int
    spacing: float
    wavelength: float
    element_offsets: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.num_elements < 2:
            raise InvalidGeometryError(
                f"a ULA needs at least 2 elements (zero aperture), got {self.num_elements}")
        if self.spacing <= 0 or self.wavelength <= 0:
            raise InvalidGeometryError("spacing and wavelength must be positive")
        if self.element_offsets is None:
            object.__setattr__(self, "element_offsets", (0.0,) * self.num_elements)
        elif len(self.element_offsets) != self.num_elements:
            raise InvalidGeometryError("one offset per element is required")
        else:
            object.__setattr__(self, "element_offsets",
                               tuple(float(o) for o in self.element_offsets))

    @classmethod
    def half_wavelength(cls, num_elements: int, carrier_hz: float) -> "ArrayGeometry":
        wavelength = SPEED_OF_LIGHT / carrier_hz
        return cls(num_elements, wavelength / 2, wavelength)

    @property
    def aperture(self) -> float:
        return (self.num_elements - 1) * self.spacing

    @property
    def indices(self) -> np.ndarray:
        return np.arange(1, self.num_elements + 1, dtype=float)

    @property
    def positions(self) -> np.ndarray:
        """Actual element positions in meters, offsets included."""
        return self.indices * self.spacing + np.asarray(self.element_offsets)

    @property
    def is_calibrated(self) -> bool:
        return not any(self.element_offsets)

    def nominal(self) -> "ArrayGeometry":
        """The geometry a localizer assumes: same array without offsets."""
        return ArrayGeometry(self.num_elements, self.spacing, self.wavelength)

    def subarray(self, length: int) -> "ArrayGeometry":
        return ArrayGeometry(length, self.spacing, self.wavelength,
                             self.element_offsets[:length])

    def to_dict(self) -> dict:
        return {"num_elements": self.num_elements, "spacing": self.spacing,
                "wavelength": self.wavelength, "element_offsets": list(self.element_offsets)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        offsets = d.get("element_offsets")
        return cls(int(d["num_elements"]), float(d["spacing"]), float(d["wavelength"]),
                   tuple(offsets) if offsets is not None else None)


@dataclass(frozen=True)
class FresnelRegion:
    rho_min: float
    rho_max: float

    def __post_init__(self):
        if not 0 < self.rho_min < self.rho_max:
            raise InvalidGeometryError("Fresnel region requires 0 < rho_min < rho_max")


def fresnel_region(geometry: ArrayGeometry) -> FresnelRegion:
    """Radiative near-field bounds: Fresnel limit and Fraunhofer distance."""
    aperture = geometry.aperture
    lam = geometry.wavelength
    return FresnelRegion(rho_min=(aperture ** 4 / (8 * lam)) ** (1 / 3),
                         rho_max=2 * aperture ** 2 / lam)


@dataclass(frozen=True)
class SourceScene:
    """Ground truth for one sample.

    ``ranges`` are the labels; far-field sources carry the Fraunhofer sentinel
    there while ``physical_ranges`` keeps the distance used for simulation.
    """

    angles: tuple[float, ...]
    ranges: tuple[float, ...]
    coherence: Coherence = Coherence.NON_COHERENT
    regimes: tuple[Regime, ...] | None = None
    physical_ranges: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "ranges", tuple(float(r) for r in self.ranges))
        object.__setattr__(self, "coherence", Coherence(self.coherence))
        if len(self.angles) != len(self.ranges) or not self.angles:
            raise InvalidSceneError("need M >= 1 sources with one range per angle")
        if any(abs(a) > math.pi / 2 + 1e-12 for a in self.angles):
            raise InvalidSceneError("angles must lie in [-pi/2, pi/2]")
        if self.regimes is None:
            object.__setattr__(self, "regimes", (Regime.NEAR_FIELD,) * len(self.angles))
        else:
            object.__setattr__(self, "regimes", tuple(Regime(r) for r in self.regimes))
        if self.physical_ranges is None:
            object.__setattr__(self, "physical_ranges", self.ranges)
        else:
            object.__setattr__(self, "physical_ranges",
                               tuple(float(r) for r in self.physical_ranges))
        if len(self.regimes) != self.num_sources or len(self.physical_ranges) != self.num_sources:
            raise InvalidSceneError("per-source fields must have M entries")

    @property
    def num_sources(self) -> int:
        return len(self.angles)

    @property
    def far_field(self) -> tuple[bool, ...]:
        return tuple(r is Regime.FAR_FIELD for r in self.regimes)

    def to_dict(self) -> dict:
        return {"angles": list(self.angles), "ranges": list(self.ranges),
                "coherence": self.coherence.value,
                "regimes": [r.value for r in self.regimes],
                "physical_ranges": list(self.physical_ranges)}

    @classmethod
    def from_dict(cls, d: dict) -> "SourceScene":
        return cls(tuple(d["angles"]), tuple(d["ranges"]), Coherence(d["coherence"]),
                   tuple(Regime(r) for r in d["regimes"]), tuple(d["physical_ranges"]))


def steering_matrix(angles, ranges, geometry: ArrayGeometry,
                    model: SteeringModel = SteeringModel.FRESNEL) -> np.ndarray:
    """Steering vectors for paired ``(angles[k], ranges[k])`` as columns of an N x K matrix."""
    theta = np.atleast_1d(np.asarray(angles, dtype=float))
    rho = np.atleast_1d(np.asarray(ranges, dtype=float))
    theta, rho = np.broadcast_arrays(theta, rho)
    if np.any(rho <= 0):
        raise ValueError("ranges must be positive")
    model = SteeringModel(model)
    lam = geometry.wavelength
    p = geometry.positions[:, None]
    sin_t = np.sin(theta)[None, :]
    cos_t = np.cos(theta)[None, :]
    if model is SteeringModel.EXACT:
        dist = np.sqrt(rho[None, :] ** 2 - 2 * rho[None, :] * p * sin_t + p ** 2)
        return np.exp(-1j * (2 * np.pi / lam) * (rho[None, :] - dist))
    phase = -(2 * np.pi / lam) * p * sin_t + (np.pi / lam) * p ** 2 * cos_t ** 2 / rho[None, :]
    a = np.exp(1j * phase)
    if model is SteeringModel.AMPLITUDE:
        dist = np.sqrt(rho[None, :] ** 2 - 2 * rho[None, :] * p * sin_t + p ** 2)
        a = a * (rho[None, :] / dist)
    return a


def steering_vector(theta: float, rho: float, geometry: ArrayGeometry,
                    model: SteeringModel = SteeringModel.FRESNEL) -> np.ndarray:
    if rho <= 0:
        raise ValueError(f"range must be positive, got {rho}")
    return steering_matrix([theta], [rho], geometry, model)[:, 0]


def far_field_steering(angles, geometry: ArrayGeometry) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(angles, dtype=float))
    return np.exp(-1j * (2 * np.pi / geometry.wavelength)
                  * geometry.positions[:, None] * np.sin(theta)[None, :])


def complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Circular complex Gaussian samples with unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def noise_variance(snr_db: float) -> float:
    return 0.0 if np.isinf(snr_db) and snr_db > 0 else 10.0 ** (-snr_db / 10)


def simulate_snapshots(scene: SourceScene, geometry: ArrayGeometry,
                       model: SteeringModel, snr_db: float, num_snapshots: int,
                       rng: np.random.Generator, source_signals: np.ndarray | None = None
                       ) -> np.ndarray:
    """Draw ``X = A S + W`` for one scene.

    Each source has unit power; the noise has per-element variance
    ``10 ** (-snr_db / 10)``. Coherent sources share a single waveform row.
    ``source_signals`` (M x T) overrides the random waveforms.
    """
    m = scene.num_sources
    if m >= geometry.num_elements:
        raise InvalidSceneError(f"M={m} sources need more than {geometry.num_elements} elements")
    if num_snapshots < 1:
        raise ValueError("need at least one snapshot")
    a = steering_matrix(scene.angles, scene.physical_ranges, geometry, model)
    if source_signals is not None:
        s = np.asarray(source_signals, dtype=complex).reshape(m, num_snapshots)
    elif scene.coherence is Coherence.COHERENT:
        s = np.repeat(complex_gaussian(rng, (1, num_snapshots)), m, axis=0)
    else:
        s = complex_gaussian(rng, (m, num_snapshots))
    x = a @ s
    sigma2 = noise_variance(snr_db)
    if sigma2 > 0:
        x = x + np.sqrt(sigma2) * complex_gaussian(rng, x.shape)
    return x


def perturb_geometry(geometry: ArrayGeometry, eta: float,
                     rng: np.random.Generator) -> ArrayGeometry:
    """Add i.i.d. ``Uniform[-eta, eta]`` position errors to every element."""
    if eta < 0:
        raise ValueError("perturbation bound must be non-negative")
    if eta == 0:
        return geometry
    offsets = rng.uniform(-eta, eta, geometry.num_elements)
    return replace(geometry, element_offsets=tuple(offsets))


@dataclass
class DatasetConfig:
    """Generation settings for a labeled dataset.

    ``num_sources`` is either a fixed count or an inclusive ``(low, high)``
    range drawn uniformly per sample. ``range_support`` defaults to the Fresnel
    limit up to half the Fraunhofer distance; an upper bound past the Fraunhofer
    distance yields far-field sources labeled with the sentinel range.
    ``eta`` is a miscalibration bound in meters drawn once per dataset.
    """

    geometry: ArrayGeometry
    num_samples: int = 4096
    num_snapshots: int = 100
    snr_db: float = 10.0
    coherence: Coherence = Coherence.NON_COHERENT
    num_sources: int | tuple[int, int] = 2
    model: SteeringModel = SteeringModel.FRESNEL
    angle_support: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    range_support: tuple[float, float] | None = None
    eta: float = 0.0

    def __post_init__(self):
        self.coherence = Coherence(self.coherence)
        self.model = SteeringModel(self.model)
        if isinstance(self.num_sources, (list, tuple)):
            self.num_sources = (int(self.num_sources[0]), int(self.num_sources[1]))

    def source_count_bounds(self) -> tuple[int, int]:
        if isinstance(self.num_sources, tuple):
            return self.num_sources
        return self.num_sources, self.num_sources

    def resolved_range_support(self) -> tuple[float, float]:
        if self.range_support is not None:
            return tuple(self.range_support)
        region = fresnel_region(self.geometry)
        return region.rho_min, region.rho_max / 2

    def validate(self):
        lo, hi = self.source_count_bounds()
        if self.num_samples < 1 or self.num_snapshots < 1:
            raise ConfigError("num_samples and num_snapshots must be positive")
        if not 1 <= lo <= hi < self.geometry.num_elements:
            raise ConfigError(f"invalid source count range {self.num_sources}")
        r_lo, r_hi = self.resolved_range_support()
        if not 0 < r_lo <= r_hi:  # equal bounds pin every source at one distance
            raise ConfigError(f"empty range support {(r_lo, r_hi)}")
        a_lo, a_hi = self.angle_support
        if not -math.pi / 2 <= a_lo < a_hi <= math.pi / 2:
            raise ConfigError(f"empty angle support {self.angle_support}")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = self.geometry.to_dict()
        d["coherence"] = self.coherence.value
        d["model"] = self.model.value
        d["num_sources"] = list(self.num_sources) if isinstance(self.num_sources, tuple) \
            else self.num_sources
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["geometry"] = ArrayGeometry.from_dict(d["geometry"])
        for key in ("angle_support", "range_support"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LabeledDataset:
    samples: list[tuple[np.ndarray, SourceScene]]
    config: DatasetConfig
    seed: int
    geometry: ArrayGeometry = field(default=None)

    def __post_init__(self):
        if self.geometry is None:
            self.geometry = self.config.geometry

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def observations(self) -> np.ndarray:
        return np.stack([x for x, _ in self.samples])

    @property
    def scenes(self) -> list[SourceScene]:
        return [s for _, s in self.samples]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _draw_scene(config: DatasetConfig, region: FresnelRegion,
                rng: np.random.Generator) -> SourceScene:
    lo, hi = config.source_count_bounds()
    m = int(rng.integers(lo, hi + 1))
    angles = rng.uniform(*config.angle_support, m)
    physical = rng.uniform(*config.resolved_range_support(), m)
    far = physical > region.rho_max
    labels = np.where(far, region.rho_max, physical)
    regimes = tuple(Regime.FAR_FIELD if f else Regime.NEAR_FIELD for f in far)
    return SourceScene(tuple(angles), tuple(labels), config.coherence, regimes, tuple(physical))


def generate_dataset(config: DatasetConfig, seed: int) -> LabeledDataset:
    """Draw ``config.num_samples`` labeled observations.

    Sample ``j`` uses its own generator seeded from ``(seed, j)``, so any
    subset can be regenerated independently of the others.
    """
    config.validate()
    region = fresnel_region(config.geometry)
    geometry = config.geometry
    if config.eta > 0:
        geometry = perturb_geometry(geometry, config.eta,
                                    np.random.default_rng(np.random.SeedSequence([seed, 2 ** 31])))
    samples = []
    for j in range(config.num_samples):
        rng = sample_rng(seed, j)
        scene = _draw_scene(config, region, rng)
        x = simulate_snapshots(scene, geometry, config.model, config.snr_db,
                               config.num_snapshots, rng)
        samples.append((x, scene))
    return LabeledDataset(samples, config, seed, geometry)


# On-disk layout:
#   manifest.json  geometry (as simulated), config, seed, sample count, blob format
#   labels.json    JSON array of scenes, index-aligned with the blobs
#   samples/NNNNNN.bin  little-endian float64, interleaved (re, im), row-major N x T

def save_dataset(dataset: LabeledDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    n, t = dataset.samples[0][0].shape
    manifest = {
        "format": "nfsubspace-dataset/1",
        "seed": dataset.seed,
        "num_samples": len(dataset),
        "shape": [n, t],
        "blob": {"dtype": "float64", "byteorder": "little", "layout": "row-major N x T",
                 "complex": "interleaved real/imag"},
        "geometry": dataset.geometry.to_dict(),
        "config": dataset.config.to_dict(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (directory / "labels.json").write_text(json.dumps([s.to_dict() for s in dataset.scenes]))
    for j, (x, _) in enumerate(dataset.samples):
        blob = np.empty((n, t, 2), dtype=BLOB_DTYPE)
        blob[..., 0] = x.real
        blob[..., 1] = x.imag
        (directory / "samples" / f"{j:06d}.bin").write_bytes(blob.tobytes(order="C"))
    return directory


def load_dataset(directory: str | Path) -> LabeledDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    labels = json.loads((directory / "labels.json").read_text())
    n, t = manifest["shape"]
    samples = []
    for j, label in enumerate(labels):
        raw = np.frombuffer((directory / "samples" / f"{j:06d}.bin").read_bytes(),
                            dtype=BLOB_DTYPE).reshape(n, t, 2)
        samples.append((raw[..., 0] + 1j * raw[..., 1], SourceScene.from_dict(label)))
    return LabeledDataset(samples, DatasetConfig.from_dict(manifest["config"]),
                          int(manifest["seed"]), ArrayGeometry.from_dict(manifest["geometry"]))


def subset(dataset: LabeledDataset, indices: Sequence[int]) -> LabeledDataset:
    return LabeledDataset([dataset.samples[i] for i in indices], dataset.config,
                          dataset.seed, dataset.geometry)
