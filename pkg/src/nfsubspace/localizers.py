"""Learned localizers: inference pipelines and gradient-descent training schedules.

Two methods share the autoencoder of :mod:`nfsubspace.models`:

* NF-SubspaceNet: one surrogate covariance, model-order rule, 2D MUSIC peak search.
* DCD-MUSIC: an angle surrogate feeding ESPRIT, then a range surrogate scanned
  by 1D MUSIC at each estimated angle. Training runs three stages (angle,
  range, joint) with a differentiable Maskpeak in place of the range argmax.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .array_signal import ArrayGeometry, LabeledDataset, SteeringModel
from .autodiff import (DTYPE, ParameterSet, hermitian, hermitian_evd_diff,
                       save_checkpoint, sgd_step)
from .classical import (DUPLICATE_COHERENCE, Estimate, SearchGrid, esprit_doa, find_peaks_2d,
                        music_spectrum_2d, range_music_1d)
from .losses import (inverse_spectrum, maskpeak, position_loss_torch, range_loss,
                     regularizer, rmspe_angle_torch, spectrum_loss, steering_torch)
from .models import (AutoencoderConfig, init_parameters, prepare_inputs,
                     surrogate_covariance, surrogate_from_features)
from .subspace import ModelOrderCriterion, estimate_num_sources, hermitian_evd

logger = logging.getLogger(__name__)

ASIN_MARGIN = 1e-9


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, stage: str, epoch: int, batch: int, detail: str):
        super().__init__(f"[{stage}] loss diverged at epoch {epoch}, batch {batch}: {detail}")
        self.stage = stage
        self.epoch = epoch
        self.batch = batch


@dataclass
class SpectrumCounter:
    """Counts steering-vector spectrum evaluations (one per grid cell scanned)."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)


# ----------------------------------------------------------------------------- inference

def nf_subspacenet_infer(x: np.ndarray, params: ParameterSet, net: AutoencoderConfig,
                         geometry: ArrayGeometry, grid: SearchGrid,
                         rule: ModelOrderCriterion | None = None,
                         num_sources: int | None = None,
                         model: SteeringModel = SteeringModel.FRESNEL,
                         max_coherence: float | None = DUPLICATE_COHERENCE,
                         counter: SpectrumCounter | None = None) -> Estimate:
    """Surrogate covariance, model order, noise subspace, 2D spectrum, peaks.

    Pass ``num_sources`` to bypass the model-order rule.
    """
    with torch.no_grad():
        r = surrogate_covariance(x, params, net).numpy()
    eig = hermitian_evd(r)
    if num_sources is None:
        if rule is None:
            raise ValueError("give either a model-order rule or the number of sources")
        m_hat, rule_name = estimate_num_sources(eig.values, x.shape[-1], rule), rule.name
    else:
        m_hat, rule_name = num_sources, None
    if m_hat == 0:
        return Estimate.empty("NF-SubspaceNet", rule_name)
    spectrum = music_spectrum_2d(eig.noise_subspace(m_hat), grid, geometry, model)
    if counter is not None:
        counter.add(grid.size)
    return find_peaks_2d(spectrum, m_hat, "NF-SubspaceNet", rule_name,
                         grid.steering(geometry, model), max_coherence)


def dcd_infer(x: np.ndarray, params_angle: ParameterSet, params_range: ParameterSet,
              net: AutoencoderConfig, geometry: ArrayGeometry, range_axis: np.ndarray,
              rule: ModelOrderCriterion | None = None, num_sources: int | None = None,
              model: SteeringModel = SteeringModel.FRESNEL,
              counter: SpectrumCounter | None = None) -> Estimate:
    """ESPRIT angles from the angle surrogate, then one 1D range scan per angle.

    Never evaluates the 2D grid: the spectrum cost is ``M_hat * len(range_axis)``.
    Two sources on the same angle collapse to a single range scan result.
    """
    range_axis = np.asarray(range_axis, dtype=float)
    with torch.no_grad():
        r_a = surrogate_covariance(x, params_angle, net).numpy()
        r_r = surrogate_covariance(x, params_range, net).numpy()
    eig_a = hermitian_evd(r_a)
    if num_sources is None:
        if rule is None:
            raise ValueError("give either a model-order rule or the number of sources")
        m_hat, rule_name = estimate_num_sources(eig_a.values, x.shape[-1], rule), rule.name
    else:
        m_hat, rule_name = num_sources, None
    if m_hat == 0:
        return Estimate.empty("DCD-MUSIC", rule_name)
    angles = esprit_doa(r_a, m_hat, geometry)
    noise = hermitian_evd(r_r).noise_subspace(m_hat)
    ranges = np.empty(m_hat)
    far = np.zeros(m_hat, dtype=bool)
    for i, theta in enumerate(angles):
        ranges[i], spec = range_music_1d(noise, theta, range_axis, geometry, model)
        far[i] = int(np.argmax(spec)) == range_axis.size - 1
        if counter is not None:
            counter.add(range_axis.size)
    return Estimate(angles, ranges, far, "DCD-MUSIC", rule_name)


def esprit_torch(signal_subspace: torch.Tensor, geometry: ArrayGeometry) -> torch.Tensor:
    """Differentiable least-squares ESPRIT on a batch of (B, N, M) signal subspaces.

    The rotation operator is solved from the normal equations and its
    eigenvalues taken with a general complex eigensolver, which torch
    differentiates for distinct eigenvalues. The arcsine argument is clamped
    to ``[-1 + 1e-9, 1 - 1e-9]``.
    """
    u1 = signal_subspace[..., :-1, :]
    u2 = signal_subspace[..., 1:, :]
    u1h = hermitian(u1)
    phi = torch.linalg.solve(u1h @ u1, u1h @ u2)
    z = torch.linalg.eigvals(phi)
    arg = -torch.angle(z) * geometry.wavelength / (2 * math.pi * geometry.spacing)
    return torch.asin(arg.clamp(-1 + ASIN_MARGIN, 1 - ASIN_MARGIN))


# ----------------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    """Gradient-descent hyperparameters shared by both training procedures.

    ``batch_size`` is the number of samples per step. Adam is the default;
    plain SGD (``optimizer="sgd"``) barely moves this network's loss because
    its layer gradients differ by orders of magnitude. The mask half-width at epoch ``e`` is ``max(1, floor(mask_l0 * 2**(-e / mask_decay)))``.
    DCD runs ``stage_epochs`` (angle, range, joint), defaulting to ``epochs`` each.
    """

    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    mu_e: float = 1e-2
    level: float = 0.25
    regularizer: str = "threshold"
    warmup_epochs: int = 5
    mask_l0: int = 16
    mask_decay: float = 10.0
    optimizer: str = "adam"
    seed: int = 0
    stage_epochs: tuple[int, int, int] | None = None
    monitor_samples: int = 32

    def __post_init__(self):
        if self.stage_epochs is not None:
            self.stage_epochs = tuple(int(e) for e in self.stage_epochs)
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.mu_e < 0:
            raise ValueError("regularization weight must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.regularizer not in ("threshold", "ic", "none"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mask_l0 < 1 or self.mask_decay <= 0 or self.warmup_epochs < 0:
            raise ValueError("invalid mask schedule or warm-up")
        if self.stage_epochs is not None and (len(self.stage_epochs) != 3
                                              or min(self.stage_epochs) < 0):
            raise ValueError("stage_epochs needs three nonnegative counts")

    def mask_half_width(self, epoch: int) -> int:
        return max(1, int(math.floor(self.mask_l0 * 2.0 ** (-epoch / self.mask_decay))))

    def epochs_for_stage(self, stage: int) -> int:
        return self.epochs if self.stage_epochs is None else self.stage_epochs[stage - 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["stage_epochs"] is not None:
            d["stage_epochs"] = list(d["stage_epochs"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    params: dict[str, ParameterSet]
    trace: list[dict] = field(default_factory=list)

    def losses(self, stage: str | None = None) -> list[float]:
        return [row["loss"] for row in self.trace if stage is None or row["stage"] == stage]


class _Tensors:
    """Precomputed network inputs and labels, grouped by source count."""

    def __init__(self, dataset: LabeledDataset, net: AutoencoderConfig):
        if len(dataset) == 0:
            raise ValueError("training dataset is empty")
        self.features, self.r0 = prepare_inputs(dataset.observations, net)
        scenes = dataset.scenes
        self.counts = np.array([s.num_sources for s in scenes])
        self.groups: dict[int, np.ndarray] = {}
        self.angles: dict[int, torch.Tensor] = {}
        self.ranges: dict[int, torch.Tensor] = {}
        for m in sorted(set(self.counts.tolist())):
            idx = np.flatnonzero(self.counts == m)
            self.groups[m] = idx
            self.angles[m] = torch.tensor([scenes[i].angles for i in idx], dtype=DTYPE)
            self.ranges[m] = torch.tensor([scenes[i].ranges for i in idx], dtype=DTYPE)

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Yield ``(m, positions within group, dataset indices)`` in a shuffled order."""
        out = []
        for m, idx in self.groups.items():
            perm = rng.permutation(idx.size)
            for start in range(0, idx.size, batch_size):
                pos = perm[start:start + batch_size]
                out.append((m, pos, idx[pos]))
        order = rng.permutation(len(out))
        return [out[i] for i in order]


class _Optimizer:
    def __init__(self, params: list[ParameterSet], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.adam = None
        if cfg.optimizer == "adam":
            self.adam = torch.optim.Adam([t for p in params for t in p.values()], lr=cfg.lr)

    def zero_grad(self):
        for p in self.params:
            for t in p.values():
                t.grad = None

    def step(self) -> bool:
        if self.adam is None:
            return all([sgd_step(p, self.cfg.lr) for p in self.params])
        grads = [t.grad for p in self.params for t in p.values() if t.grad is not None]
        if any(not torch.isfinite(g).all() for g in grads):
            self.params[0].skipped_steps += 1
            logger.warning("non-finite gradient, step skipped")
            return False
        self.adam.step()
        return True


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, batch: int):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(stage, epoch, batch, f"loss={loss.item()!r}")


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1000 + stage, epoch]))


def _rms(values: list[float]) -> float:
    return float(np.sqrt(np.mean(np.square(values)))) if values else float("nan")


def _monitor_nf(params, net, data: _Tensors, dataset: LabeledDataset, geometry, grid,
                model, count: int) -> tuple[float, float]:
    """Angle and range RMSPE of 2D MUSIC on the surrogate, true M, first ``count`` samples."""
    if count <= 0:
        return float("nan"), float("nan")
    ang, rng_err = [], []
    with torch.no_grad():
        r = surrogate_from_features(params, data.features[:count], data.r0[:count], net).numpy()
    for j in range(min(count, len(dataset))):
        scene = dataset.scenes[j]
        eig = hermitian_evd(r[j])
        spec = music_spectrum_2d(eig.noise_subspace(scene.num_sources), grid, geometry, model)
        est = find_peaks_2d(spec, scene.num_sources, steering=grid.steering(geometry, model),
                            max_coherence=DUPLICATE_COHERENCE)
        th = torch.tensor([scene.angles], dtype=DTYPE)
        th_hat = torch.tensor(np.asarray(est.angles)[None], dtype=DTYPE)
        err, perm = rmspe_angle_torch(th, th_hat)
        ang.append(float(err[0]))
        rl = range_loss(torch.tensor([scene.ranges], dtype=DTYPE),
                        torch.tensor(np.asarray(est.ranges)[None], dtype=DTYPE), perm)
        rng_err.append(float(rl[0]))
    return _rms(ang), _rms(rng_err)


def train_nf_subspacenet(dataset: LabeledDataset, cfg: TrainConfig,
                         net: AutoencoderConfig | None = None,
                         model: SteeringModel = SteeringModel.FRESNEL,
                         grid: SearchGrid | None = None,
                         params: ParameterSet | None = None,
                         checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Minimize ``spectrum_loss + mu_e * regularizer`` over shuffled, M-grouped batches.

    The nominal geometry of the dataset is used for the steering vectors in
    the loss. Returns the final parameters under key ``"net"`` and one trace
    row per epoch.
    """
    net = net or AutoencoderConfig()
    geometry = dataset.config.geometry
    grid = grid or SearchGrid.default(geometry)
    data = _Tensors(dataset, net)
    if params is None:
        params = init_parameters(net, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    opt = _Optimizer([params], cfg)
    trace = []
    for epoch in range(cfg.epochs):
        batch_losses, weights = [], []
        for b, (m, pos, idx) in enumerate(data.batches(cfg.batch_size, _epoch_rng(cfg.seed, 0, epoch))):
            opt.zero_grad()
            r = surrogate_from_features(params, data.features[idx], data.r0[idx], net)
            values, vectors = hermitian_evd_diff(r)
            loss = spectrum_loss(r, data.angles[m][pos], data.ranges[m][pos], geometry, model,
                                 eig=(values, vectors))
            if cfg.mu_e > 0:
                loss = loss + cfg.mu_e * regularizer(values, m, cfg.regularizer, cfg.level)
            loss = loss.mean()
            _check_finite(loss, "nf-subspacenet", epoch, b)
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
            weights.append(len(idx))
        ang, rng_err = _monitor_nf(params, net, data, dataset, geometry, grid, model,
                                   cfg.monitor_samples)
        row = {"epoch": epoch, "stage": "nf-subspacenet",
               "loss": float(np.average(batch_losses, weights=weights)),
               "angle_rmspe": ang, "range_rmspe": rng_err}
        trace.append(row)
        logger.info("epoch %d loss %.6g angle %.4g range %.4g", epoch, row["loss"], ang, rng_err)
    if checkpoint_dir is not None:
        save_checkpoint(params, Path(checkpoint_dir) / "nf_subspacenet.ckpt",
                        {"method": "nf-subspacenet", "net": net.to_dict(), "train": cfg.to_dict()})
    return TrainResult({"net": params}, trace)


def _range_spectra(noise: torch.Tensor, angles: torch.Tensor, range_axis: torch.Tensor,
                   geometry: ArrayGeometry, model: SteeringModel) -> torch.Tensor:
    """1D MUSIC spectra (B, M, G_R) at each of the (B, M) angles."""
    a = steering_torch(angles.unsqueeze(-1), range_axis, geometry, model)  # (B, M, G, N)
    return 1.0 / inverse_spectrum(noise, a).clamp_min(torch.finfo(DTYPE).tiny)


def _dcd_angle_forward(params, net, data, idx, m, geometry):
    r = surrogate_from_features(params, data.features[idx], data.r0[idx], net)
    values, vectors = hermitian_evd_diff(r)
    return values, esprit_torch(vectors[..., :m], geometry)


def _dcd_range_forward(params, net, data, idx, m, angles, range_axis, half_width,
                       geometry, model):
    r = surrogate_from_features(params, data.features[idx], data.r0[idx], net)
    _, vectors = hermitian_evd_diff(r)
    spectra = _range_spectra(vectors[..., m:], angles, range_axis, geometry, model)
    return maskpeak(spectra, range_axis, half_width)


def train_dcd(dataset: LabeledDataset, cfg: TrainConfig, net: AutoencoderConfig | None = None,
              model: SteeringModel = SteeringModel.FRESNEL,
              range_axis: np.ndarray | None = None,
              checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Three-stage DCD training.

    1. Angle surrogate on angle RMSPE through differentiable ESPRIT plus the
       model-order regularizer.
    2. Range surrogate on the range loss with Maskpeak; ground-truth angles for
       the first ``warmup_epochs`` epochs, predicted (detached) angles after.
    3. Both surrogates on the Cartesian position loss plus the regularizer.

    Returns parameters under keys ``"angle"`` and ``"range"``.
    """
    net = net or AutoencoderConfig()
    geometry = dataset.config.geometry
    if range_axis is None:
        range_axis = SearchGrid.default(geometry).ranges
    axis = torch.as_tensor(np.asarray(range_axis, dtype=float), dtype=DTYPE)
    data = _Tensors(dataset, net)
    psi_a = init_parameters(net, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    psi_r = init_parameters(net, np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    trace: list[dict] = []

    def run_stage(stage: int, name: str, trainable: list[ParameterSet], step_fn):
        opt = _Optimizer(trainable, cfg)
        for epoch in range(cfg.epochs_for_stage(stage)):
            losses, angs, rngs, weights = [], [], [], []
            batches = data.batches(cfg.batch_size, _epoch_rng(cfg.seed, stage, epoch))
            for b, (m, pos, idx) in enumerate(batches):
                opt.zero_grad()
                loss, ang, rng_err = step_fn(epoch, m, pos, idx)
                _check_finite(loss, name, epoch, b)
                loss.backward()
                opt.step()
                losses.append(loss.item())
                weights.append(len(idx))
                angs += ang
                rngs += rng_err
            row = {"epoch": epoch, "stage": name,
                   "loss": float(np.average(losses, weights=weights)),
                   "angle_rmspe": _rms(angs), "range_rmspe": _rms(rngs)}
            trace.append(row)
            logger.info("%s epoch %d loss %.6g angle %.4g range %.4g", name, epoch,
                        row["loss"], row["angle_rmspe"], row["range_rmspe"])
        if checkpoint_dir is not None:
            extra = {"method": "dcd-music", "stage": stage, "net": net.to_dict(),
                     "train": cfg.to_dict()}
            save_checkpoint(psi_a, Path(checkpoint_dir) / f"dcd_stage{stage}_angle.ckpt", extra)
            save_checkpoint(psi_r, Path(checkpoint_dir) / f"dcd_stage{stage}_range.ckpt", extra)

    def angle_step(epoch, m, pos, idx):
        values, theta_hat = _dcd_angle_forward(psi_a, net, data, idx, m, geometry)
        err, _ = rmspe_angle_torch(data.angles[m][pos], theta_hat)
        loss = err
        if cfg.mu_e > 0:
            loss = loss + cfg.mu_e * regularizer(values, m, cfg.regularizer, cfg.level)
        return loss.mean(), err.detach().tolist(), []

    def range_step(epoch, m, pos, idx):
        theta = data.angles[m][pos]
        if epoch < cfg.warmup_epochs:
            angles, perms = theta, np.tile(np.arange(m), (len(idx), 1))
            ang = []
        else:
            with torch.no_grad():
                _, theta_hat = _dcd_angle_forward(psi_a, net, data, idx, m, geometry)
            err, perms = rmspe_angle_torch(theta, theta_hat)
            angles, ang = theta_hat, err.tolist()
        rho_hat = _dcd_range_forward(psi_r, net, data, idx, m, angles, axis,
                                     cfg.mask_half_width(epoch), geometry, model)
        err_r = range_loss(data.ranges[m][pos], rho_hat, perms)
        return err_r.mean(), ang, err_r.detach().tolist()

    def joint_step(epoch, m, pos, idx):
        values, theta_hat = _dcd_angle_forward(psi_a, net, data, idx, m, geometry)
        rho_hat = _dcd_range_forward(psi_r, net, data, idx, m, theta_hat, axis,
                                     cfg.mask_half_width(epoch), geometry, model)
        theta, rho = data.angles[m][pos], data.ranges[m][pos]
        loss = position_loss_torch(theta, rho, theta_hat, rho_hat)
        if cfg.mu_e > 0:
            loss = loss + cfg.mu_e * regularizer(values, m, cfg.regularizer, cfg.level)
        with torch.no_grad():
            err, perms = rmspe_angle_torch(theta, theta_hat)
            err_r = range_loss(rho, rho_hat, perms)
        return loss.mean(), err.tolist(), err_r.tolist()

    run_stage(1, "dcd-angle", [psi_a], angle_step)
    run_stage(2, "dcd-range", [psi_r], range_step)
    run_stage(3, "dcd-joint", [psi_a, psi_r], joint_step)
    return TrainResult({"angle": psi_a, "range": psi_r}, trace)


def write_metrics_csv(trace: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "stage", "loss", "angle_rmspe", "range_rmspe"])
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
