"""Convolutional autoencoder mapping autocorrelation features to a surrogate covariance."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import (CDTYPE, DTYPE, ParameterSet, anti_rectifier, hermitian,
                       hermitian_evd_diff)
from .subspace import autocorrelation_features


@dataclass
class AutoencoderConfig:
    """Three conv encoder layers mirrored by three transposed-conv decoder layers.

    Every hidden layer is followed by an anti-rectifier, which doubles its
    channel count. The last decoder layer emits the real and imaginary parts
    of ``K`` (2 channels, N x N).
    """

    tau_max: int = 8
    widths: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 2
    eps: float = 1e-3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.eps <= 0:
            raise ValueError("diagonal loading eps must be positive")
        if len(self.widths) < 1 or self.kernel_size < 1 or self.tau_max < 0:
            raise ValueError("invalid autoencoder configuration")

    @property
    def in_channels(self) -> int:
        return 2 * (self.tau_max + 1)

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """(name, in_channels, out_channels) for every layer in order."""
        layers = []
        c_in = self.in_channels
        for i, w in enumerate(self.widths):
            layers.append((f"enc{i}", c_in, w))
            c_in = 2 * w
        dec_out = list(reversed(self.widths[:-1])) + [2]
        for i, w in enumerate(dec_out):
            layers.append((f"dec{i}", c_in, w))
            c_in = 2 * w
        return layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def features_to_input_tensor(feats: np.ndarray) -> torch.Tensor:
    """(..., tau+1, N, N) complex lags -> (..., 2(tau+1), N, N) real tensor.

    Channel order: real parts of lags 0..tau, then imaginary parts of lags 0..tau.
    """
    feats = torch.as_tensor(np.asarray(feats), dtype=CDTYPE)
    return torch.cat([feats.real, feats.imag], dim=-3).to(DTYPE)


def input_tensor_to_features(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-3] // 2
    return torch.complex(x[..., :half, :, :], x[..., half:, :, :])


def init_parameters(cfg: AutoencoderConfig, rng: np.random.Generator | int) -> ParameterSet:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` kernels and biases; skip weight 0.5."""
    rng = np.random.default_rng(rng)
    k = cfg.kernel_size
    params = ParameterSet()
    for name, c_in, c_out in cfg.layer_shapes():
        bound = 1.0 / np.sqrt(c_in * k * k)
        # conv2d weights are (out, in, k, k); conv_transpose2d weights are (in, out, k, k)
        shape = (c_out, c_in, k, k) if name.startswith("enc") else (c_in, c_out, k, k)
        params[f"{name}.weight"] = torch.tensor(rng.uniform(-bound, bound, shape), dtype=DTYPE)
        params[f"{name}.bias"] = torch.tensor(rng.uniform(-bound, bound, c_out), dtype=DTYPE)
    params["alpha_logit"] = torch.zeros((), dtype=DTYPE)
    for v in params.values():
        v.requires_grad_(True)
    return params


def network(params: ParameterSet, x: torch.Tensor, cfg: AutoencoderConfig) -> torch.Tensor:
    """Feature tensor (B, 2(tau+1), N, N) -> complex ``K`` of shape (B, N, N)."""
    h = x
    layers = cfg.layer_shapes()
    for i, (name, _, _) in enumerate(layers):
        w, b = params[f"{name}.weight"], params[f"{name}.bias"]
        if name.startswith("enc"):
            h = F.conv2d(h, w, b)
        else:
            h = F.conv_transpose2d(h, w, b)
        if i < len(layers) - 1:
            h = anti_rectifier(h, dim=1)
    return torch.complex(h[:, 0], h[:, 1])


def normalized_gram(k: torch.Tensor, eps: float) -> torch.Tensor:
    """``(K K^H + eps I) / ||K K^H + eps I||_2`` with the norm taken as the top eigenvalue."""
    n = k.shape[-1]
    gram = k @ hermitian(k) + eps * torch.eye(n, dtype=k.dtype)
    values, _ = hermitian_evd_diff(gram)
    return gram / values[..., :1, None]


def surrogate_from_features(params: ParameterSet, x: torch.Tensor, r0: torch.Tensor,
                            cfg: AutoencoderConfig) -> torch.Tensor:
    """Surrogate covariance ``R_norm + alpha * R_x[0]`` for a batch.

    ``x`` is the real feature tensor and ``r0`` the matching zero-lag
    covariances (B, N, N); the result is Hermitian PSD.
    """
    k = network(params, x, cfg)
    if not torch.isfinite(torch.view_as_real(k)).all():
        raise FloatingPointError("network produced non-finite output")
    return normalized_gram(k, cfg.eps) + params.alpha * r0


def prepare_inputs(observations: np.ndarray, cfg: AutoencoderConfig
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Observations (B, N, T) -> (feature tensor, zero-lag covariance tensor)."""
    feats = autocorrelation_features(np.asarray(observations), cfg.tau_max)
    return features_to_input_tensor(feats), torch.as_tensor(feats[..., 0, :, :], dtype=CDTYPE)


def surrogate_covariance(x: np.ndarray, params: ParameterSet, cfg: AutoencoderConfig
                         ) -> torch.Tensor:
    """Surrogate covariance for one observation (N, T) or a stack (B, N, T)."""
    single = np.ndim(x) == 2
    obs = np.asarray(x)[None] if single else np.asarray(x)
    feats, r0 = prepare_inputs(obs, cfg)
    r = surrogate_from_features(params, feats, r0, cfg)
    return r[0] if single else r


def multiply_accumulate_count(cfg: AutoencoderConfig, num_elements: int) -> int:
    """Multiply-accumulates of one forward pass (conv layers only)."""
    k = cfg.kernel_size
    size = num_elements
    total = 0
    for name, c_in, c_out in cfg.layer_shapes():
        if name.startswith("enc"):
            size = size - k + 1
            total += size * size * c_out * c_in * k * k
        else:
            total += size * size * c_in * c_out * k * k
            size = size + k - 1
    return total
