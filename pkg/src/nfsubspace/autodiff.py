"""Reverse-mode differentiation utilities on top of torch (float64 throughout).

torch supplies the tensor graph and the standard layer backward rules; this
module adds the pieces the localizers depend on: a Hermitian eigendecomposition
with a guarded backward, the anti-rectifier activation, complex arithmetic on
(real, imag) channel pairs, a central-difference gradient checker, the SGD
update with the sigmoid-constrained skip weight, and the checkpoint format.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CDTYPE = torch.complex128
GAP_FACTOR_LIMIT = 1e6
CHECKPOINT_MAGIC = b"NFSCKPT\x00"
CHECKPOINT_VERSION = 1


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    x = np.asarray(x)
    if dtype is None:
        dtype = CDTYPE if np.iscomplexobj(x) else DTYPE
    return torch.as_tensor(x, dtype=dtype)


def hermitian(x: torch.Tensor) -> torch.Tensor:
    return x.transpose(-1, -2).conj()


class _HermitianEigh(torch.autograd.Function):
    """Descending eigendecomposition of a Hermitian matrix.

    Backward: ``dA = U (diag(g_lambda) + F o skew(U^H g_U)) U^H`` with
    ``F_ij = 1 / (lambda_j - lambda_i)`` clamped to ``|F| <= 1e6``.
    """

    @staticmethod
    def forward(ctx, a):
        values, vectors = torch.linalg.eigh(a)
        values = values.flip(-1)
        vectors = vectors.flip(-1)
        ctx.save_for_backward(values, vectors)
        return values, vectors

    @staticmethod
    def backward(ctx, g_values, g_vectors):
        values, vectors = ctx.saved_tensors
        n = values.shape[-1]
        inner = torch.zeros(values.shape[:-1] + (n, n), dtype=vectors.dtype,
                            device=vectors.device)
        if g_vectors is not None:
            vh_gv = hermitian(vectors) @ g_vectors
            skew = (vh_gv - hermitian(vh_gv)) / 2
            gap = values.unsqueeze(-2) - values.unsqueeze(-1)
            factor = torch.where(gap == 0, torch.zeros_like(gap), 1.0 / gap)
            factor = factor.clamp(-GAP_FACTOR_LIMIT, GAP_FACTOR_LIMIT)
            factor.diagonal(dim1=-2, dim2=-1).zero_()
            inner = skew * factor
        if g_values is not None:
            inner = inner + torch.diag_embed(g_values.to(inner.dtype))
        return vectors @ inner @ hermitian(vectors)


def hermitian_evd_diff(r: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable EVD of (a batch of) Hermitian matrices, eigenvalues descending.

    The input is symmetrized as ``(R + R^H) / 2`` on the graph first.
    """
    if not torch.isfinite(torch.view_as_real(r) if r.is_complex() else r).all():
        raise FloatingPointError("non-finite entries in matrix passed to EVD")
    r = (r + hermitian(r)) / 2
    return _HermitianEigh.apply(r)


def anti_rectifier(x: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Center along ``dim``, L2-normalize, and concatenate ``relu(x)`` with ``relu(-x)``.

    A zero-norm slice (constant input) is left unscaled, which yields zeros.
    """
    if x.shape[dim] < 2:
        raise ValueError("anti-rectifier needs at least 2 features along the normalized axis")
    centered = x - x.mean(dim=dim, keepdim=True)
    norm = torch.linalg.vector_norm(centered, dim=dim, keepdim=True)
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    normalized = centered / safe
    return torch.cat([torch.relu(normalized), torch.relu(-normalized)], dim=dim)


def to_channels(z: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Complex tensor -> real tensor with (real, imag) stacked along ``dim``."""
    return torch.stack([z.real, z.imag], dim=dim)


def from_channels(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    re, im = x.unbind(dim)
    return torch.complex(re, im)


def complex_matmul(a: torch.Tensor, b: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Matrix product of complex operands held as (real, imag) channel pairs."""
    ar, ai = a.unbind(dim)
    br, bi = b.unbind(dim)
    return torch.stack([ar @ br - ai @ bi, ar @ bi + ai @ br], dim=dim)


def conj_transpose_channels(a: torch.Tensor, dim: int = 0) -> torch.Tensor:
    re, im = a.unbind(dim)
    return torch.stack([re.transpose(-1, -2), -im.transpose(-1, -2)], dim=dim)


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The relative error of each coordinate uses ``max(|a|, |b|, 1e-8)`` as the
    denominator.
    """
    if eps <= 0:
        raise ValueError("finite-difference step must be positive")
    x = as_tensor(x, DTYPE).detach().clone()
    xr = x.clone().requires_grad_(True)
    y = f(xr)
    if y.numel() != 1 or not torch.isfinite(y).all():
        raise FloatingPointError("grad_check needs a finite scalar function")
    (analytic,) = torch.autograd.grad(y, xr, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)
    flat = x.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = f(flat.view_as(x)).item()
            flat[i] = orig - eps
            lo = f(flat.view_as(x)).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("function is non-finite near the check point")
            numeric[i] = (hi - lo) / (2 * eps)
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-8)
    return float(((analytic - numeric).abs() / denom).max())


class ParameterSet(OrderedDict):
    """Named trainable tensors; the skip weight is stored as the logit ``alpha_logit``."""

    skipped_steps: int = 0

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self["alpha_logit"])

    def tensors(self) -> list[torch.Tensor]:
        return list(self.values())

    def detached_copy(self) -> "ParameterSet":
        out = ParameterSet((k, v.detach().clone().requires_grad_(v.requires_grad))
                           for k, v in self.items())
        return out

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self.values())


def sgd_step(params: ParameterSet, lr: float, grads: dict | None = None) -> bool:
    """``p <- p - lr * grad`` for every parameter; returns False if the step was skipped.

    Gradients default to the ``.grad`` slots. A non-finite gradient anywhere
    skips the whole step and bumps ``params.skipped_steps``. The skip weight is
    updated in logit space, so ``sigmoid(alpha_logit)`` stays in (0, 1).
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    grads = grads if grads is not None else {k: v.grad for k, v in params.items()}
    if any(g is not None and not torch.isfinite(g).all() for g in grads.values()):
        params.skipped_steps += 1
        logger.warning("non-finite gradient, step skipped (%d so far)", params.skipped_steps)
        return False
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is not None:
                p.sub_(lr * g)
    return True


def save_checkpoint(params: ParameterSet, path: str | Path, extra: dict | None = None) -> Path:
    """Write magic, u32 version, u32 header length, JSON header, then float64 LE payloads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": CHECKPOINT_VERSION,
              "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
              "extra": extra or {}}
    raw_header = json.dumps(header).encode()
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw_header)))
        fh.write(raw_header)
        for v in params.values():
            fh.write(v.detach().cpu().numpy().astype("<f8").tobytes(order="C"))
    return path


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a parameter checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", data, offset)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset += 8
    header = json.loads(data[offset:offset + header_len])
    offset += header_len
    params = ParameterSet()
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=int))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        offset += 8 * count
        params[entry["name"]] = torch.tensor(arr, dtype=DTYPE, requires_grad=True)
    return params, header.get("extra", {})
