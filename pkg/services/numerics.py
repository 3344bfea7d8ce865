"""
Numerics Module - Shared Numeric Primitives
Softmax, attentive statistics pooling, 3x3 convolution, cosine similarity,
deterministic random streams and the finite-difference gradient check
"""

import hashlib
import logging
import math
import random
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from errors import NumericsError

logger = logging.getLogger(__name__)

# Floor added to the pooled variance before the square root
VARIANCE_FLOOR = 1e-9

ArrayLike = Union[Tensor, Sequence[float], np.ndarray]


def derive_seed(seed: int, *keys) -> int:
    """Derive a 63-bit child seed from a parent seed and any number of keys."""
    material = ":".join(str(part) for part in (seed, *keys)).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


@dataclass(frozen=True)
class RngState:
    """
    Seed of a named deterministic generator.

    Streams are platform independent: numpy streams use PCG64, torch streams
    use the CPU Mersenne Twister generator.
    """

    seed: int
    algorithm: str = "pcg64"

    def __post_init__(self):
        if self.algorithm != "pcg64":
            raise NumericsError(f"unknown rng algorithm '{self.algorithm}'")

    def child(self, *keys) -> "RngState":
        return RngState(derive_seed(self.seed, *keys), self.algorithm)

    def numpy(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

    def torch(self) -> torch.Generator:
        generator = torch.Generator()
        generator.manual_seed(self.seed)
        return generator


def seed_everything(seed: int) -> None:
    """Seed the global python, numpy and torch generators."""
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def as_tensor(values: ArrayLike) -> Tensor:
    if isinstance(values, Tensor):
        return values
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def softmax(v: ArrayLike, dim: int = -1) -> Tensor:
    """
    Numerically stable softmax along one axis.

    Args:
        v: Logits
        dim: Axis to normalise over

    Returns:
        Tensor: probabilities with the shape of v
    """
    v = as_tensor(v)
    if v.numel() == 0 or v.shape[dim] == 0:
        raise NumericsError("softmax: empty input")
    if not torch.isfinite(v).all():
        raise NumericsError("softmax: non-finite entry in input")
    # torch subtracts the running max before exponentiating
    return torch.softmax(v, dim=dim)


def asp_pool(x: Tensor, weight: Tensor, bias: Union[Tensor, None] = None) -> Tensor:
    """
    Attentive statistics pooling over the time axis.

    Frame scores come from one learnable projection of each frame; a softmax over
    time turns them into weights for the mean and the standard deviation.

    Args:
        x: Frames shaped (..., T, D)
        weight: Projection weights shaped (D,)
        bias: Optional scalar projection bias

    Returns:
        Tensor: (..., 2D) concatenation of weighted mean and weighted std
    """
    if x.dim() < 2 or x.shape[-2] == 0:
        raise NumericsError("asp_pool: empty sequence")
    scores = x @ weight.reshape(-1)
    if bias is not None:
        scores = scores + bias.reshape(())
    alpha = torch.softmax(scores, dim=-1).unsqueeze(-1)
    mu = (alpha * x).sum(dim=-2)
    var = (alpha * (x - mu.unsqueeze(-2)) ** 2).sum(dim=-2)
    sigma = torch.sqrt(var + VARIANCE_FLOOR)
    return torch.cat([mu, sigma], dim=-1)


class AttentiveStatsPool(nn.Module):
    """Learnable attention parameters for asp_pool."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.attention = nn.Linear(dim, 1)

    def forward(self, x: Tensor) -> Tensor:
        return asp_pool(x, self.attention.weight, self.attention.bias)


def conv2d_same(x: Tensor, kernels: Tensor) -> Tensor:
    """
    Stride-1 3x3 convolution with one pixel of zero padding on every edge.

    Args:
        x: Input shaped (C_in, H, W) or (B, C_in, H, W)
        kernels: Kernels shaped (C_out, C_in, 3, 3)

    Returns:
        Tensor: output with the spatial extents of x
    """
    if kernels.dim() != 4 or tuple(kernels.shape[-2:]) != (3, 3):
        raise NumericsError(f"conv2d_same: unsupported kernel of shape {tuple(kernels.shape)}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != kernels.shape[1]:
        raise NumericsError(f"conv2d_same: input shape {tuple(x.shape)} does not match kernels")
    out = F.conv2d(x, kernels, padding=1)
    return out.squeeze(0) if unbatched else out


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; broadcasting like a * b."""
    a = as_tensor(a)
    b = as_tensor(b)
    norm_a = torch.linalg.vector_norm(a, dim=-1)
    norm_b = torch.linalg.vector_norm(b, dim=-1)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise NumericsError("cosine_sim: zero vector")
    return (a * b).sum(dim=-1) / (norm_a * norm_b)


def _finite_scalar(loss: Tensor) -> float:
    value = float(loss)
    if not math.isfinite(value):
        raise NumericsError("grad_check: non-finite loss")
    return value


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """
    Compare autograd gradients with central differences.

    Args:
        loss_fn: Zero-argument callable returning a scalar loss built from params
        params: float64 leaf tensors to differentiate
        eps: Finite-difference step, within [1e-7, 1e-3]

    Returns:
        float: max over all entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    if not 1e-7 <= eps <= 1e-3:
        raise NumericsError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise NumericsError("grad_check: parameters must be float64")

    loss = loss_fn()
    _finite_scalar(loss)
    if loss.requires_grad:
        analytic = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        analytic = [None] * len(params)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    max_error = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.detach().view(-1)
            grad_flat = g.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                plus = _finite_scalar(loss_fn())
                flat[i] = original - eps
                minus = _finite_scalar(loss_fn())
                flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                exact = grad_flat[i].item()
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
                max_error = max(max_error, error)
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), max_error)
    return max_error
