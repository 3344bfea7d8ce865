"""
PEFT Module - Parameter-Efficient Fine-Tuning
LoRA on the attention projections, the convolutional bottleneck adapter,
injection into an encoder and trainable-parameter accounting
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from errors import PeftError
from services.numerics import conv2d_same

logger = logging.getLogger(__name__)

LORA_TARGETS = ("query", "key", "value")
ADAPTER_POSITIONS = ("mha", "ffn")


@dataclass(frozen=True)
class PeftConfig:
    enabled: bool = True
    lora_rank: Optional[int] = 8
    adapter_dim: Optional[int] = 16
    lora_targets: Tuple[str, ...] = LORA_TARGETS
    adapter_positions: Tuple[str, ...] = ADAPTER_POSITIONS
    adapter_channels: int = 8
    adapter_in_channels: int = 1
    freeze_base: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        object.__setattr__(self, "adapter_positions", tuple(self.adapter_positions))
        if self.enabled and self.lora_rank is None and self.adapter_dim is None:
            raise PeftError("PEFT is enabled but neither lora_rank nor adapter_dim is set")
        if self.lora_rank is not None and self.lora_rank < 1:
            raise PeftError(f"lora_rank must be positive, got {self.lora_rank}")
        if self.adapter_dim is not None and self.adapter_dim < 1:
            raise PeftError(f"adapter_dim must be positive, got {self.adapter_dim}")
        unknown = set(self.lora_targets) - set(LORA_TARGETS)
        if unknown:
            raise PeftError(f"unknown lora target(s): {', '.join(sorted(unknown))}")
        unknown = set(self.adapter_positions) - set(ADAPTER_POSITIONS)
        if unknown:
            raise PeftError(f"unknown adapter position(s): {', '.join(sorted(unknown))}")
        if self.adapter_channels < 1 or self.adapter_in_channels < 1:
            raise PeftError("adapter channel counts must be positive")

    @property
    def method(self) -> str:
        """'lora', 'adapter', 'hybrid' or 'none'."""
        if not self.enabled:
            return "none"
        if self.lora_rank is not None and self.adapter_dim is not None:
            return "hybrid"
        return "lora" if self.lora_rank is not None else "adapter"


def lora_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor], lora_a: Tensor, lora_b: Tensor) -> Tensor:
    """
    Linear layer with a low-rank update: h = W0 x + B(A x) + b.

    Args:
        x: Input (..., d_in)
        weight: Base weight W0 (d_out, d_in)
        bias: Base bias b (d_out,) or None
        lora_a: A (r, d_in)
        lora_b: B (d_out, r)

    Returns:
        Tensor: (..., d_out)
    """
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in or lora_a.shape[1] != d_in or lora_b.shape[0] != d_out or lora_a.shape[0] != lora_b.shape[1]:
        raise PeftError(
            f"lora_forward: shape mismatch x={tuple(x.shape)} W0={tuple(weight.shape)} "
            f"A={tuple(lora_a.shape)} B={tuple(lora_b.shape)}"
        )
    return F.linear(x, weight, bias) + (x @ lora_a.T) @ lora_b.T


class LoraLinear(nn.Module):
    """Wraps a base nn.Linear with trainable low-rank matrices; B starts at zero."""

    def __init__(self, base: nn.Linear, rank: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank < 1 or rank > min(d_in, d_out) / 2:
            raise PeftError(f"lora rank {rank} must be within [1, min({d_in}, {d_out}) / 2]")
        self.base = base
        self.rank = rank
        bound = 1.0 / math.sqrt(d_in)
        a = torch.rand(rank, d_in, generator=generator) * 2 * bound - bound
        self.lora_A = nn.Parameter(a.to(base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))

    def forward(self, x: Tensor) -> Tensor:
        return lora_forward(x, self.base.weight, self.base.bias, self.lora_A, self.lora_B)


class BottleneckAdapter(nn.Module):
    """
    Convolutional bottleneck adapter.

    x' = BN(Conv2d(ReLU(x W_down))) on a (in_channels, T, s/in_channels) grid, then
    h = ReLU(flatten(Conv2d(x')) W_up) + x. W_up starts at zero so the adapter is an identity.
    """

    def __init__(self, features: int, bottleneck: int, channels: int = 8, in_channels: int = 1):
        super().__init__()
        if bottleneck >= features:
            raise PeftError(f"adapter bottleneck {bottleneck} must be smaller than the feature width {features}")
        if bottleneck % in_channels != 0:
            raise PeftError(
                f"invalid bottleneck layout: s={bottleneck} is not divisible into {in_channels} channels"
            )
        self.features = features
        self.bottleneck = bottleneck
        self.channels = channels
        self.in_channels = in_channels
        self.grid_width = bottleneck // in_channels

        self.down = nn.Linear(features, bottleneck)
        self.conv1_weight = nn.Parameter(torch.empty(channels, in_channels, 3, 3))
        self.conv1_bias = nn.Parameter(torch.zeros(channels))
        self.norm = nn.BatchNorm2d(channels, eps=1e-5, momentum=0.1)
        self.conv2_weight = nn.Parameter(torch.empty(channels, channels, 3, 3))
        self.conv2_bias = nn.Parameter(torch.zeros(channels))
        self.up = nn.Linear(channels * self.grid_width, features)

        nn.init.kaiming_uniform_(self.conv1_weight, a=math.sqrt(5))
        nn.init.kaiming_uniform_(self.conv2_weight, a=math.sqrt(5))
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.features:
            raise PeftError(f"adapter_forward: feature width {x.shape[-1]} does not match {self.features}")
        if x.dim() < 2 or x.shape[-2] == 0:
            raise PeftError("adapter_forward: empty sequence")
        lead = x.shape[:-2]
        frames = x.shape[-2]
        h = F.relu(self.down(x)).reshape(-1, frames, self.in_channels, self.grid_width).permute(0, 2, 1, 3)
        h = self.norm(conv2d_same(h, self.conv1_weight) + self.conv1_bias.view(1, -1, 1, 1))
        h = conv2d_same(h, self.conv2_weight) + self.conv2_bias.view(1, -1, 1, 1)
        h = h.permute(0, 2, 1, 3).reshape(*lead, frames, self.channels * self.grid_width)
        return F.relu(self.up(h)) + x


def adapter_forward(x: Tensor, adapter: BottleneckAdapter, mode: str = "eval") -> Tensor:
    """Run an adapter in 'train' or 'eval' mode; only training mode touches batch-norm running stats."""
    if mode not in ("train", "eval"):
        raise PeftError(f"adapter_forward: unknown mode '{mode}'")
    adapter.train(mode == "train")
    return adapter(x)


def is_peft_parameter(name: str) -> bool:
    parts = name.split(".")
    return any(part in ("lora_A", "lora_B") or part.startswith("adapter_") for part in parts)


def _is_injected(model: nn.Module) -> bool:
    for module in model.modules():
        if isinstance(module, (LoraLinear, BottleneckAdapter)):
            return True
    return False


def _verify_identity(model: nn.Module) -> None:
    for module in model.modules():
        if isinstance(module, LoraLinear) and torch.count_nonzero(module.lora_B) != 0:
            raise PeftError("inject_peft: LoRA B is not zero at injection")
        if isinstance(module, BottleneckAdapter):
            if torch.count_nonzero(module.up.weight) != 0 or torch.count_nonzero(module.up.bias) != 0:
                raise PeftError("inject_peft: adapter up-projection is not zero at injection")


def inject_peft(model: nn.Module, cfg: PeftConfig, generator: Optional[torch.Generator] = None) -> nn.Module:
    """
    Attach LoRA and adapters to every transformer block of a model in place.

    Args:
        model: Any module exposing transformer_blocks()
        cfg: Which methods to attach and where
        generator: Drives the LoRA A initialisation

    Returns:
        nn.Module: the same model, with non-PEFT parameters frozen when cfg.freeze_base
    """
    if not cfg.enabled:
        raise PeftError("inject_peft: PEFT is disabled in the configuration")
    if _is_injected(model):
        raise PeftError("inject_peft: model already carries PEFT modules")

    reference = next(model.parameters())
    blocks = model.transformer_blocks()
    for block in blocks:
        if cfg.lora_rank is not None:
            for target in cfg.lora_targets:
                base = getattr(block.attention, target)
                setattr(block.attention, target, LoraLinear(base, cfg.lora_rank, generator))
        if cfg.adapter_dim is not None:
            width = block.attention_norm.normalized_shape[0]
            for position in cfg.adapter_positions:
                adapter = BottleneckAdapter(width, cfg.adapter_dim, cfg.adapter_channels, cfg.adapter_in_channels)
                setattr(block, f"adapter_{position}", adapter.to(dtype=reference.dtype, device=reference.device))

    if cfg.freeze_base:
        for name, param in model.named_parameters():
            param.requires_grad = is_peft_parameter(name)
    _verify_identity(model)

    counts = count_trainable(model)
    logger.info(
        "injected %s PEFT into %d blocks: %d of %d parameters trainable (%.2f%%)",
        cfg.method, len(blocks), counts.trainable, counts.total, 100 * counts.fraction,
    )
    return model


@dataclass(frozen=True)
class ParameterCount:
    total: int
    trainable: int
    fraction: float


def _count(params) -> ParameterCount:
    total = 0
    trainable = 0
    for param in params:
        total += param.numel()
        if param.requires_grad:
            trainable += param.numel()
    return ParameterCount(total, trainable, trainable / total if total else 0.0)


def count_trainable(model: nn.Module) -> ParameterCount:
    """Exact total and trainable parameter counts."""
    return _count(model.parameters())


def count_by_module(model: nn.Module) -> Dict[str, ParameterCount]:
    """Counts per top-level child; PEFT parameters are reported under '<child>.peft'."""
    groups: Dict[str, list] = {}
    for name, param in model.named_parameters():
        head = name.split(".")[0]
        key = f"{head}.peft" if is_peft_parameter(name) else head
        groups.setdefault(key, []).append(param)
    return {key: _count(params) for key, params in sorted(groups.items())}
