"""
HA-MoE Module - Hierarchical Adaptive Mixture of Experts
Fuses every transformer layer output: per-layer contribution scores, excitation
into layer weights, flattening, gating and top-K expert mixing
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from errors import HamoeError
from services.numerics import AttentiveStatsPool, asp_pool, softmax

logger = logging.getLogger(__name__)

ROUTING_MODES = ("frame", "utterance")


@dataclass(frozen=True)
class HamoeConfig:
    enabled: bool = True
    compress_dim: int = 16
    num_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 64
    output_dim: Optional[int] = None
    routing: str = "frame"

    def __post_init__(self):
        if self.num_experts < 1:
            raise HamoeError("num_experts must be at least 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise HamoeError(f"top_k {self.top_k} must be within [1, num_experts={self.num_experts}]")
        if self.compress_dim < 1 or self.expert_hidden < 1:
            raise HamoeError("compress_dim and expert_hidden must be positive")
        if self.routing not in ROUTING_MODES:
            raise HamoeError(f"unknown routing '{self.routing}', expected one of {', '.join(ROUTING_MODES)}")


@dataclass
class GateDecision:
    """Gate probabilities, the selected experts and the renormalised mixing weights."""

    probs: Tensor
    selected: Tensor
    weights: Tensor


def layer_contribution(
    hidden: Tensor, layer_proj: Tensor, pool_weight: Tensor, pool_bias: Optional[Tensor], layer_score: Tensor
) -> Tensor:
    """
    One contribution score per transformer layer.

    Each layer output is compressed by the shared projection, pooled over time with
    attentive statistics pooling and scored by a (2D_h, 1) projection.

    Args:
        hidden: Hidden stack (..., L, T, D)
        layer_proj: Shared compression (D, D_h)
        pool_weight: Pooling attention weights (D_h,)
        pool_bias: Pooling attention bias or None
        layer_score: Score projection (2D_h, 1)

    Returns:
        Tensor: V_l shaped (..., L)
    """
    if hidden.dim() < 3 or hidden.shape[-1] != layer_proj.shape[0]:
        raise HamoeError(
            f"layer_contribution: hidden stack {tuple(hidden.shape)} does not match projection "
            f"{tuple(layer_proj.shape)}"
        )
    if layer_score.shape[0] != 2 * layer_proj.shape[1]:
        raise HamoeError("layer_contribution: score projection must have 2 * compress_dim rows")
    pooled = asp_pool(hidden @ layer_proj, pool_weight, pool_bias)
    return (pooled @ layer_score).squeeze(-1)


def excite(v_l: Tensor, excite_down: Tensor, excite_up: Tensor) -> Tensor:
    """V_h = sigmoid((V_l W1) W2), with W1 (L, L/2) and W2 (L/2, L); no biases."""
    num_layers = v_l.shape[-1]
    if num_layers % 2 != 0:
        raise HamoeError(f"excite: L must be even, got L={num_layers}")
    if excite_down.shape != (num_layers, num_layers // 2) or excite_up.shape != (num_layers // 2, num_layers):
        raise HamoeError("excite: excitation weights do not match L")
    return torch.sigmoid((v_l @ excite_down) @ excite_up)


def weight_and_flatten(hidden: Tensor, layer_weights: Tensor) -> Tensor:
    """Scale each layer slice by its weight and concatenate layers per frame: (..., L, T, D) -> (..., T, L*D)."""
    if layer_weights.shape[-1] != hidden.shape[-3]:
        raise HamoeError("weight_and_flatten: one weight per layer required")
    scaled = hidden * layer_weights.unsqueeze(-1).unsqueeze(-1)
    frames = scaled.transpose(-3, -2)
    return frames.reshape(*frames.shape[:-2], -1)


def gate(features: Tensor, gate_weight: Tensor) -> Tensor:
    return softmax(features @ gate_weight, dim=-1)


class Expert(nn.Module):
    """Affine, ReLU, affine."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))


def expert_forward(features: Tensor, expert: Expert) -> Tensor:
    return expert(features)


def moe_mix(probs: Tensor, expert_outs: Tensor, k: int) -> Tuple[Tensor, GateDecision]:
    """
    Mix the top-K experts of every frame.

    Args:
        probs: Gate probabilities (..., N)
        expert_outs: Expert outputs (..., N, D_out)
        k: Experts kept per frame; ties resolve to the lower index

    Returns:
        tuple: (mixed output (..., D_out), GateDecision)
    """
    num_experts = probs.shape[-1]
    if not 1 <= k <= num_experts:
        raise HamoeError(f"moe_mix: top_k {k} must be within [1, {num_experts}]")
    if expert_outs.shape[:-1] != probs.shape:
        raise HamoeError("moe_mix: expert outputs do not match gate probabilities")
    order = torch.sort(probs, dim=-1, descending=True, stable=True).indices
    selected = order[..., :k]
    kept = probs.gather(-1, selected)
    weights = torch.zeros_like(probs).scatter(-1, selected, kept / kept.sum(dim=-1, keepdim=True))
    mixed = (weights.unsqueeze(-1) * expert_outs).sum(dim=-2)
    return mixed, GateDecision(probs=probs, selected=selected, weights=weights)


class GateUsage:
    """Append-only expert selection counts."""

    def __init__(self, num_experts: int):
        self.num_experts = num_experts
        self.counts = [0] * num_experts
        self.decisions = 0

    def add(self, decision: GateDecision) -> None:
        selected = decision.selected.reshape(-1, decision.selected.shape[-1])
        self.decisions += selected.shape[0]
        for expert, count in enumerate(torch.bincount(selected.reshape(-1), minlength=self.num_experts).tolist()):
            self.counts[expert] += count

    def table(self) -> List[Tuple[int, int, float]]:
        """Rows of (expert id, times selected, fraction of routing decisions that selected it)."""
        return [
            (expert, count, count / self.decisions if self.decisions else 0.0)
            for expert, count in enumerate(self.counts)
        ]


@dataclass
class HamoeOutput:
    output: Tensor
    decision: GateDecision
    layer_weights: Tensor


class HierarchicalMoE(nn.Module):
    """Layer weighting followed by a gated pool of experts over the flattened layer stack."""

    def __init__(self, num_layers: int, hidden_dim: int, cfg: HamoeConfig):
        super().__init__()
        if num_layers % 2 != 0:
            raise HamoeError(f"HA-MoE needs an even layer count: L must be even, got L={num_layers}")
        self.cfg = cfg
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.output_dim = cfg.output_dim or hidden_dim
        flat = num_layers * hidden_dim
        excitation = num_layers // 2

        self.layer_proj = nn.Parameter(torch.randn(hidden_dim, cfg.compress_dim) / math.sqrt(hidden_dim))
        self.pool = AttentiveStatsPool(cfg.compress_dim)
        self.layer_score = nn.Parameter(torch.randn(2 * cfg.compress_dim, 1) / math.sqrt(2 * cfg.compress_dim))
        self.excite_down = nn.Parameter(torch.randn(num_layers, excitation) / math.sqrt(num_layers))
        self.excite_up = nn.Parameter(torch.randn(excitation, num_layers) / math.sqrt(excitation))
        self.gate_weight = nn.Parameter(torch.randn(flat, cfg.num_experts) / math.sqrt(flat))
        self.experts = nn.ModuleList(
            Expert(flat, cfg.expert_hidden, self.output_dim) for _ in range(cfg.num_experts)
        )

    def layer_weights(self, hidden: Tensor) -> Tensor:
        v_l = layer_contribution(
            hidden, self.layer_proj, self.pool.attention.weight, self.pool.attention.bias, self.layer_score
        )
        return excite(v_l, self.excite_down, self.excite_up)

    def forward(self, hidden: Tensor) -> HamoeOutput:
        """
        Args:
            hidden: Hidden stack (L, T, D) or (B, L, T, D)

        Returns:
            HamoeOutput: fused frames (..., T, D_out), the gate decision and V_h
        """
        if hidden.shape[-3] != self.num_layers or hidden.shape[-1] != self.hidden_dim:
            raise HamoeError(
                f"HA-MoE expects (..., {self.num_layers}, T, {self.hidden_dim}), got {tuple(hidden.shape)}"
            )
        v_h = self.layer_weights(hidden)
        features = weight_and_flatten(hidden, v_h)
        if self.cfg.routing == "utterance":
            probs = gate(features.mean(dim=-2, keepdim=True), self.gate_weight).expand(
                *features.shape[:-1], self.cfg.num_experts
            )
        else:
            probs = gate(features, self.gate_weight)
        expert_outs = torch.stack([expert_forward(features, expert) for expert in self.experts], dim=-2)
        mixed, decision = moe_mix(probs, expert_outs, self.cfg.top_k)
        return HamoeOutput(output=mixed, decision=decision, layer_weights=v_h)
