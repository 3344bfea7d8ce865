"""
Detector Module - Fine-tuning model: encoder, optional HA-MoE fusion and the stand-in head
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import torch
from torch import Tensor, nn

from services.classifier import HeadConfig, StandInHead
from services.encoder import EncoderConfig, SSLEncoder, TransformerBlock
from services.hamoe import GateDecision, HamoeConfig, HierarchicalMoE
from services.numerics import seed_everything

logger = logging.getLogger(__name__)


@dataclass
class DetectorOutput:
    logits: Tensor
    embedding: Tensor
    decision: Optional[GateDecision] = None
    layer_weights: Optional[Tensor] = None


class DeepfakeDetector(nn.Module):

    def __init__(self, encoder: SSLEncoder, hamoe: Optional[HierarchicalMoE], head: StandInHead):
        super().__init__()
        self.encoder = encoder
        self.hamoe = hamoe
        self.head = head

    def transformer_blocks(self) -> List[TransformerBlock]:
        return self.encoder.transformer_blocks()

    def forward(self, waves: Tensor) -> DetectorOutput:
        hidden = self.encoder(waves)
        if self.hamoe is None:
            # without fusion the head reads the last transformer layer
            return self._classify(hidden[..., -1, :, :])
        fused = self.hamoe(hidden)
        out = self._classify(fused.output)
        out.decision = fused.decision
        out.layer_weights = fused.layer_weights
        return out

    def _classify(self, frames: Tensor) -> DetectorOutput:
        embedding = self.head.embed(frames)
        return DetectorOutput(logits=self.head.logits(embedding), embedding=embedding)


def build_detector(
    encoder_cfg: EncoderConfig,
    hamoe_cfg: HamoeConfig,
    head_cfg: HeadConfig,
    seed: int,
    dtype: torch.dtype = torch.float64,
    encoder: Optional[SSLEncoder] = None,
) -> DeepfakeDetector:
    """
    Assemble a detector whose fresh parameters depend only on the seed.

    An existing encoder (e.g. restored from Stage 1) is used as is.
    """
    seed_everything(seed)
    if encoder is None:
        encoder = SSLEncoder(encoder_cfg)
    hamoe = HierarchicalMoE(encoder_cfg.num_layers, encoder_cfg.hidden_dim, hamoe_cfg) if hamoe_cfg.enabled else None
    head_input = hamoe.output_dim if hamoe is not None else encoder_cfg.hidden_dim
    head = StandInHead(head_input, head_cfg)
    detector = DeepfakeDetector(encoder, hamoe, head).to(dtype)
    logger.debug("built detector: hamoe=%s head_input=%d", hamoe_cfg.enabled, head_input)
    return detector
