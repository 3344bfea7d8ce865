"""
Classifier Module - Stand-in Classification Head and Weighted Cross-Entropy
The head pools a frame sequence with attentive statistics pooling and maps it to
two logits (bonafide, spoof)
"""

from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from errors import ClassifierError
from services.labels import Label
from services.numerics import AttentiveStatsPool

NUM_CLASSES = 2


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 32

    def __post_init__(self):
        if self.hidden < 1:
            raise ClassifierError("head hidden width must be positive")


@dataclass(frozen=True)
class ClassWeights:
    """Cross-entropy class weights; bonafide is the minority class."""

    bonafide: float = 0.9
    spoof: float = 0.1

    def __post_init__(self):
        if self.bonafide <= 0 or self.spoof <= 0:
            raise ClassifierError("class weights must both be positive")

    def as_tensor(self, dtype: torch.dtype = torch.float64) -> Tensor:
        return torch.tensor([self.bonafide, self.spoof], dtype=dtype)


class StandInHead(nn.Module):
    """Attentive statistics pooling followed by a two-layer MLP."""

    def __init__(self, input_dim: int, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        self.pool = AttentiveStatsPool(input_dim)
        self.fc1 = nn.Linear(2 * input_dim, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, NUM_CLASSES)

    def embed(self, frames: Tensor) -> Tensor:
        if frames.dim() < 2 or frames.shape[-2] == 0:
            raise ClassifierError("classify: empty sequence")
        return self.pool(frames)

    def logits(self, embedding: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(embedding)))

    def forward(self, frames: Tensor) -> Tensor:
        return self.logits(self.embed(frames))


def classify(frames: Tensor, head: StandInHead) -> Tensor:
    """Logits (..., 2) for frames shaped (..., T, D)."""
    return head(frames)


LabelLike = Union[Label, int, Sequence[int], Tensor]


def _label_tensor(labels: LabelLike) -> Tensor:
    if isinstance(labels, Label):
        return torch.tensor(labels.index)
    if isinstance(labels, Tensor):
        return labels.long()
    if isinstance(labels, int):
        return torch.tensor(labels)
    return torch.tensor([label.index if isinstance(label, Label) else int(label) for label in labels])


def weighted_ce(
    logits: Tensor, labels: LabelLike, weights: ClassWeights = ClassWeights(), reduction: str = "mean"
) -> Tensor:
    """
    Class-weighted cross-entropy.

    Args:
        logits: (2,) for one sample or (B, 2) for a batch
        labels: Label, class index, or a batch of them
        weights: Per-class weights
        reduction: 'mean' (sum of weighted losses / sum of weights), 'sum' or 'none'

    Returns:
        Tensor: the loss
    """
    if logits.shape[-1] != NUM_CLASSES:
        raise ClassifierError(f"weighted_ce: expected 2 logits, got {logits.shape[-1]}")
    target = _label_tensor(labels)
    w = weights.as_tensor(logits.dtype).to(logits.device)
    if logits.dim() == 1:
        return -w[target] * torch.log_softmax(logits, dim=-1)[target]
    if reduction not in ("mean", "sum", "none"):
        raise ClassifierError(f"weighted_ce: unknown reduction '{reduction}'")
    return F.cross_entropy(logits, target.to(logits.device), weight=w, reduction=reduction)


def score(logits: Tensor) -> Tensor:
    """Countermeasure score: logit(bonafide) - logit(spoof); higher means more bonafide."""
    return logits[..., 0] - logits[..., 1]
