"""
Encoder Module - Self-Supervised Speech Encoder
Convolutional feature encoder, span masking, frozen-codebook quantizer,
transformer context network and the contrastive pretraining objective
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from errors import EncoderError
from services.numerics import cosine_sim, seed_everything, softmax

logger = logging.getLogger(__name__)


def _prime_factors(n: int) -> List[int]:
    factors = []
    d = 2
    while d * d <= n:
        while n % d == 0:
            factors.append(d)
            n //= d
        d += 1
    if n > 1:
        factors.append(n)
    return sorted(factors, reverse=True)


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and pretraining hyper-parameters of the toy encoder."""

    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    conv_stride_ratio: Fraction = Fraction(1, 8)
    latent_dim: int = 64
    codebook_size: int = 64
    codebook_dim: int = 32
    mask_prob: float = 0.065
    mask_span: int = 10
    temperature: float = 0.1
    num_distractors: int = 10

    def __post_init__(self):
        ratio = self.conv_stride_ratio
        if not isinstance(ratio, Fraction):
            try:
                ratio = Fraction(str(ratio))
            except (ValueError, ZeroDivisionError):
                raise EncoderError(f"conv_stride_ratio: cannot parse '{self.conv_stride_ratio}'") from None
            object.__setattr__(self, "conv_stride_ratio", ratio)
        if ratio.numerator != 1 or ratio.denominator < 1:
            raise EncoderError(f"conv_stride_ratio must be 1/S for an integer S, got {ratio}")
        if self.num_layers < 1:
            raise EncoderError("num_layers must be at least 1")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads != 0:
            raise EncoderError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.mask_span < 1:
            raise EncoderError("mask_span must be at least 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise EncoderError(f"mask_prob {self.mask_prob} outside [0, 1]")
        if self.temperature <= 0:
            raise EncoderError("temperature must be positive")
        if self.num_distractors < 1:
            raise EncoderError("num_distractors must be at least 1")
        if self.codebook_size < 2:
            raise EncoderError("codebook_size must be at least 2")

    @property
    def stride(self) -> int:
        """Samples per frame, 1 / conv_stride_ratio."""
        return self.conv_stride_ratio.denominator

    @property
    def conv_strides(self) -> List[int]:
        """Per-layer strides whose product is the cumulative stride."""
        return _prime_factors(self.stride) or [1]

    def num_frames(self, num_samples: int) -> int:
        return math.floor(num_samples * self.conv_stride_ratio)


@dataclass
class MaskedBatch:
    """One utterance after masking and context encoding."""

    latent: Tensor
    masked_indices: Tensor
    context: Tensor
    quantized: Tensor
    codes: Optional[Tensor] = field(default=None)


class FeatureEncoder(nn.Module):
    """Stack of strided 1-D convolutions, kernel equal to stride, with GELU."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.stride = cfg.stride
        layers = []
        in_channels = 1
        for stride in cfg.conv_strides:
            layers.append(nn.Conv1d(in_channels, cfg.latent_dim, kernel_size=stride, stride=stride, bias=False))
            layers.append(nn.GELU())
            in_channels = cfg.latent_dim
        self.conv_layers = nn.Sequential(*layers)
        self.layer_norm = nn.LayerNorm(cfg.latent_dim)

    def forward(self, waves: Tensor) -> Tensor:
        unbatched = waves.dim() == 1
        if unbatched:
            waves = waves.unsqueeze(0)
        if waves.dim() != 2:
            raise EncoderError(f"feature_encode: expected (T,) or (B, T) waveforms, got {tuple(waves.shape)}")
        if waves.shape[-1] < self.stride:
            raise EncoderError(
                f"feature_encode: input shorter than receptive field ({waves.shape[-1]} < {self.stride} samples)"
            )
        z = self.conv_layers(waves.unsqueeze(1)).transpose(1, 2)
        z = self.layer_norm(z)
        return z.squeeze(0) if unbatched else z


def compute_mask_indices(
    num_frames: int, mask_prob: float, mask_span: int, generator: Optional[torch.Generator] = None
) -> Tensor:
    """
    Choose span-masked frame indices for one utterance.

    Starts are drawn without replacement from the positions where a full span fits;
    round(mask_prob * N) starts are drawn, at least one whenever mask_prob > 0.

    Returns:
        Tensor: sorted unique int64 frame indices in [0, num_frames)
    """
    if num_frames < 1:
        raise EncoderError("apply_mask: no frames to mask")
    if mask_prob <= 0:
        return torch.zeros(0, dtype=torch.long)
    span = min(mask_span, num_frames)
    candidates = num_frames - span + 1
    num_starts = min(candidates, max(1, round(mask_prob * num_frames)))
    starts = torch.randperm(candidates, generator=generator)[:num_starts]
    spans = starts.unsqueeze(1) + torch.arange(span).unsqueeze(0)
    return torch.unique(spans.reshape(-1))


def apply_mask(z: Tensor, masked_indices: Tensor, mask_embedding: Tensor) -> Tensor:
    """Replace the masked rows of z (N, D_z) with the shared mask embedding."""
    if mask_embedding.shape[-1] != z.shape[-1]:
        raise EncoderError("apply_mask: mask embedding width does not match latent width")
    mask = torch.zeros(z.shape[-2], dtype=torch.bool, device=z.device)
    mask[masked_indices] = True
    return torch.where(mask.unsqueeze(-1), mask_embedding.expand_as(z), z)


def quantize(z: Tensor, codebook: Tensor, projection: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """
    Map every frame to its nearest codebook row.

    Args:
        z: Latent frames (..., N, D_z)
        codebook: Codebook (V, D_q), V >= 2
        projection: Optional fixed (D_z, D_q) projection applied before the search

    Returns:
        tuple: (quantized rows (..., N, D_q), code indices (..., N)); ties go to the lowest index
    """
    if codebook.dim() != 2 or codebook.shape[0] < 2:
        raise EncoderError("quantize: codebook needs at least two rows")
    projected = z if projection is None else z @ projection
    if projected.shape[-1] != codebook.shape[-1]:
        raise EncoderError(
            f"quantize: frame width {projected.shape[-1]} does not match codebook width {codebook.shape[-1]}"
        )
    distances = ((projected.unsqueeze(-2) - codebook) ** 2).sum(dim=-1)
    codes = torch.argmin(distances, dim=-1)
    return codebook[codes], codes


def fit_codebook(
    points: Tensor, size: int, generator: Optional[torch.Generator] = None, iterations: int = 10
) -> Tensor:
    """
    k-means codebook over projected frames.

    Centres are seeded k-means++ style (each next centre drawn with probability
    proportional to its squared distance from the chosen ones), then refined with
    Lloyd iterations. Empty clusters keep their previous centre.

    Args:
        points: Projected frames (P, D_q)
        size: Number of codewords V
        generator: Drives the seeding draws
        iterations: Lloyd iterations

    Returns:
        Tensor: codebook (V, D_q)
    """
    points = points.detach()
    if points.dim() != 2 or points.shape[0] < size:
        raise EncoderError(f"fit_codebook: {tuple(points.shape)} frames cannot seed {size} codewords")
    first = int(torch.randint(0, points.shape[0], (1,), generator=generator))
    centres = [points[first]]
    closest = ((points - points[first]) ** 2).sum(dim=-1)
    for _ in range(1, size):
        weights = closest if float(closest.sum()) > 0 else torch.ones_like(closest)
        pick = int(torch.multinomial(weights, 1, generator=generator))
        centres.append(points[pick])
        closest = torch.minimum(closest, ((points - points[pick]) ** 2).sum(dim=-1))
    codebook = torch.stack(centres)

    for _ in range(iterations):
        _, codes = quantize(points, codebook)
        sums = torch.zeros_like(codebook).index_add_(0, codes, points)
        counts = torch.bincount(codes, minlength=size).to(points.dtype).unsqueeze(1)
        codebook = torch.where(counts > 0, sums / counts.clamp(min=1), codebook)
    return codebook


class Quantizer(nn.Module):
    """Frozen random projection and codebook; the codebook can be fitted once to data."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.register_buffer("projection", torch.randn(cfg.latent_dim, cfg.codebook_dim) / math.sqrt(cfg.latent_dim))
        self.register_buffer("codebook", torch.randn(cfg.codebook_size, cfg.codebook_dim))

    def forward(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        return quantize(z, self.codebook, self.projection)

    @torch.no_grad()
    def fit(self, z: Tensor, generator: Optional[torch.Generator] = None) -> int:
        """
        Replace the codebook with k-means centres of the projected latent frames z (..., D_z).

        Returns:
            int: number of distinct codes the frames use afterwards
        """
        points = z.reshape(-1, z.shape[-1]) @ self.projection
        self.codebook.copy_(fit_codebook(points, self.codebook.shape[0], generator))
        _, codes = quantize(points, self.codebook)
        return int(torch.unique(codes).numel())


class MultiHeadSelfAttention(nn.Module):

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = nn.Linear(dim, dim)
        # no key bias
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        return x.reshape(*x.shape[:-1], self.num_heads, self.head_dim).transpose(-3, -2)

    def forward(self, x: Tensor, return_attention: bool = False):
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attention = softmax(scores, dim=-1)
        heads = (attention @ v).transpose(-3, -2)
        out = self.out(heads.reshape(*heads.shape[:-2], -1))
        if return_attention:
            return out, attention
        return out


class TransformerBlock(nn.Module):
    """
    Post-norm transformer block.

    Optional adapters sit on the attention output and on the feed-forward output,
    before each residual addition.
    """

    def __init__(self, dim: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.attention = MultiHeadSelfAttention(dim, num_heads)
        self.attention_norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, dim)
        self.ffn_norm = nn.LayerNorm(dim)
        self.adapter_mha: Optional[nn.Module] = None
        self.adapter_ffn: Optional[nn.Module] = None

    def forward(self, x: Tensor) -> Tensor:
        h = self.attention(x)
        if self.adapter_mha is not None:
            h = self.adapter_mha(h)
        x = self.attention_norm(x + h)
        h = self.fc2(F.gelu(self.fc1(x)))
        if self.adapter_ffn is not None:
            h = self.adapter_ffn(h)
        return self.ffn_norm(x + h)


class SSLEncoder(nn.Module):
    """Feature encoder plus transformer; the part of the model kept for fine-tuning."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.feature_encoder = FeatureEncoder(cfg)
        self.feature_proj = nn.Linear(cfg.latent_dim, cfg.hidden_dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.hidden_dim, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.num_layers)
        )

    def feature_encode(self, waves: Tensor) -> Tensor:
        return self.feature_encoder(waves)

    def transformer_forward(self, z: Tensor) -> Tensor:
        """
        Run the context network and keep every block output.

        Args:
            z: Latent frames (N, D_z) or (B, N, D_z)

        Returns:
            Tensor: hidden stack (L, N, D) or (B, L, N, D)
        """
        if z.shape[-1] != self.cfg.latent_dim:
            raise EncoderError(
                f"transformer_forward: latent width {z.shape[-1]} does not match latent_dim {self.cfg.latent_dim}"
            )
        x = self.feature_proj(z)
        outputs = []
        for block in self.blocks:
            x = block(x)
            outputs.append(x)
        return torch.stack(outputs, dim=-3)

    def forward(self, waves: Tensor) -> Tensor:
        return self.transformer_forward(self.feature_encode(waves))

    def transformer_blocks(self) -> List[TransformerBlock]:
        return list(self.blocks)


def _sample_distractors(
    targets: Tensor, masked: Tensor, k: int, generator: Optional[torch.Generator] = None
) -> Tensor:
    num_frames = targets.shape[0]
    if num_frames < 2:
        raise EncoderError("contrastive_loss: no distractor candidates in a one-frame utterance")
    is_masked = torch.zeros(num_frames, dtype=torch.bool)
    is_masked[masked] = True
    not_self = torch.ones(masked.numel(), num_frames, dtype=torch.bool)
    not_self[torch.arange(masked.numel()), masked] = False
    differs = (targets[masked].unsqueeze(1) != targets.unsqueeze(0)).any(dim=-1)

    pools = [differs & is_masked, differs]
    pools.append(not_self & is_masked if masked.numel() > 1 else not_self)
    allowed = pools[-1]
    for pool in reversed(pools[:-1]):
        allowed = torch.where(pool.any(dim=1, keepdim=True), pool, allowed)
    return torch.multinomial(allowed.double(), k, replacement=True, generator=generator)


def contrastive_loss(
    context: Tensor,
    quantized: Tensor,
    masked_indices: Union[Tensor, Sequence[int]],
    cfg: EncoderConfig,
    generator: Optional[torch.Generator] = None,
    distractors: Optional[Tensor] = None,
) -> Tensor:
    """
    Contrastive loss over the masked frames of one utterance.

    Sampled distractors are drawn with replacement from the other masked frames
    whose target differs from the positive's; when there are none, from any frame
    with a different target; when every target is the same, from the other masked
    frames (or the other frames for a single masked frame).

    Args:
        context: Projected context vectors (N, D_q)
        quantized: Quantized targets (N, D_q)
        masked_indices: Masked frame indices
        cfg: Supplies temperature and num_distractors
        generator: Drives distractor sampling
        distractors: Optional explicit (M, K) frame indices used instead of sampling

    Returns:
        Tensor: mean over masked frames of -log p(true target)
    """
    masked = torch.as_tensor(masked_indices, dtype=torch.long)
    num_masked = masked.numel()
    if num_masked == 0:
        raise EncoderError("contrastive_loss: nothing to predict")
    if context.shape != quantized.shape:
        raise EncoderError(
            f"contrastive_loss: context {tuple(context.shape)} and targets {tuple(quantized.shape)} differ"
        )

    if distractors is None:
        distractors = _sample_distractors(quantized.detach(), masked, cfg.num_distractors, generator)
    distractors = torch.as_tensor(distractors, dtype=torch.long)

    candidates = torch.cat([quantized[masked].unsqueeze(1), quantized[distractors]], dim=1)
    logits = cosine_sim(context[masked].unsqueeze(1), candidates) / cfg.temperature
    return -torch.log_softmax(logits, dim=-1)[:, 0].mean()


class SSLModel(nn.Module):
    """Encoder with the pretraining-only parts: mask embedding, quantizer and final projection."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SSLEncoder(cfg)
        self.mask_embedding = nn.Parameter(torch.empty(cfg.latent_dim).uniform_())
        self.quantizer = Quantizer(cfg)
        self.final_proj = nn.Linear(cfg.hidden_dim, cfg.codebook_dim)

    def transformer_blocks(self) -> List[TransformerBlock]:
        return self.encoder.transformer_blocks()

    def masked_forward(self, wave: Tensor, generator: Optional[torch.Generator] = None) -> MaskedBatch:
        """Mask and contextualise a single waveform."""
        z = self.encoder.feature_encode(wave)
        quantized, codes = self.quantizer(z)
        masked_indices = compute_mask_indices(z.shape[0], self.cfg.mask_prob, self.cfg.mask_span, generator)
        masked = apply_mask(z, masked_indices, self.mask_embedding)
        context = self.final_proj(self.encoder.transformer_forward(masked)[-1])
        return MaskedBatch(latent=z, masked_indices=masked_indices, context=context, quantized=quantized, codes=codes)

    def pretrain_loss(self, waves: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        """
        Batch contrastive loss.

        Per-utterance losses are averaged with weights equal to their masked frame counts.
        """
        if waves.dim() == 1:
            waves = waves.unsqueeze(0)
        z = self.encoder.feature_encode(waves)
        quantized, _ = self.quantizer(z)
        num_frames = z.shape[1]
        indices = [
            compute_mask_indices(num_frames, self.cfg.mask_prob, self.cfg.mask_span, generator)
            for _ in range(z.shape[0])
        ]
        masked = torch.stack([apply_mask(z[b], idx, self.mask_embedding) for b, idx in enumerate(indices)])
        context = self.final_proj(self.encoder.transformer_forward(masked)[:, -1])

        total = context.new_zeros(())
        count = 0
        for b, idx in enumerate(indices):
            loss = contrastive_loss(context[b], quantized[b], idx, self.cfg, generator)
            total = total + loss * idx.numel()
            count += idx.numel()
        return total / count


def build_ssl_model(cfg: EncoderConfig, seed: int, dtype: torch.dtype = torch.float64) -> SSLModel:
    """Construct an SSLModel whose initial parameters depend only on the seed."""
    seed_everything(seed)
    model = SSLModel(cfg).to(dtype)
    logger.debug("built SSL model: L=%d D=%d stride=%d", cfg.num_layers, cfg.hidden_dim, cfg.stride)
    return model
