# Imports.
import dataclasses
from fractions import Fraction

import pytest
import torch

from config import RunConfig
from services.classifier import HeadConfig
from services.encoder import EncoderConfig
from services.hamoe import HamoeConfig
from services.peft import PeftConfig
from services.synth_data import CorpusConfig
from services.training import StageConfig


def make_tiny_run_config(output_dir, **overrides) -> RunConfig:
    """
    A run small enough for the default test suite: L=2, D=8, a 44-utterance corpus, two epochs per stage.
    """
    cfg = RunConfig(
        seed=42,
        output_dir=str(output_dir),
        encoder=tiny_encoder_config(),
        peft=PeftConfig(lora_rank=2, adapter_dim=4, adapter_channels=2),
        hamoe=HamoeConfig(compress_dim=4, num_experts=4, top_k=2, expert_hidden=8),
        head=HeadConfig(hidden=8),
        corpus=CorpusConfig(
            sample_rate=4000, min_duration=0.04, max_duration=0.06, target_duration=0.05,
            pretrain=12, train=16, dev=8, eval=8,
        ),
        pretrain=StageConfig.pretrain_defaults(lr=1e-3, batch_size=4, max_epochs=2, seed=42, holdout_fraction=0.2),
        finetune=StageConfig.finetune_defaults(lr=1e-3, batch_size=4, max_epochs=2, seed=42),
    )
    return dataclasses.replace(cfg, **overrides)


def tiny_encoder_config(**overrides) -> EncoderConfig:
    values = dict(
        num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16, conv_stride_ratio=Fraction(1, 4),
        latent_dim=8, codebook_size=8, codebook_dim=4, mask_prob=0.2, mask_span=2,
        temperature=0.1, num_distractors=3,
    )
    values.update(overrides)
    return EncoderConfig(**values)


# Fixtures.
@pytest.fixture
def double_precision():
    """
    Runs the test with float64 as the torch default dtype.
    """
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_encoder_cfg():
    return tiny_encoder_config()


@pytest.fixture
def tiny_run_cfg(tmp_path):
    """
    Tiny run configuration writing into a fresh temporary directory.
    """
    return make_tiny_run_config(tmp_path / "run")
