"""
Config module for the Wav2DF toolkit
Loads the YAML run configuration, applies command-line overrides and archives
the fully resolved configuration next to every command's outputs
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import torch
import yaml

from errors import ConfigError
from schema import from_plain, to_plain
from services.classifier import ClassWeights, HeadConfig
from services.encoder import EncoderConfig
from services.hamoe import HamoeConfig
from services.metrics import TdcfCostModel
from services.peft import PeftConfig
from services.synth_data import CorpusConfig
from services.training import StageConfig

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "W2DF_OUTPUT_DIR"
RESOLVED_CONFIG = "resolved_config.yaml"
PRECISIONS = ("float32", "float64")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    output_dir: str = "runs/default"
    precision: str = "float64"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    hamoe: HamoeConfig = field(default_factory=HamoeConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    class_weights: ClassWeights = field(default_factory=ClassWeights)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: StageConfig = field(default_factory=StageConfig.pretrain_defaults)
    finetune: StageConfig = field(default_factory=StageConfig.finetune_defaults)
    tdcf: TdcfCostModel = field(default_factory=TdcfCostModel)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self.precision == "float32" else torch.float64


SECTIONS = {
    "encoder": EncoderConfig,
    "peft": PeftConfig,
    "hamoe": HamoeConfig,
    "head": HeadConfig,
    "class_weights": ClassWeights,
    "corpus": CorpusConfig,
    "pretrain": StageConfig,
    "finetune": StageConfig,
    "tdcf": TdcfCostModel,
}
SCALARS = ("seed", "output_dir", "precision")


def config_from_dict(document: Optional[dict]) -> RunConfig:
    """Validate a parsed config document and fill every omitted key with its default."""
    document = document or {}
    if not isinstance(document, dict):
        raise ConfigError("the config document must be a mapping")
    unknown = sorted(set(document) - set(SECTIONS) - set(SCALARS))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")

    defaults = RunConfig()
    values = {}
    for name in SCALARS:
        if name in document:
            default = getattr(defaults, name)
            value = document[name]
            if isinstance(default, int) and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            if isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"{name} must be a string, got {value!r}")
            values[name] = value
    for name, cls in SECTIONS.items():
        values[name] = from_plain(cls, document.get(name), name, base=getattr(defaults, name))

    config = dataclasses.replace(defaults, **values)
    if config.precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {', '.join(PRECISIONS)}, got '{config.precision}'")
    if config.pretrain.stage != "pretrain" or config.finetune.stage != "finetune":
        raise ConfigError("pretrain.stage and finetune.stage must name their own sections")
    return config


def load_config(
    path: Optional[Union[str, Path]] = None, seed: Optional[int] = None, output_dir: Optional[str] = None
) -> RunConfig:
    """
    Resolve a run configuration.

    Precedence: defaults < config file < W2DF_OUTPUT_DIR < --seed / --out flags.
    Stage seeds left empty fall back to the run seed.

    Args:
        path: Optional YAML file
        seed: Run seed override
        output_dir: Output directory override

    Returns:
        RunConfig: the resolved configuration
    """
    document = {}
    if path is not None:
        path = Path(path)
        try:
            document = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from None
    config = config_from_dict(document)

    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if output_dir is not None:
        overrides["output_dir"] = str(output_dir)
    elif os.environ.get(OUTPUT_DIR_ENV):
        overrides["output_dir"] = os.environ[OUTPUT_DIR_ENV]
    config = dataclasses.replace(config, **overrides)

    stages = {}
    for name in ("pretrain", "finetune"):
        stage = getattr(config, name)
        if stage.seed is None:
            stages[name] = dataclasses.replace(stage, seed=config.seed)
    config = dataclasses.replace(config, **stages)
    logger.debug("resolved config: seed=%d output_dir=%s", config.seed, config.output_dir)
    return config


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(to_plain(config), sort_keys=True, default_flow_style=False)


def write_resolved_config(config: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> Path:
    out_dir = Path(out_dir if out_dir is not None else config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG
    path.write_text(dump_config(config), encoding="utf-8")
    return path
