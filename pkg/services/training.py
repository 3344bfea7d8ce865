"""
Training Module - Two-Stage Training Protocol
Stage 1 continues self-supervised pretraining with only PEFT parameters trainable;
Stage 2 fine-tunes the detector under one of three freeze modes.
Also owns the optimizer step, early stopping and checkpoints.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

import storage
from errors import StorageError, TrainingError
from schema import from_plain, to_plain
from services.classifier import ClassWeights, HeadConfig, score, weighted_ce
from services.detector import DeepfakeDetector, build_detector
from services.encoder import EncoderConfig, SSLEncoder, SSLModel, build_ssl_model
from services.hamoe import GateUsage, HamoeConfig
from services.labels import Split
from services.metrics import compute_eer, join_labels
from services.numerics import RngState, derive_seed, seed_everything
from services.peft import PeftConfig, count_trainable, inject_peft, is_peft_parameter
from services.synth_data import Corpus, Utterance, augment, crop_or_pad

if TYPE_CHECKING:
    from config import RunConfig

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")
FREEZE_MODES = ("full", "frozen_ssl", "adapter_only")
CODEBOOK_FIT_UTTERANCES = 64


@dataclass(frozen=True)
class StageConfig:
    stage: str = "finetune"
    freeze_mode: str = "full"
    lr: float = 5e-6
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 10
    patience: int = 3
    grad_clip: float = 1.0
    seed: Optional[int] = None
    augment_strength: float = 0.0
    holdout_fraction: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.stage not in STAGES:
            raise TrainingError(f"unknown stage '{self.stage}'")
        if self.freeze_mode not in FREEZE_MODES:
            raise TrainingError(f"unknown freeze_mode '{self.freeze_mode}', expected one of {', '.join(FREEZE_MODES)}")
        if self.stage == "pretrain" and self.freeze_mode != "adapter_only":
            raise TrainingError("the pretrain stage trains PEFT parameters only: freeze_mode must be adapter_only")
        if self.patience < 1:
            raise TrainingError("patience must be at least 1")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise TrainingError("lr and grad_clip must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise TrainingError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise TrainingError("weight_decay must not be negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingError("batch_size and max_epochs must be at least 1")
        if not 0 <= self.augment_strength <= 1:
            raise TrainingError("augment_strength must be within [0, 1]")
        if not 0 < self.holdout_fraction < 1:
            raise TrainingError("holdout_fraction must be within (0, 1)")

    @classmethod
    def pretrain_defaults(cls, **overrides) -> "StageConfig":
        values = dict(stage="pretrain", freeze_mode="adapter_only", lr=1e-5, weight_decay=0.0)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def finetune_defaults(cls, **overrides) -> "StageConfig":
        values = dict(stage="finetune", freeze_mode="full", lr=5e-6, weight_decay=1e-4)
        values.update(overrides)
        return cls(**values)


class EarlyStopping:
    """Stops after `patience` consecutive evaluations without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = None
        self.bad_epochs = 0

    def step(self, metric) -> bool:
        """Record one evaluation; returns True when it improved on the best so far."""
        if self.best is None or metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def _quiet():
    return None if logger.isEnabledFor(logging.INFO) else True


def trainable_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def build_optimizer(model: nn.Module, cfg: StageConfig) -> torch.optim.Optimizer:
    """AdamW over the trainable parameters only; frozen parameters are never registered."""
    params = trainable_parameters(model)
    if not params:
        raise TrainingError("no trainable parameters")
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=1e-8, weight_decay=cfg.weight_decay)


def adam_step(model: nn.Module, optimizer: torch.optim.Optimizer, cfg: StageConfig) -> float:
    """
    Clip, step and clear gradients.

    Returns:
        float: global gradient norm before clipping
    """
    norm = torch.nn.utils.clip_grad_norm_(trainable_parameters(model), cfg.grad_clip)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return float(norm)


class WaveformDataset(Dataset):
    """Fixed-length waveforms and class indices; crops and augmentation depend on (seed, id, epoch)."""

    def __init__(
        self,
        utterances: Sequence[Utterance],
        target_len: int,
        seed: int,
        augment_strength: float = 0.0,
        dtype: torch.dtype = torch.float64,
    ):
        self.utterances = list(utterances)
        self.target_len = target_len
        self.seed = seed
        self.augment_strength = augment_strength
        self.dtype = dtype
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, index: int):
        utt = self.utterances[index]
        crop_seed = derive_seed(self.seed, utt.id, self.epoch) if self.augment_strength > 0 else derive_seed(self.seed, utt.id)
        wave = crop_or_pad(utt.waveform, self.target_len, seed=crop_seed)
        if self.augment_strength > 0:
            rng = RngState(self.seed).child("augment", utt.id, self.epoch).numpy()
            wave = augment(wave, rng, self.augment_strength)
        samples = torch.from_numpy(wave.samples.astype(np.float64)).to(self.dtype)
        return samples, utt.label.index


def _loader(dataset: WaveformDataset, batch_size: int, shuffle_seed: Optional[int] = None) -> DataLoader:
    generator = RngState(shuffle_seed).torch() if shuffle_seed is not None else None
    return DataLoader(
        dataset, batch_size=batch_size, shuffle=shuffle_seed is not None, generator=generator, num_workers=0
    )


# Checkpoints

@dataclass
class Checkpoint:
    stage: str
    model_config: Dict
    stage_config: Dict
    parameters: Dict[str, np.ndarray]
    frozen: Dict[str, bool]
    buffers: Dict[str, np.ndarray]
    rng_state: np.ndarray
    epoch: int
    best_metric: List[float] = field(default_factory=list)

    @classmethod
    def capture(
        cls, model: nn.Module, stage: str, model_config: Dict, stage_config: Dict, epoch: int, best_metric
    ) -> "Checkpoint":
        parameters = {}
        frozen = {}
        for name, param in model.named_parameters():
            parameters[name] = param.detach().cpu().numpy().copy()
            frozen[name] = not param.requires_grad
        buffers = {name: buf.detach().cpu().numpy().copy() for name, buf in model.named_buffers()}
        return cls(
            stage=stage,
            model_config=model_config,
            stage_config=stage_config,
            parameters=parameters,
            frozen=frozen,
            buffers=buffers,
            rng_state=torch.get_rng_state().numpy().copy(),
            epoch=epoch,
            best_metric=[float(v) for v in np.atleast_1d(best_metric)],
        )

    def state_dict(self, prefix: str = "") -> Dict[str, Tensor]:
        """Parameters and buffers whose names start with prefix, with the prefix removed."""
        state = {}
        for source in (self.parameters, self.buffers):
            for name, array in source.items():
                if name.startswith(prefix):
                    state[name[len(prefix):]] = torch.from_numpy(array.copy())
        return state

    def restore(self, model: nn.Module, prefix: str = "") -> None:
        try:
            model.load_state_dict(self.state_dict(prefix), strict=True)
        except RuntimeError as e:
            raise TrainingError(f"checkpoint does not match the model: {e}") from None
        for name, param in model.named_parameters():
            param.requires_grad = not self.frozen.get(prefix + name, False)


def checkpoint_save(path: Union[str, Path], ckpt: Checkpoint) -> None:
    meta = {
        "stage": ckpt.stage,
        "model_config": ckpt.model_config,
        "stage_config": ckpt.stage_config,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
    }
    entries = [
        storage.TensorEntry(name, storage.KIND_PARAMETER, ckpt.frozen[name], array)
        for name, array in ckpt.parameters.items()
    ]
    entries.extend(storage.TensorEntry(name, storage.KIND_BUFFER, True, array) for name, array in ckpt.buffers.items())
    entries.append(storage.TensorEntry("rng_state", storage.KIND_STATE, True, ckpt.rng_state))
    storage.write_checkpoint(path, meta, entries)
    logger.info("saved %s checkpoint (epoch %d) to %s", ckpt.stage, ckpt.epoch, path)


def checkpoint_load(path: Union[str, Path]) -> Checkpoint:
    meta, entries = storage.read_checkpoint(path)
    missing = [key for key in ("stage", "model_config", "stage_config", "epoch", "best_metric") if key not in meta]
    if missing:
        raise StorageError(f"{path}: checkpoint metadata lacks {', '.join(missing)}")
    parameters, frozen, buffers = {}, {}, {}
    rng_state = np.zeros(0, dtype=np.uint8)
    for entry in entries:
        if entry.kind == storage.KIND_PARAMETER:
            parameters[entry.name] = entry.array
            frozen[entry.name] = entry.frozen
        elif entry.kind == storage.KIND_BUFFER:
            buffers[entry.name] = entry.array
        else:
            rng_state = entry.array
    return Checkpoint(
        stage=meta["stage"],
        model_config=meta["model_config"],
        stage_config=meta["stage_config"],
        parameters=parameters,
        frozen=frozen,
        buffers=buffers,
        rng_state=rng_state,
        epoch=meta["epoch"],
        best_metric=meta["best_metric"],
    )


def model_config_of(cfg: "RunConfig", peft_injected: bool, peft: Optional[PeftConfig] = None) -> Dict:
    return {
        "encoder": to_plain(cfg.encoder),
        "peft": to_plain(peft if peft is not None else cfg.peft),
        "peft_injected": peft_injected,
        "hamoe": to_plain(cfg.hamoe),
        "head": to_plain(cfg.head),
        "precision": cfg.precision,
    }


def _dtype(precision: str) -> torch.dtype:
    return torch.float32 if precision == "float32" else torch.float64


def model_from_checkpoint(ckpt: Checkpoint) -> Union[SSLModel, DeepfakeDetector]:
    """Rebuild the model a checkpoint was captured from and load its state."""
    mc = ckpt.model_config
    try:
        encoder_cfg = from_plain(EncoderConfig, mc["encoder"], "encoder")
        peft_cfg = from_plain(PeftConfig, mc["peft"], "peft")
        hamoe_cfg = from_plain(HamoeConfig, mc["hamoe"], "hamoe")
        head_cfg = from_plain(HeadConfig, mc["head"], "head")
        dtype = _dtype(mc["precision"])
        injected = bool(mc["peft_injected"])
    except (KeyError, TypeError):
        raise StorageError("checkpoint model_config is incomplete") from None

    if ckpt.stage == "pretrain":
        model = SSLModel(encoder_cfg).to(dtype)
    else:
        model = build_detector(encoder_cfg, hamoe_cfg, head_cfg, seed=0, dtype=dtype)
    if injected:
        inject_peft(model.encoder if isinstance(model, DeepfakeDetector) else model, peft_cfg)
    ckpt.restore(model)
    return model


def apply_freeze_mode(detector: DeepfakeDetector, mode: str) -> None:
    """Set trainability: full trains everything, frozen_ssl freezes the encoder, adapter_only trains PEFT in it."""
    if mode not in FREEZE_MODES:
        raise TrainingError(f"unknown freeze_mode '{mode}'")
    has_peft = any(is_peft_parameter(name) for name, _ in detector.encoder.named_parameters())
    if mode == "adapter_only" and not has_peft:
        raise TrainingError("freeze_mode adapter_only needs an encoder with PEFT modules")
    for name, param in detector.named_parameters():
        if not name.startswith("encoder."):
            param.requires_grad = True
        elif mode == "full":
            param.requires_grad = True
        elif mode == "frozen_ssl":
            param.requires_grad = False
        else:
            param.requires_grad = is_peft_parameter(name)


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    history: List[Dict[str, float]]


def _log_epoch(record: Dict[str, object], log_path: Optional[Path]) -> None:
    line = " ".join(f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}" for key, value in record.items())
    logger.info(line)
    if log_path is not None:
        storage.append_log_line(log_path, line)


def _fit_codebook(
    model: SSLModel, utterances: Sequence[Utterance], target_len: int, seed: int, dtype: torch.dtype
) -> None:
    """Fit the frozen codebook to latent frames of up to CODEBOOK_FIT_UTTERANCES training utterances."""
    pick = RngState(seed).child("codebook").numpy().permutation(len(utterances))[:CODEBOOK_FIT_UTTERANCES]
    dataset = WaveformDataset([utterances[i] for i in pick], target_len, seed, 0.0, dtype)
    with torch.no_grad():
        frames = model.encoder.feature_encode(torch.stack([dataset[i][0] for i in range(len(dataset))]))
    num_frames = frames.shape[0] * frames.shape[1]
    size = model.quantizer.codebook.shape[0]
    if num_frames < size:
        logger.warning("only %d latent frames for a %d-entry codebook; keeping the random codebook", num_frames, size)
        return
    used = model.quantizer.fit(frames, RngState(seed).child("codebook-init").torch())
    logger.info("fitted the codebook on %d frames: %d of %d codes in use", num_frames, used, size)


def pretrain_stage(cfg: "RunConfig", corpus: Corpus, log_path: Optional[Union[str, Path]] = None) -> TrainingResult:
    """
    Continue contrastive pretraining with only PEFT parameters trainable.

    A held-out slice of the pretrain split drives early stopping; the best
    held-out checkpoint is returned.
    """
    stage = cfg.pretrain
    seed = stage.seed if stage.seed is not None else cfg.seed
    dtype = _dtype(cfg.precision)
    log_path = Path(log_path) if log_path is not None else None
    if not cfg.peft.enabled:
        raise TrainingError("pretraining needs PEFT enabled: the base encoder must stay frozen")
    if cfg.encoder.mask_prob <= 0:
        raise TrainingError("pretraining needs encoder.mask_prob > 0: an empty mask leaves nothing to predict")
    utterances = corpus.split(Split.PRETRAIN)
    if not utterances:
        raise TrainingError("empty corpus: the pretrain split has no utterances")

    peft_cfg = dataclasses.replace(cfg.peft, freeze_base=True)
    model = build_ssl_model(cfg.encoder, seed, dtype)
    inject_peft(model, peft_cfg, generator=RngState(seed).child("lora").torch())

    order = RngState(seed).child("holdout").numpy().permutation(len(utterances))
    num_holdout = max(1, round(stage.holdout_fraction * len(utterances))) if len(utterances) > 1 else 0
    holdout = [utterances[i] for i in order[:num_holdout]]
    train = [utterances[i] for i in order[num_holdout:]]
    if not holdout:
        logger.warning("pretrain split has a single utterance; it is also used as the held-out slice")
        holdout = train

    target_len = cfg.corpus.target_len
    _fit_codebook(model, train, target_len, seed, dtype)
    train_set = WaveformDataset(train, target_len, seed, stage.augment_strength, dtype)
    holdout_loader = _loader(WaveformDataset(holdout, target_len, seed, 0.0, dtype), stage.batch_size)
    optimizer = build_optimizer(model, stage)
    stopper = EarlyStopping(stage.patience)
    model_config = model_config_of(cfg, True, peft_cfg)
    stage_config = to_plain(stage)
    history = []
    best = None

    for epoch in range(1, stage.max_epochs + 1):
        started = time.monotonic()
        train_set.set_epoch(epoch)
        mask_generator = RngState(seed).child("mask", epoch).torch()
        model.train()
        losses = []
        batches = _loader(train_set, stage.batch_size, derive_seed(seed, "shuffle", epoch))
        for waves, _ in tqdm(batches, desc=f"pretrain {epoch}", leave=False, disable=_quiet()):
            loss = model.pretrain_loss(waves, mask_generator)
            loss.backward()
            adam_step(model, optimizer, stage)
            losses.append(loss.item())

        model.eval()
        holdout_generator = RngState(seed).child("holdout-mask").torch()
        with torch.no_grad():
            holdout_losses = [float(model.pretrain_loss(waves, holdout_generator)) for waves, _ in holdout_loader]
        record = {
            "stage": "pretrain",
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "dev_metric": float(np.mean(holdout_losses)),
            "elapsed_s": time.monotonic() - started,
        }
        history.append(record)
        _log_epoch(record, log_path)

        if stopper.step(record["dev_metric"]):
            best = Checkpoint.capture(model, "pretrain", model_config, stage_config, epoch, record["dev_metric"])
        if stopper.should_stop:
            logger.warning("early stopping after epoch %d: no improvement for %d epochs", epoch, stage.patience)
            break
    return TrainingResult(best, history)


@dataclass
class Scored:
    ids: List[str]
    scores: List[float]
    loss: float
    embeddings: Optional[np.ndarray] = None


def score_utterances(
    detector: DeepfakeDetector,
    utterances: Sequence[Utterance],
    target_len: int,
    seed: int,
    batch_size: int = 8,
    weights: ClassWeights = ClassWeights(),
    usage: Optional[GateUsage] = None,
    with_embeddings: bool = False,
) -> Scored:
    """Scores, weighted dev loss and optionally pooled embeddings, in utterance order."""
    dtype = next(detector.parameters()).dtype
    loader = _loader(WaveformDataset(utterances, target_len, seed, 0.0, dtype), batch_size)
    class_weights = weights.as_tensor(dtype)
    scores, embeddings = [], []
    total_loss = 0.0
    total_weight = 0.0
    detector.eval()
    with torch.no_grad():
        for waves, labels in loader:
            out = detector(waves)
            total_loss += float(weighted_ce(out.logits, labels, weights, reduction="sum"))
            total_weight += float(class_weights[labels].sum())
            scores.extend(score(out.logits).tolist())
            if with_embeddings:
                embeddings.append(out.embedding.numpy())
            if usage is not None and out.decision is not None:
                usage.add(out.decision)
    return Scored(
        ids=[u.id for u in utterances],
        scores=scores,
        loss=total_loss / total_weight if total_weight else float("nan"),
        embeddings=np.concatenate(embeddings) if with_embeddings and embeddings else None,
    )


def _encoder_from_checkpoint(cfg: "RunConfig", ckpt: Checkpoint, dtype: torch.dtype) -> Tuple[SSLEncoder, bool]:
    if ckpt.stage != "pretrain":
        raise TrainingError(f"fine-tuning starts from a pretrain checkpoint, got a '{ckpt.stage}' checkpoint")
    if ckpt.model_config.get("encoder") != to_plain(cfg.encoder):
        raise TrainingError("checkpoint encoder config does not match encoder section of the run config")
    injected = bool(ckpt.model_config.get("peft_injected"))
    encoder = SSLEncoder(cfg.encoder).to(dtype)
    if injected:
        inject_peft(encoder, from_plain(PeftConfig, ckpt.model_config["peft"], "peft"))
    ckpt.restore(encoder, prefix="encoder.")
    return encoder, injected


def finetune_stage(
    cfg: "RunConfig", corpus: Corpus, ckpt: Optional[Checkpoint] = None, log_path: Optional[Union[str, Path]] = None
) -> TrainingResult:
    """
    Supervised fine-tuning of encoder, HA-MoE and head with weighted cross-entropy.

    Without a checkpoint the encoder starts from the seed. The checkpoint with the
    lowest (dev EER, dev loss) is returned.
    """
    stage = cfg.finetune
    seed = stage.seed if stage.seed is not None else cfg.seed
    dtype = _dtype(cfg.precision)
    log_path = Path(log_path) if log_path is not None else None
    mode = stage.freeze_mode
    train = corpus.split(Split.TRAIN)
    dev = corpus.split(Split.DEV)
    if not train or not dev:
        raise TrainingError(f"empty corpus: train has {len(train)} and dev has {len(dev)} utterances")

    seed_everything(seed)
    peft_used = cfg.peft
    if ckpt is not None:
        encoder, injected = _encoder_from_checkpoint(cfg, ckpt, dtype)
        peft_used = from_plain(PeftConfig, ckpt.model_config["peft"], "peft") if injected else cfg.peft
    else:
        encoder = SSLEncoder(cfg.encoder).to(dtype)
        injected = False
    if mode == "adapter_only" and not injected:
        if not cfg.peft.enabled:
            raise TrainingError("freeze_mode adapter_only needs PEFT enabled or a pretrain checkpoint with PEFT")
        inject_peft(encoder, cfg.peft, generator=RngState(seed).child("lora").torch())
        injected = True
        peft_used = cfg.peft

    detector = build_detector(cfg.encoder, cfg.hamoe, cfg.head, derive_seed(seed, "detector"), dtype, encoder=encoder)
    apply_freeze_mode(detector, mode)
    counts = count_trainable(detector)
    logger.info(
        "fine-tuning in %s mode: %d of %d parameters trainable (%.2f%%)",
        mode, counts.trainable, counts.total, 100 * counts.fraction,
    )

    target_len = cfg.corpus.target_len
    train_set = WaveformDataset(train, target_len, seed, stage.augment_strength, dtype)
    labels = {u.id: u.label for u in dev}
    optimizer = build_optimizer(detector, stage)
    stopper = EarlyStopping(stage.patience)
    model_config = model_config_of(cfg, injected, peft_used)
    stage_config = to_plain(stage)
    history = []
    best = None

    for epoch in range(1, stage.max_epochs + 1):
        started = time.monotonic()
        train_set.set_epoch(epoch)
        detector.train()
        if mode == "frozen_ssl":
            # adapter BatchNorm statistics are encoder state too
            detector.encoder.eval()
        losses = []
        batches = _loader(train_set, stage.batch_size, derive_seed(seed, "shuffle", epoch))
        for waves, targets in tqdm(batches, desc=f"finetune {epoch}", leave=False, disable=_quiet()):
            loss = weighted_ce(detector(waves).logits, targets, cfg.class_weights)
            loss.backward()
            adam_step(detector, optimizer, stage)
            losses.append(loss.item())

        scored = score_utterances(detector, dev, target_len, seed, stage.batch_size, cfg.class_weights)
        dev_eer, _ = compute_eer(join_labels(list(zip(scored.ids, scored.scores)), labels))
        record = {
            "stage": "finetune",
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "dev_loss": scored.loss,
            "dev_metric": dev_eer,
            "elapsed_s": time.monotonic() - started,
        }
        history.append(record)
        _log_epoch(record, log_path)

        key = (dev_eer, scored.loss)
        if stopper.step(key):
            best = Checkpoint.capture(detector, "finetune", model_config, stage_config, epoch, list(key))
        if stopper.should_stop:
            logger.warning("early stopping after epoch %d: no improvement for %d epochs", epoch, stage.patience)
            break
    return TrainingResult(best, history)
