"""
Pipeline Service Module - Command Orchestration
One function per CLI command: each resolves its inputs, runs the domain services
and writes its outputs (plus the resolved config) into the run's output directory
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import storage
from config import RunConfig, write_resolved_config
from errors import TrainingError
from services.detector import DeepfakeDetector
from services.hamoe import GateUsage
from services.labels import Split
from services.metrics import det_points, join_labels, metric_report
from services.peft import count_by_module, count_trainable
from services.synth_data import Corpus, build_corpus, load_corpus
from services.training import (
    Checkpoint, checkpoint_load, checkpoint_save, finetune_stage, model_from_checkpoint, pretrain_stage,
    score_utterances,
)

logger = logging.getLogger(__name__)

PRETRAIN_CKPT = "pretrain.ckpt"
FINETUNE_CKPT = "finetune.ckpt"
METRICS_REPORT = "metrics.txt"
GATE_USAGE = "gate_usage.tsv"

PathLike = Union[str, Path]


@dataclass
class InspectResult:
    params: List[Tuple[str, int, int, float]]
    gate_usage: Optional[List[Tuple[int, int, float]]] = None


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / cfg.corpus.manifest


def get_corpus(cfg: RunConfig) -> Corpus:
    """Load the run's corpus from its manifest, or regenerate it in memory from the seed."""
    path = manifest_path(cfg)
    if path.exists():
        return load_corpus(path)
    logger.info("no manifest at %s; regenerating the corpus from seed %d", path, cfg.seed)
    return build_corpus(cfg.corpus, cfg.seed)


def run_gen_corpus(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    write_resolved_config(cfg, out)
    build_corpus(cfg.corpus, cfg.seed, out)
    return manifest_path(cfg)


def run_pretrain(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    write_resolved_config(cfg, out)
    result = pretrain_stage(cfg, get_corpus(cfg), log_path=out / "pretrain.log")
    path = out / PRETRAIN_CKPT
    checkpoint_save(path, result.checkpoint)
    return path


def run_finetune(cfg: RunConfig, ckpt_path: Optional[PathLike] = None) -> Path:
    """Fine-tune from a pretrain checkpoint, or from scratch when ckpt_path is None."""
    out = _out_dir(cfg)
    write_resolved_config(cfg, out)
    ckpt = checkpoint_load(ckpt_path) if ckpt_path is not None else None
    result = finetune_stage(cfg, get_corpus(cfg), ckpt, log_path=out / "finetune.log")
    path = out / FINETUNE_CKPT
    checkpoint_save(path, result.checkpoint)
    return path


def _load_detector(ckpt_path: PathLike) -> Tuple[Checkpoint, DeepfakeDetector]:
    ckpt = checkpoint_load(ckpt_path)
    if ckpt.stage != "finetune":
        raise TrainingError(f"{ckpt_path}: scoring needs a finetune checkpoint, got a '{ckpt.stage}' checkpoint")
    return ckpt, model_from_checkpoint(ckpt)


def run_evaluate(cfg: RunConfig, ckpt_path: PathLike, splits: Sequence[str] = ("eval",)) -> Dict[str, object]:
    """
    Score each split, write score files and DET tables, and report EER and min t-DCF.

    With several splits the report also carries eer_avg, the mean EER over them.
    """
    out = _out_dir(cfg)
    write_resolved_config(cfg, out)
    _, detector = _load_detector(ckpt_path)
    corpus = get_corpus(cfg)
    labels = corpus.labels()
    usage = GateUsage(cfg.hamoe.num_experts) if detector.hamoe is not None else None

    report: Dict[str, object] = {"checkpoint": str(ckpt_path)}
    eers = []
    for name in splits:
        split = Split.parse(name)
        scored = score_utterances(
            detector, corpus.split(split), cfg.corpus.target_len, cfg.finetune.seed,
            cfg.finetune.batch_size, cfg.class_weights, usage,
        )
        score_path = out / f"scores_{split.value}.txt"
        storage.write_scores(score_path, list(zip(scored.ids, scored.scores)))
        records = join_labels(storage.read_scores(score_path), labels)
        report.update(metric_report(records, cfg.tdcf, prefix=f"{split.value}."))
        eers.append(report[f"{split.value}.eer"])
        storage.write_table(out / f"det_{split.value}.tsv", ("p_fa", "p_miss"), det_points(records))
    if len(eers) > 1:
        report["eer_avg"] = float(np.mean(eers))
    report.update(cfg.tdcf.describe())
    storage.write_report(out / METRICS_REPORT, report)
    if usage is not None:
        storage.write_table(out / GATE_USAGE, ("expert", "selected", "frequency"), usage.table())
    return report


def run_inspect(
    ckpt_path: PathLike, cfg: Optional[RunConfig] = None, split: Optional[str] = None
) -> InspectResult:
    """
    Parameter counts per top-level module plus the total; with a split, also gate usage.

    Returns:
        InspectResult: rows of (module, total, trainable, fraction) and optional usage rows
    """
    ckpt = checkpoint_load(ckpt_path)
    model = model_from_checkpoint(ckpt)
    rows = [(name, c.total, c.trainable, c.fraction) for name, c in count_by_module(model).items()]
    overall = count_trainable(model)
    rows.append(("total", overall.total, overall.trainable, overall.fraction))
    usage_rows = None
    if cfg is not None:
        out = _out_dir(cfg)
        write_resolved_config(cfg, out)
        storage.write_table(out / "params.tsv", ("module", "total", "trainable", "fraction"), rows)
        if split is not None and isinstance(model, DeepfakeDetector) and model.hamoe is not None:
            usage = GateUsage(model.hamoe.cfg.num_experts)
            score_utterances(
                model, get_corpus(cfg).split(Split.parse(split)), cfg.corpus.target_len, cfg.finetune.seed,
                cfg.finetune.batch_size, cfg.class_weights, usage,
            )
            usage_rows = usage.table()
            storage.write_table(out / GATE_USAGE, ("expert", "selected", "frequency"), usage_rows)
    return InspectResult(rows, usage_rows)


def run_export_embeddings(cfg: RunConfig, ckpt_path: PathLike, split: str = "eval") -> Path:
    """Write one pooled embedding row per utterance of a split, labelled for external plotting."""
    out = _out_dir(cfg)
    write_resolved_config(cfg, out)
    _, detector = _load_detector(ckpt_path)
    utterances = get_corpus(cfg).split(Split.parse(split))
    scored = score_utterances(
        detector, utterances, cfg.corpus.target_len, cfg.finetune.seed, cfg.finetune.batch_size,
        cfg.class_weights, with_embeddings=True,
    )
    embeddings = scored.embeddings if scored.embeddings is not None else np.zeros((0, 0))
    width = embeddings.shape[1] if embeddings.ndim == 2 else 0
    header = ["id", "label"] + [f"e{i}" for i in range(width)]
    rows = [
        [utt.id, utt.label.value] + [float(v) for v in vector]
        for utt, vector in zip(utterances, embeddings)
    ]
    path = out / f"embeddings_{Split.parse(split).value}.tsv"
    storage.write_table(path, header, rows)
    logger.info("exported %d embeddings of width %d to %s", len(rows), width, path)
    return path
