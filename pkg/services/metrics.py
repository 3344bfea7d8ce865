"""
Metrics Module - Anti-spoofing evaluation
Equal error rate, minimum normalised t-DCF, DET points and score/label joining
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from errors import MetricsError
from services.labels import Label

logger = logging.getLogger(__name__)

TDCF_REVISIONS = ("2019", "2021")


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    score: float
    label: Label


@dataclass(frozen=True)
class TdcfCostModel:
    """
    Priors, costs and the fixed ASV operating point of the tandem cost.

    Defaults follow the 2021 convention with a perfect ASV system for target and
    non-target trials that accepts every spoof.
    """

    revision: str = "2021"
    p_spoof: float = 0.05
    p_target_given_nonspoof: float = 0.99
    c_miss: float = 1.0
    c_fa: float = 10.0
    c_fa_spoof: float = 10.0
    c_miss_cm: float = 1.0
    asv_p_miss: float = 0.0
    asv_p_fa: float = 0.0
    asv_p_fa_spoof: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "revision", str(self.revision))
        if self.revision not in TDCF_REVISIONS:
            raise MetricsError(f"tdcf.revision must be one of {', '.join(TDCF_REVISIONS)}, got '{self.revision}'")
        for name in ("p_spoof", "p_target_given_nonspoof", "asv_p_miss", "asv_p_fa", "asv_p_fa_spoof"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise MetricsError(f"tdcf.{name} must be a probability, got {value}")
        for name in ("c_miss", "c_fa", "c_fa_spoof", "c_miss_cm"):
            if getattr(self, name) <= 0:
                raise MetricsError(f"tdcf.{name} must be positive")

    def coefficients(self) -> Tuple[float, float, float]:
        """(C0, C1, C2) of the cost C0 + C1 * P_miss + C2 * P_fa."""
        p_target = (1 - self.p_spoof) * self.p_target_given_nonspoof
        p_nontarget = (1 - self.p_spoof) * (1 - self.p_target_given_nonspoof)
        if self.revision == "2021":
            c0 = p_target * self.c_miss * self.asv_p_miss + p_nontarget * self.c_fa * self.asv_p_fa
            c1 = p_target * self.c_miss - c0
        else:
            c0 = 0.0
            c1 = (p_target * (self.c_miss_cm - self.c_miss * self.asv_p_miss)
                  - p_nontarget * self.c_fa * self.asv_p_fa)
        c2 = self.c_fa_spoof * self.p_spoof * self.asv_p_fa_spoof
        return c0, c1, c2

    def describe(self) -> Dict[str, object]:
        return {f"tdcf.{key}": value for key, value in asdict(self).items()}


def _split_scores(records: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray]:
    bonafide = np.sort(np.array([r.score for r in records if r.label is Label.BONAFIDE], dtype=np.float64))
    spoof = np.sort(np.array([r.score for r in records if r.label is Label.SPOOF], dtype=np.float64))
    if bonafide.size == 0 or spoof.size == 0:
        raise MetricsError(
            f"need both classes: got {bonafide.size} bonafide and {spoof.size} spoof scores"
        )
    if not (np.isfinite(bonafide).all() and np.isfinite(spoof).all()):
        raise MetricsError("scores must be finite")
    return bonafide, spoof


def operating_points(records: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Sweep thresholds over every distinct score plus +inf.

    A trial is accepted as bonafide iff score >= threshold.

    Returns:
        tuple: (thresholds, P_miss, P_fa) in ascending threshold order
    """
    bonafide, spoof = _split_scores(records)
    thresholds = np.append(np.unique(np.concatenate([bonafide, spoof])), np.inf)
    p_miss = np.searchsorted(bonafide, thresholds, side="left") / bonafide.size
    p_fa = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    return thresholds, p_miss, p_fa


def compute_eer(records: Sequence[ScoreRecord]) -> Tuple[float, float]:
    """
    Equal error rate with linear interpolation between adjacent operating points.

    Returns:
        tuple: (eer, threshold)
    """
    thresholds, p_miss, p_fa = operating_points(records)
    diff = p_miss - p_fa
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return float(p_miss[i]), float(thresholds[i])
    # diff[0] is -1 at the lowest threshold, so i >= 1 here
    t = -diff[i - 1] / (diff[i] - diff[i - 1])
    eer = p_miss[i - 1] + t * (p_miss[i] - p_miss[i - 1])
    if np.isinf(thresholds[i]):
        threshold = thresholds[i - 1]
    else:
        threshold = thresholds[i - 1] + t * (thresholds[i] - thresholds[i - 1])
    return float(eer), float(threshold)


def compute_min_tdcf(records: Sequence[ScoreRecord], cost: TdcfCostModel = TdcfCostModel()) -> float:
    """Minimum over thresholds of (C0 + C1 P_miss + C2 P_fa) / (C0 + min(C1, C2))."""
    c0, c1, c2 = cost.coefficients()
    if c1 <= 0 or c2 <= 0:
        raise MetricsError(f"non-normalizable cost model: C1={c1!r}, C2={c2!r}")
    if c0 < 0:
        raise MetricsError(f"non-normalizable cost model: C0={c0!r}")
    _, p_miss, p_fa = operating_points(records)
    normalized = (c0 + c1 * p_miss + c2 * p_fa) / (c0 + min(c1, c2))
    return float(np.min(normalized))


def det_points(records: Sequence[ScoreRecord]) -> List[Tuple[float, float]]:
    """(P_fa, P_miss) per distinct threshold; P_fa non-increasing and P_miss non-decreasing."""
    _, p_miss, p_fa = operating_points(records)
    return [(float(fa), float(miss)) for fa, miss in zip(p_fa, p_miss)]


def join_labels(scores: Sequence[Tuple[str, float]], labels: Mapping[str, Label]) -> List[ScoreRecord]:
    records = []
    seen = set()
    for utt_id, value in scores:
        if utt_id in seen:
            raise MetricsError(f"duplicate score for utterance '{utt_id}'")
        if utt_id not in labels:
            raise MetricsError(f"no label for utterance '{utt_id}'")
        seen.add(utt_id)
        records.append(ScoreRecord(utt_id, float(value), labels[utt_id]))
    return records


def metric_report(records: Sequence[ScoreRecord], cost: TdcfCostModel, prefix: str = "") -> Dict[str, object]:
    """Flat report of counts, EER, min t-DCF and the constants they were computed with."""
    eer, threshold = compute_eer(records)
    min_tdcf = compute_min_tdcf(records, cost)
    report = {
        f"{prefix}n_bonafide": sum(1 for r in records if r.label is Label.BONAFIDE),
        f"{prefix}n_spoof": sum(1 for r in records if r.label is Label.SPOOF),
        f"{prefix}eer": eer,
        f"{prefix}eer_threshold": threshold,
        f"{prefix}min_tdcf": min_tdcf,
    }
    logger.info("%seer=%.6f min_tdcf=%.6f over %d scores", prefix, eer, min_tdcf, len(records))
    return report
