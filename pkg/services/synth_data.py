"""
Synthetic Data Module - Deterministic stand-in corpus
Harmonic bonafide carriers, artifact-bearing spoofs, length normalisation,
light augmentation and seed recipes that rebuild every utterance from the manifest
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from errors import DataError, StorageError
from services.labels import Label, Split
from services.numerics import RngState, derive_seed
from storage import ManifestRecord, read_manifest, read_waveform, write_manifest, write_waveform

logger = logging.getLogger(__name__)

PEAK = 0.9
NOISE_LEVEL = 0.01
RECIPE_PREFIX = "synth"


class ArtifactType(str, Enum):
    PHASE_JUMP = "phase_jump"
    SPECTRAL_NOTCH = "spectral_notch"
    QUANTIZE_8BIT = "quantize_8bit"
    FRAME_REPEAT = "frame_repeat"

    @classmethod
    def parse(cls, value: Union[str, "ArtifactType"]) -> "ArtifactType":
        try:
            return cls(value)
        except ValueError:
            raise DataError(f"unknown artifact type '{value}'") from None


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _normalize(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x))
    if peak == 0:
        return x.astype(np.float32)
    return (x * (PEAK / peak)).astype(np.float32)


def _num_samples(duration_s: float, sample_rate: int) -> int:
    if duration_s <= 0:
        raise DataError(f"duration must be positive, got {duration_s}")
    return max(1, round(duration_s * sample_rate))


def _carrier(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(90.0, 220.0)
    num_harmonics = int(rng.integers(3, 6))
    vibrato_rate = rng.uniform(3.0, 6.0)
    vibrato_depth = rng.uniform(0.01, 0.03)
    am_rate = rng.uniform(1.0, 4.0)
    am_depth = rng.uniform(0.2, 0.5)

    freq = f0 * (1.0 + vibrato_depth * np.sin(2 * np.pi * vibrato_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(freq) / sample_rate
    x = np.zeros(n)
    for h in range(1, num_harmonics + 1):
        x += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
    x *= 1.0 + am_depth * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    x += NOISE_LEVEL * rng.standard_normal(n)
    return x


def gen_bonafide(seed: int, duration_s: float, sample_rate: int) -> Waveform:
    """
    Harmonic carrier with vibrato, amplitude modulation and low-level noise.

    Args:
        seed: Utterance seed
        duration_s: Duration in seconds
        sample_rate: Samples per second

    Returns:
        Waveform: float32 samples peak-normalised to 0.9
    """
    n = _num_samples(duration_s, sample_rate)
    return Waveform(_normalize(_carrier(RngState(seed).numpy(), n, sample_rate)), sample_rate)


def _phase_jump(x: np.ndarray, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    n = len(x)
    start = int(rng.integers(int(0.1 * n), max(int(0.1 * n) + 1, int(0.6 * n))))
    length = int(rng.integers(max(1, int(0.05 * n)), max(2, int(0.3 * n))))
    y = x.copy()
    y[start:start + length] *= -1.0
    return y


def _spectral_notch(x: np.ndarray, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    high = min(1500.0, 0.45 * sample_rate)
    centre = rng.uniform(min(400.0, 0.5 * high), high)
    width = rng.uniform(60.0, 150.0)
    spectrum = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), d=1.0 / sample_rate)
    spectrum[np.abs(freqs - centre) < width / 2] = 0.0
    return np.fft.irfft(spectrum, n=len(x))


def _quantize_8bit(x: np.ndarray, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    return np.round(x * 127.0) / 127.0


def _frame_repeat(x: np.ndarray, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    n = len(x)
    frame = max(1, int(rng.uniform(0.020, 0.040) * sample_rate))
    repeats = int(rng.integers(2, 5))
    span = frame * repeats
    y = x.copy()
    if span >= n:
        return y
    start = int(rng.integers(0, n - span + 1))
    chunk = x[start:start + frame].copy()
    for i in range(1, repeats):
        y[start + i * frame:start + (i + 1) * frame] = chunk
    return y


ARTIFACTS = {
    ArtifactType.PHASE_JUMP: _phase_jump,
    ArtifactType.SPECTRAL_NOTCH: _spectral_notch,
    ArtifactType.QUANTIZE_8BIT: _quantize_8bit,
    ArtifactType.FRAME_REPEAT: _frame_repeat,
}


def gen_spoof(seed: int, duration_s: float, sample_rate: int, artifact: Union[str, ArtifactType]) -> Waveform:
    """Bonafide-style carrier with one injected artifact; artifact parameters come from the seed."""
    artifact = ArtifactType.parse(artifact)
    carrier = gen_bonafide(seed, duration_s, sample_rate).samples.astype(np.float64)
    rng = RngState(seed).child("artifact", artifact.value).numpy()
    return Waveform(_normalize(ARTIFACTS[artifact](carrier, rng, sample_rate)), sample_rate)


def crop_or_pad(w: Waveform, target_len: int, seed: int = 0) -> Waveform:
    """
    Fix a waveform to target_len samples.

    Longer inputs are cropped at an offset drawn from the seed; shorter ones are tiled.
    """
    n = len(w.samples)
    if n == 0:
        raise DataError("crop_or_pad: empty waveform")
    if target_len < 1:
        raise DataError(f"crop_or_pad: target length must be positive, got {target_len}")
    if n == target_len:
        return Waveform(w.samples.copy(), w.sample_rate)
    if n > target_len:
        offset = int(RngState(seed).numpy().integers(0, n - target_len + 1))
        return Waveform(w.samples[offset:offset + target_len].copy(), w.sample_rate)
    reps = math.ceil(target_len / n)
    return Waveform(np.tile(w.samples, reps)[:target_len].copy(), w.sample_rate)


def augment(w: Waveform, rng: np.random.Generator, strength: float) -> Waveform:
    """
    Add a short random convolutive filter and coloured noise, both scaled by strength.

    Args:
        w: Input waveform
        rng: Source of the filter taps and the noise
        strength: In [0, 1]; 0 returns the input unchanged

    Returns:
        Waveform: augmented copy
    """
    if not 0.0 <= strength <= 1.0:
        raise DataError(f"augment: strength {strength} outside [0, 1]")
    x = w.samples.astype(np.float64)
    if strength == 0 or len(x) == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n = len(x)
    taps = rng.normal(0.0, 0.3, size=5)
    filtered = np.convolve(x, taps)[:n]
    white = rng.standard_normal(n + 2)
    coloured = np.convolve(white, [1.0, 0.5, 0.25], mode="valid")
    coloured /= np.std(coloured) or 1.0
    rms = np.sqrt(np.mean(x ** 2))
    y = x + strength * filtered + strength * 0.3 * rms * coloured
    return Waveform(y.astype(np.float32), w.sample_rate)


# Recipes

def make_recipe(
    label: Label, seed: int, duration_s: float, sample_rate: int, artifact: Optional[ArtifactType] = None
) -> str:
    if label is Label.SPOOF:
        return f"{RECIPE_PREFIX}:spoof:{artifact.value}:seed={seed}:dur={duration_s!r}:sr={sample_rate}"
    return f"{RECIPE_PREFIX}:bonafide:seed={seed}:dur={duration_s!r}:sr={sample_rate}"


def parse_recipe(recipe: str) -> Tuple[Label, Optional[ArtifactType], int, float, int]:
    """Split a seed recipe into (label, artifact, seed, duration, sample rate)."""
    parts = recipe.split(":")
    try:
        if parts[0] != RECIPE_PREFIX:
            raise ValueError
        label = Label(parts[1])
        artifact = None
        rest = parts[2:]
        if label is Label.SPOOF:
            artifact = ArtifactType.parse(parts[2])
            rest = parts[3:]
        values = dict(item.split("=", 1) for item in rest)
        return label, artifact, int(values["seed"]), float(values["dur"]), int(values["sr"])
    except (ValueError, IndexError, KeyError):
        raise DataError(f"malformed recipe '{recipe}'") from None


def is_recipe(source: str) -> bool:
    return source.startswith(RECIPE_PREFIX + ":")


def render_recipe(recipe: str) -> Waveform:
    label, artifact, seed, duration, sample_rate = parse_recipe(recipe)
    if label is Label.SPOOF:
        return gen_spoof(seed, duration, sample_rate, artifact)
    return gen_bonafide(seed, duration, sample_rate)


# Corpus

@dataclass(frozen=True)
class CorpusConfig:
    sample_rate: int = 4000
    min_duration: float = 0.4
    max_duration: float = 0.6
    target_duration: float = 0.5
    pretrain: int = 2000
    train: int = 1600
    dev: int = 400
    eval: int = 500
    artifacts: Tuple[str, ...] = tuple(a.value for a in ArtifactType)
    manifest: str = "corpus/manifest.tsv"
    write_audio: bool = True

    def __post_init__(self):
        object.__setattr__(self, "artifacts", tuple(self.artifacts))
        if self.sample_rate < 1:
            raise DataError("sample_rate must be positive")
        if not 0 < self.min_duration <= self.max_duration:
            raise DataError("durations must satisfy 0 < min_duration <= max_duration")
        if self.target_duration <= 0:
            raise DataError("target_duration must be positive")
        for split in Split:
            if getattr(self, split.value) < 0:
                raise DataError(f"corpus.{split.value} must not be negative")
        if not self.artifacts:
            raise DataError("at least one artifact type is required")
        for artifact in self.artifacts:
            ArtifactType.parse(artifact)

    @property
    def target_len(self) -> int:
        return _num_samples(self.target_duration, self.sample_rate)

    def count(self, split: Split) -> int:
        return getattr(self, split.value)


@dataclass
class Utterance:
    id: str
    waveform: Waveform
    label: Label
    split: Split
    artifact: Optional[ArtifactType] = None
    source: str = ""


@dataclass
class Corpus:
    utterances: List[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def split(self, split: Union[str, Split]) -> List[Utterance]:
        split = Split.parse(split) if isinstance(split, str) else split
        return [u for u in self.utterances if u.split is split]

    def labels(self) -> Dict[str, Label]:
        return {u.id: u.label for u in self.utterances}

    def records(self) -> List[ManifestRecord]:
        return [ManifestRecord(u.id, u.source, u.label, u.split) for u in self.utterances]


def _plan_utterance(seed: int, utt_id: str, split: Split, index: int, cfg: CorpusConfig) -> Tuple[str, Label]:
    utt_seed = derive_seed(seed, utt_id)
    rng = RngState(utt_seed).child("plan").numpy()
    duration = round(float(rng.uniform(cfg.min_duration, cfg.max_duration)), 3)
    if split is Split.PRETRAIN or index % 2 == 1:
        artifact = ArtifactType.parse(cfg.artifacts[int(rng.integers(len(cfg.artifacts)))])
        return make_recipe(Label.SPOOF, utt_seed, duration, cfg.sample_rate, artifact), Label.SPOOF
    return make_recipe(Label.BONAFIDE, utt_seed, duration, cfg.sample_rate), Label.BONAFIDE


def build_corpus(cfg: CorpusConfig, seed: int, out_dir: Optional[Union[str, Path]] = None) -> Corpus:
    """
    Generate every split of the corpus.

    The pretrain split is all spoof; the other splits alternate bonafide and spoof.
    Each utterance draws its own stream from (seed, id). With out_dir the manifest
    and the rendered waveforms are written below it.
    """
    corpus = Corpus()
    total = sum(cfg.count(split) for split in Split)
    with tqdm(total=total, desc="gen-corpus", unit="utt", disable=None if logger.isEnabledFor(logging.INFO) else True) as progress:
        for split in Split:
            for index in range(cfg.count(split)):
                utt_id = f"{split.value}_{index + 1:05d}"
                recipe, label = _plan_utterance(seed, utt_id, split, index, cfg)
                _, artifact, _, _, _ = parse_recipe(recipe)
                corpus.utterances.append(Utterance(utt_id, render_recipe(recipe), label, split, artifact, recipe))
                progress.update(1)

    if out_dir is not None:
        out_dir = Path(out_dir)
        manifest_path = out_dir / cfg.manifest
        write_manifest(manifest_path, corpus.records())
        if cfg.write_audio:
            for utt in corpus:
                write_waveform(manifest_path.parent / "wav" / f"{utt.id}.f32", utt.waveform.samples, utt.waveform.sample_rate)
    counts = {split.value: cfg.count(split) for split in Split}
    logger.info("generated corpus of %d utterances %s", len(corpus), counts)
    return corpus


def load_corpus(manifest_path: Union[str, Path]) -> Corpus:
    """Rebuild a corpus from its manifest; sources are seed recipes or paths relative to the manifest."""
    manifest_path = Path(manifest_path)
    corpus = Corpus()
    for record in read_manifest(manifest_path):
        artifact = None
        if is_recipe(record.source):
            waveform = render_recipe(record.source)
            artifact = parse_recipe(record.source)[1]
        else:
            try:
                samples, sample_rate = read_waveform(manifest_path.parent / record.source)
            except StorageError as e:
                raise DataError(f"utterance '{record.id}': {e}") from None
            waveform = Waveform(samples, sample_rate)
        corpus.utterances.append(Utterance(record.id, waveform, record.label, record.split, artifact, record.source))
    logger.info("loaded %d utterances from %s", len(corpus), manifest_path)
    return corpus
