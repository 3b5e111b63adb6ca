"""Synthetic diarization mixtures and a small log-Mel front end.

Each simulated speaker is a fixed unit-norm "voice" vector. Speakers talk
independently: exponential silences with mean beta(K) alternate with uniformly
long utterances, so overlaps, turns and silences follow the usual simulated
conversation topology while the acoustic side stays linearly separable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .diar_core import (
    DEFAULT_FRAME_RATE,
    FrameMask,
    Segment,
    SegmentList,
    mask_to_segments,
    read_features,
    read_rttm,
    segments_to_mask,
    write_features,
    write_rttm,
)

log = logging.getLogger(__name__)

DEFAULT_BETA = {1: 2.0, 2: 2.0, 3: 5.0, 4: 9.0}
SAMPLE_RATE = 16000


@dataclass
class SimulationConfig:
    min_speakers: int = 1
    max_speakers: int = 4
    beta_per_count: dict = field(default_factory=lambda: dict(DEFAULT_BETA))
    min_utterance: float = 1.0
    max_utterance: float = 4.0
    recording_len: float = 20.0
    speaker_prototype_dim: int = 23
    noise_std: float = 0.1
    frame_rate: int = DEFAULT_FRAME_RATE
    max_retries: int = 100
    seed: int = 0

    def __post_init__(self):
        self.beta_per_count = {int(k): float(v) for k, v in self.beta_per_count.items()}
        if not 1 <= self.min_speakers <= self.max_speakers:
            raise ValueError("need 1 <= min_speakers <= max_speakers")
        missing = [k for k in range(self.min_speakers, self.max_speakers + 1) if k not in self.beta_per_count]
        if missing:
            raise ValueError(f"no silence mean for speaker counts {missing}")
        if any(b <= 0 for b in self.beta_per_count.values()):
            raise ValueError("silence means must be positive")
        if not 0 < self.min_utterance <= self.max_utterance:
            raise ValueError("need 0 < min_utterance <= max_utterance")
        if self.recording_len <= 0 or self.speaker_prototype_dim < 1 or self.frame_rate < 1:
            raise ValueError("recording_len, speaker_prototype_dim and frame_rate must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def n_frames(self) -> int:
        return int(round(self.recording_len * self.frame_rate))


class MixtureSample(NamedTuple):
    features: np.ndarray  # (T, D') float32
    labels: FrameMask  # (T, K)
    speaker_count: int


class SimulationError(RuntimeError):
    pass


def sample_silence(rng: np.random.Generator, beta: float, size=None):
    """Silence gaps, exponential with mean ``beta`` seconds."""
    return rng.exponential(beta, size)


def speaker_timeline(cfg: SimulationConfig, beta: float, rng: np.random.Generator) -> list[tuple[float, float]]:
    """(onset, duration) turns for one speaker, clipped to the recording."""
    turns = []
    t = 0.0
    while True:
        t += sample_silence(rng, beta)
        if t >= cfg.recording_len:
            return turns
        dur = rng.uniform(cfg.min_utterance, cfg.max_utterance)
        turns.append((t, min(dur, cfg.recording_len - t)))
        t += dur


def simulate_mixture(cfg: SimulationConfig, rng: np.random.Generator) -> MixtureSample:
    n_spk = int(rng.integers(cfg.min_speakers, cfg.max_speakers + 1))
    beta = cfg.beta_per_count[n_spk]
    protos = rng.standard_normal((n_spk, cfg.speaker_prototype_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    n_frames = cfg.n_frames
    labels = np.zeros((n_frames, n_spk), dtype=bool)
    for spk in range(n_spk):
        for _ in range(cfg.max_retries):
            turns = speaker_timeline(cfg, beta, rng)
            segs = SegmentList([Segment("sim", "s", onset, dur) for onset, dur in turns])
            column = segments_to_mask(segs, frame_rate=cfg.frame_rate, duration_frames=n_frames).data
            if column.shape[1] and column.any():
                labels[:, spk] = column[:, 0]
                break
        else:
            raise SimulationError(f"speaker {spk} produced no speech after {cfg.max_retries} attempts")

    feats = labels.astype(np.float64) @ protos
    if cfg.noise_std > 0:
        feats += cfg.noise_std * rng.standard_normal(feats.shape)
    mask = FrameMask(labels, cfg.frame_rate, [f"spk{i}" for i in range(n_spk)])
    return MixtureSample(feats.astype(np.float32), mask, n_spk)


def sample_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent per-sample seeds, identical for any split of the work."""
    return np.random.SeedSequence(seed).spawn(count)


def simulate_corpus(cfg: SimulationConfig, count: int, seed: int | None = None) -> list[MixtureSample]:
    seed = cfg.seed if seed is None else seed
    return [simulate_mixture(cfg, np.random.default_rng(s)) for s in sample_seeds(seed, count)]


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


class ManifestEntry(NamedTuple):
    recording_id: str
    feature_path: Path
    rttm_path: Path
    n_frames: int


def write_corpus(out_dir, samples: list[MixtureSample], prefix: str = "mix") -> Path:
    """Write feature files, per-recording RTTMs and ``manifest.txt``; return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    width = max(len(str(len(samples) - 1)), 6)
    for idx, sample in enumerate(samples):
        rec = f"{prefix}{idx:0{width}d}"
        feat_path = out_dir / f"{rec}.feat"
        rttm_path = out_dir / f"{rec}.rttm"
        write_features(feat_path, sample.features)
        write_rttm(rttm_path, mask_to_segments(sample.labels, rec))
        lines.append(f"{rec} {feat_path.name} {rttm_path.name} {sample.features.shape[0]}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'id features rttm T'")
        rec, feat, rttm, n_frames = fields
        entries.append(ManifestEntry(rec, path.parent / feat, path.parent / rttm, int(n_frames)))
    return entries


def load_recording(entry: ManifestEntry, frame_rate: int = DEFAULT_FRAME_RATE) -> tuple[np.ndarray, FrameMask]:
    feats = read_features(entry.feature_path)
    if feats.shape[0] != entry.n_frames:
        raise ValueError(f"{entry.recording_id}: manifest says {entry.n_frames} frames, file has {feats.shape[0]}")
    segs = read_rttm(entry.rttm_path)
    labels = segments_to_mask(segs, entry.recording_id, frame_rate, entry.n_frames)
    return feats, labels


# --------------------------------------------------------------------------
# log-Mel features
# --------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 23, n_fft: int = 512, sample_rate: int = SAMPLE_RATE, fmin=0.0, fmax=None):
    """(n_mels, n_fft // 2 + 1) triangular filters, equally spaced on the mel scale."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def logmel_extract(
    pcm: np.ndarray,
    sample_rate: int = SAMPLE_RATE,
    n_mels: int = 23,
    win_ms: float = 25.0,
    hop_ms: float = 10.0,
    n_fft: int = 512,
    preemph: float = 0.97,
    floor: float = 1e-10,
) -> np.ndarray:
    """(T, n_mels) log-Mel energies, T = round(len / hop).

    Frame t is centred on sample t * hop + hop / 2 (the middle of its 10 ms slot);
    the signal is reflect-padded so edge frames see full windows.
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} (no resampling)")
    x = np.asarray(pcm, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected mono audio")
    win = int(round(sample_rate * win_ms / 1000))
    hop = int(round(sample_rate * hop_ms / 1000))
    n_frames = int(round(len(x) / hop))
    if n_frames == 0:
        return np.zeros((0, n_mels), dtype=np.float32)
    x = np.append(x[:1], x[1:] - preemph * x[:-1])
    centers = np.arange(n_frames) * hop + hop // 2
    left = win // 2
    pad_l = left
    pad_r = max(int(centers[-1]) + (win - left) - len(x), 0)
    mode = "reflect" if len(x) > max(pad_l, pad_r) else "constant"
    padded = np.pad(x, (pad_l, pad_r), mode=mode)
    idx = centers[:, None] + np.arange(win)[None, :]
    window = np.hanning(win + 1)[:-1]
    frames = padded[idx] * window
    power = np.abs(np.fft.rfft(frames, n_fft)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, sample_rate).T
    return np.log(np.maximum(energies, floor)).astype(np.float32)
