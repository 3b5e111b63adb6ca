"""Diarization data types, frame/segment conversion, RTTM and feature-file I/O.

Shapes follow the convention used across the package:

    T: number of frames
    S: number of speakers (columns of a mask)
    D: feature dimension
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_FRAME_RATE = 100

FEATURE_MAGIC = b"EM2F"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


class DiarizationFormatError(ValueError):
    """Raised for malformed RTTM input or inconsistent mask/segment requests."""


@dataclass
class FrameMask:
    """Boolean T x S speaker activity matrix."""

    data: np.ndarray
    frame_rate: int = DEFAULT_FRAME_RATE
    speakers: list[str] | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"FrameMask data must be 2-D, got shape {data.shape}")
        if data.dtype != bool:
            if data.size and not np.isin(data, (0, 1)).all():
                raise ValueError("FrameMask entries must be 0 or 1")
            data = data.astype(bool)
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if self.speakers is not None and len(self.speakers) != data.shape[1]:
            raise ValueError("speaker name count does not match column count")
        self.data = data

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_speakers(self) -> int:
        return self.data.shape[1]


class Segment(NamedTuple):
    recording_id: str
    speaker_id: str
    onset: float
    duration: float

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class SegmentList:
    entries: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.entries = [Segment(*e) for e in self.entries]
        for seg in self.entries:
            if not math.isfinite(seg.onset) or not math.isfinite(seg.duration):
                raise ValueError(f"non-finite segment {seg}")
            if seg.duration <= 0:
                raise ValueError(f"segment duration must be positive: {seg}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, idx):
        return self.entries[idx]

    def recording_ids(self) -> list[str]:
        """Recording ids in order of first appearance."""
        return list(dict.fromkeys(s.recording_id for s in self.entries))

    def for_recording(self, recording_id: str) -> "SegmentList":
        return SegmentList([s for s in self.entries if s.recording_id == recording_id])


@dataclass(frozen=True)
class CollarSpec:
    half_width: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.half_width) or self.half_width < 0:
            raise ValueError("collar half_width must be finite and >= 0")


# --------------------------------------------------------------------------
# RTTM
# --------------------------------------------------------------------------


def rttm_parse(text: str) -> SegmentList:
    """Parse RTTM text. Only ``SPEAKER`` lines are read; everything else is skipped."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise DiarizationFormatError(f"line {lineno}: expected at least 8 fields, got {len(fields)}")
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError:
            raise DiarizationFormatError(f"line {lineno}: malformed onset/duration") from None
        if not (math.isfinite(onset) and math.isfinite(duration)):
            raise DiarizationFormatError(f"line {lineno}: non-finite onset/duration")
        if duration < 0:
            raise DiarizationFormatError(f"line {lineno}: negative duration {duration}")
        if duration == 0:
            # zero-length turns carry no frames; md-eval drops them too
            continue
        entries.append(Segment(fields[1], fields[7], onset, duration))
    return SegmentList(entries)


def read_rttm(path) -> SegmentList:
    return rttm_parse(Path(path).read_text())


def rttm_format(segs: Iterable[Segment]) -> str:
    lines = [
        f"SPEAKER {s.recording_id} 1 {s.onset:.3f} {s.duration:.3f} <NA> <NA> {s.speaker_id} <NA> <NA>"
        for s in segs
    ]
    return "".join(line + "\n" for line in lines)


def write_rttm(path, segs: Iterable[Segment]) -> None:
    Path(path).write_text(rttm_format(segs))


# --------------------------------------------------------------------------
# frame <-> segment conversion
# --------------------------------------------------------------------------


def _frame_span(onset: float, end: float, frame_rate: int) -> tuple[int, int]:
    """Half-open frame range whose midpoints (t + 0.5) / rate fall in [onset, end)."""
    first = max(math.ceil(onset * frame_rate - 0.5), 0)
    stop = max(math.ceil(end * frame_rate - 0.5), 0)
    return first, stop


def segments_to_mask(
    segs: SegmentList,
    recording_id: str | None = None,
    frame_rate: int = DEFAULT_FRAME_RATE,
    duration_frames: int | None = None,
) -> FrameMask:
    """Rasterize segments of one recording into a FrameMask.

    Columns follow first appearance of each speaker id. If ``recording_id`` is
    None every entry is used.
    """
    if frame_rate <= 0:
        raise ValueError("frame_rate must be positive")
    if recording_id is not None:
        segs = segs.for_recording(recording_id)
    speakers = list(dict.fromkeys(s.speaker_id for s in segs))
    col = {spk: i for i, spk in enumerate(speakers)}

    spans = [(col[s.speaker_id], *_frame_span(s.onset, s.end, frame_rate)) for s in segs]
    last_stop = max((stop for _, _, stop in spans), default=0)
    if duration_frames is None:
        n_frames = last_stop
    else:
        if duration_frames < last_stop:
            raise DiarizationFormatError(
                f"duration_frames={duration_frames} would truncate segments ending at frame {last_stop}"
            )
        n_frames = duration_frames

    data = np.zeros((n_frames, len(speakers)), dtype=bool)
    for j, first, stop in spans:
        data[first:stop, j] = True
    return FrameMask(data, frame_rate, speakers)


def _runs(column: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as half-open (start, stop) pairs."""
    padded = np.concatenate(([False], column.astype(bool), [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def mask_to_segments(
    mask: FrameMask, recording_id: str, speaker_names: Sequence[str] | None = None
) -> SegmentList:
    if speaker_names is None:
        speaker_names = mask.speakers
    if speaker_names is None:
        speaker_names = [f"spk{j}" for j in range(mask.num_speakers)]
    if len(speaker_names) != mask.num_speakers:
        raise ValueError("speaker name count does not match column count")
    rate = mask.frame_rate
    entries = []
    for j, name in enumerate(speaker_names):
        for start, stop in _runs(mask.data[:, j]):
            entries.append(Segment(recording_id, name, start / rate, (stop - start) / rate))
    entries.sort(key=lambda s: (s.onset, s.speaker_id))
    return SegmentList(entries)


# --------------------------------------------------------------------------
# collar
# --------------------------------------------------------------------------


def collar_frames(ref: FrameMask, collar: CollarSpec) -> np.ndarray:
    """Boolean length-T vector marking frames that fall in a no-score window.

    Windows are [t - w, t + w) around the first and last active frame of every
    maximal run in every reference column, w = round(half_width * frame_rate).
    """
    n_frames = ref.num_frames
    excluded = np.zeros(n_frames, dtype=bool)
    w = int(round(collar.half_width * ref.frame_rate))
    if w == 0:
        return excluded
    for j in range(ref.num_speakers):
        for start, stop in _runs(ref.data[:, j]):
            for t in (start, stop - 1):
                excluded[max(t - w, 0) : max(min(t + w, n_frames), 0)] = True
    return excluded


def apply_collar(
    ref: FrameMask, sys: FrameMask, collar: CollarSpec, drop_frames: bool = False
) -> tuple[FrameMask, FrameMask]:
    """Zero (or drop) reference-boundary windows in both masks."""
    if ref.frame_rate != sys.frame_rate:
        raise DiarizationFormatError(f"frame rate mismatch: ref {ref.frame_rate} vs sys {sys.frame_rate}")
    if ref.num_frames != sys.num_frames:
        raise DiarizationFormatError(f"frame count mismatch: ref {ref.num_frames} vs sys {sys.num_frames}")
    excluded = collar_frames(ref, collar)
    if drop_frames:
        keep = ~excluded
        return (
            FrameMask(ref.data[keep], ref.frame_rate, ref.speakers),
            FrameMask(sys.data[keep], sys.frame_rate, sys.speakers),
        )
    ref_data = ref.data.copy()
    sys_data = sys.data.copy()
    ref_data[excluded] = False
    sys_data[excluded] = False
    return FrameMask(ref_data, ref.frame_rate, ref.speakers), FrameMask(sys_data, sys.frame_rate, sys.speakers)


# --------------------------------------------------------------------------
# feature files
# --------------------------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    """Write a T x D float matrix as an EM2F feature file (little-endian float32)."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D array")
    n_frames, dim = features.shape
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n_frames, dim))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DiarizationFormatError(f"{path}: truncated feature header")
    magic, version, n_frames, dim = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DiarizationFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DiarizationFormatError(f"{path}: unsupported feature version {version}")
    body = raw[_FEATURE_HEADER.size :]
    if len(body) != 4 * n_frames * dim:
        raise DiarizationFormatError(f"{path}: expected {n_frames}x{dim} floats, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(n_frames, dim).astype(np.float32)
