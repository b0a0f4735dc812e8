"""Loading, resampling, level normalization, filtering, segmentation and framing
of raw cough recordings."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps


class WavError(Exception):
    """Base class for WAV decoding failures."""


class WavNotFoundError(WavError, FileNotFoundError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedWavError(WavError):
    pass


class SignalError(ValueError):
    """Raised for inputs a DSP operation cannot handle (empty, silent, bad rate)."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SignalError("samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise SignalError("samples must be finite")
        if int(self.sample_rate) <= 0:
            raise SignalError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class CoughSegment:
    samples: np.ndarray
    start_offset: int
    sample_rate: int

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FrameMatrix:
    frames: np.ndarray
    frame_length: int
    windowed: bool = True

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate: int = 16000
    target_dbfs: float = -28.0
    hpf_cutoff: float = 100.0
    silence_threshold: float = -40.0
    min_silence: float = 200.0
    min_segment: float = 100.0
    frame_length: int = 1024

    def __post_init__(self):
        if self.target_rate <= 2 * self.hpf_cutoff:
            raise ValueError("target_rate must exceed twice hpf_cutoff")
        if self.frame_length < 64:
            raise ValueError("frame_length must be at least 64 samples")

    @classmethod
    def from_dict(cls, data: dict) -> "PreprocessConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown preprocess config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PreprocessConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def _decode_pcm(raw: bytes, bits: int) -> np.ndarray:
    if bits == 8:
        # 8-bit WAV is unsigned with a 128 offset
        return (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if bits == 16:
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        return v.astype(np.float64) / float(1 << 23)
    if bits == 32:
        return np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    raise UnsupportedWavError(f"unsupported PCM bit depth {bits}")


def load_wav(path) -> AudioSignal:
    """Read a RIFF/WAVE file into a mono AudioSignal scaled to [-1, 1].

    Integer PCM (8/16/24/32-bit) and 32-bit IEEE float are accepted; multichannel
    audio is averaged to mono.
    """
    path = Path(path)
    if not path.is_file():
        raise WavNotFoundError(f"no such file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: missing RIFF/WAVE header")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedWavError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                (sub_format,) = struct.unpack("<H", body[24:26])
                fmt = (sub_format,) + fmt[1:]
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1 or bits < 1:
        raise MalformedWavError(f"{path}: invalid fmt fields")
    if block_align != channels * (bits // 8):
        raise MalformedWavError(f"{path}: inconsistent block alignment")

    usable = len(payload) - len(payload) % block_align
    payload = payload[:usable]
    if tag == _PCM:
        samples = _decode_pcm(payload, bits)
    elif tag == _IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise MalformedWavError(f"{path}: non-finite float samples")
    else:
        raise UnsupportedWavError(f"{path}: format tag {tag} with {bits} bits not supported")

    samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioSignal(np.clip(samples, -1.0, 1.0), rate)


def write_wav(path, signal: AudioSignal) -> None:
    """Write 16-bit PCM mono."""
    import wave

    pcm = np.clip(np.round(signal.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

def resample(signal: AudioSignal, target_rate: int) -> AudioSignal:
    if target_rate <= 0:
        raise SignalError(f"target_rate must be positive, got {target_rate}")
    if len(signal) == 0:
        raise SignalError("cannot resample an empty signal")
    if target_rate == signal.sample_rate:
        return signal
    ratio = Fraction(int(target_rate), signal.sample_rate)
    out = sps.resample_poly(signal.samples, ratio.numerator, ratio.denominator)
    return AudioSignal(out, target_rate)


def rms_dbfs(samples: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(np.square(samples))))
    if rms == 0.0:
        return -np.inf
    return 20.0 * np.log10(rms)


def normalize_dbfs(signal: AudioSignal, target_dbfs: float) -> AudioSignal:
    """Apply the pure gain that brings the RMS level to ``target_dbfs``."""
    level = rms_dbfs(signal.samples)
    if not np.isfinite(level):
        raise SignalError("cannot normalize a silent signal")
    gain = 10.0 ** ((target_dbfs - level) / 20.0)
    return AudioSignal(signal.samples * gain, signal.sample_rate)


def highpass(signal: AudioSignal, cutoff: float) -> AudioSignal:
    """Second-order Butterworth high-pass, applied causally."""
    if not 0 < cutoff < signal.sample_rate / 2:
        raise SignalError(f"cutoff {cutoff} Hz outside (0, {signal.sample_rate / 2})")
    sos = sps.butter(2, cutoff, btype="highpass", fs=signal.sample_rate, output="sos")
    return AudioSignal(sps.sosfilt(sos, signal.samples), signal.sample_rate)


def preprocess(signal: AudioSignal, cfg: PreprocessConfig) -> AudioSignal:
    """Resample, level-normalize, then high-pass."""
    out = resample(signal, cfg.target_rate)
    out = normalize_dbfs(out, cfg.target_dbfs)
    return highpass(out, cfg.hpf_cutoff)


# ---------------------------------------------------------------------------
# Segmentation and framing
# ---------------------------------------------------------------------------

_LEVEL_WINDOW_MS = 10.0


def segment_coughs(signal: AudioSignal, cfg: PreprocessConfig) -> list[CoughSegment]:
    """Split a conditioned signal into cough segments at silences.

    The level is measured over consecutive 10 ms RMS windows. Active runs that
    are separated by less than ``cfg.min_silence`` are merged; runs shorter than
    ``cfg.min_segment`` are dropped.
    """
    sr = signal.sample_rate
    win = max(1, int(round(sr * _LEVEL_WINDOW_MS / 1000.0)))
    n_win = len(signal) // win
    if n_win == 0:
        return []
    blocks = signal.samples[: n_win * win].reshape(n_win, win)
    rms = np.sqrt(np.mean(blocks**2, axis=1))
    with np.errstate(divide="ignore"):
        level = 20.0 * np.log10(rms)
    active = level > cfg.silence_threshold

    runs = []
    start = None
    for i, on in enumerate(active):
        if on and start is None:
            start = i
        elif not on and start is not None:
            runs.append([start, i])
            start = None
    if start is not None:
        runs.append([start, n_win])

    gap_windows = cfg.min_silence / _LEVEL_WINDOW_MS
    merged = []
    for run in runs:
        if merged and run[0] - merged[-1][1] < gap_windows:
            merged[-1][1] = run[1]
        else:
            merged.append(run)

    min_len = int(round(cfg.min_segment * sr / 1000.0))
    segments = []
    for a, b in merged:
        lo, hi = a * win, min(b * win, len(signal))
        if hi - lo >= min_len:
            segments.append(CoughSegment(signal.samples[lo:hi].copy(), lo, sr))
    return segments


def frame(segment: CoughSegment, frame_length: int) -> FrameMatrix:
    """Cut a segment into non-overlapping Hamming-windowed frames.

    The trailing partial frame is dropped.
    """
    n = len(segment) // frame_length
    if n == 0:
        raise SignalError(
            f"segment of {len(segment)} samples is shorter than one frame ({frame_length})"
        )
    raw = np.asarray(segment.samples[: n * frame_length], dtype=np.float64)
    window = np.hamming(frame_length)
    return FrameMatrix(raw.reshape(n, frame_length) * window, frame_length, True)
