"""Per-frame hand-crafted cough features and their per-segment aggregation.

Twenty-two values are computed for every windowed frame (12 MFCCs, 4 formants,
zero-crossing rate, kurtosis, log energy, skewness, entropy and F0). Frames are
then grouped into chunks and summarized by mean and standard deviation, giving
a 44-dimensional vector per chunk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .signal_prep import CoughSegment, PreprocessConfig, frame

EPS = 1e-10
N_MFCC = 12
LPC_ORDER = 14
N_FORMANTS = 4
F0_MIN = 50.0
F0_MAX = 500.0
CLIP_RATIO = 0.3
VOICING_THRESHOLD = 0.3
FORMANT_GRID = 512

FEATURE_NAMES = (
    [f"mfcc_{i}" for i in range(1, N_MFCC + 1)]
    + [f"formant_{i}" for i in range(1, N_FORMANTS + 1)]
    + ["zcr", "kurtosis", "log_energy", "skewness", "entropy", "f0"]
)
AGGREGATE_NAMES = [f"{n}_mean" for n in FEATURE_NAMES] + [f"{n}_std" for n in FEATURE_NAMES]


class FeatureError(ValueError):
    """A frame is degenerate for the requested feature (e.g. zero variance)."""


# ---------------------------------------------------------------------------
# Spectral features
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterBank:
    """Triangular filters equally spaced on the HTK mel scale.

    Filters are evaluated at the exact bin frequencies ``k * sample_rate / N``.
    """

    weights: np.ndarray
    sample_rate: int
    frame_length: int
    low_hz: float
    high_hz: float

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def create(cls, sample_rate=16000, frame_length=1024, num_filters=26,
               low_hz=0.0, high_hz=None) -> "MelFilterBank":
        high_hz = sample_rate / 2 if high_hz is None else high_hz
        if not 0 <= low_hz < high_hz <= sample_rate / 2:
            raise ValueError("mel filter bank bounds must satisfy 0 <= low < high <= sr/2")
        edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_filters + 2))
        freqs = np.arange(frame_length // 2 + 1) * sample_rate / frame_length
        lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        weights = np.clip(np.minimum(rising, falling), 0.0, None)
        weights.setflags(write=False)
        if np.any(weights.sum(axis=1) <= 0):
            raise ValueError("frame too short: some mel filters cover no DFT bin")
        return cls(weights, sample_rate, frame_length, float(low_hz), float(high_hz))


@lru_cache(maxsize=8)
def default_filter_bank(sample_rate: int = 16000, frame_length: int = 1024) -> MelFilterBank:
    return MelFilterBank.create(sample_rate, frame_length)


def dft_magnitude(frame: np.ndarray) -> np.ndarray:
    """Magnitude of the DFT of an already-windowed frame, bins 0..N/2."""
    return np.abs(np.fft.rfft(np.asarray(frame, dtype=np.float64)))


def filter_bank_energies(spectrum: np.ndarray, bank: MelFilterBank) -> np.ndarray:
    if spectrum.shape[-1] != bank.weights.shape[1]:
        raise ValueError(
            f"spectrum has {spectrum.shape[-1]} bins, filter bank expects {bank.weights.shape[1]}"
        )
    return bank.weights @ np.square(spectrum)


def mfcc(spectrum: np.ndarray, bank: MelFilterBank, order: int = N_MFCC) -> np.ndarray:
    """Cepstral coefficients c(1)..c(order) from a magnitude spectrum."""
    energies = filter_bank_energies(spectrum, bank)
    log_e = np.log(np.maximum(energies, EPS))
    m = bank.num_filters
    i = np.arange(1, order + 1)[:, None]
    basis = np.cos(np.pi * i / m * (np.arange(1, m + 1)[None, :] - 0.5))
    return np.sqrt(2.0 / m) * basis @ log_e


# ---------------------------------------------------------------------------
# Time-domain statistics
# ---------------------------------------------------------------------------

def log_energy(frame: np.ndarray) -> float:
    return float(10.0 * np.log10(EPS + np.mean(np.square(frame))))


def zcr(frame: np.ndarray) -> float:
    y = np.asarray(frame, dtype=np.float64)
    if len(y) < 2:
        raise FeatureError("zero-crossing rate needs at least two samples")
    return float(np.mean(y[1:] * y[:-1] < 0))


def _central_moment_ratio(frame: np.ndarray, power: int) -> float:
    y = np.asarray(frame, dtype=np.float64)
    mu = y.mean()
    sigma = y.std()
    if sigma <= 1e-12 * max(abs(mu), np.finfo(float).tiny):
        raise FeatureError("frame has zero variance")
    return float(np.mean((y - mu) ** power) / sigma**power)


def skewness(frame: np.ndarray) -> float:
    return _central_moment_ratio(frame, 3)


def kurtosis(frame: np.ndarray) -> float:
    """Population kurtosis (no excess subtraction)."""
    return _central_moment_ratio(frame, 4)


def entropy(frame: np.ndarray) -> float:
    """-sum y^2 ln y^2 over samples 1..N-1 of unnormalized squared amplitudes."""
    p = np.square(np.asarray(frame, dtype=np.float64)[1:])
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


# ---------------------------------------------------------------------------
# LPC formants
# ---------------------------------------------------------------------------

def autocorrelation(y: np.ndarray, max_lag: int) -> np.ndarray:
    n = len(y)
    full = np.correlate(y, y, mode="full")[n - 1:]
    out = np.zeros(max_lag + 1)
    k = min(max_lag + 1, n)
    out[:k] = full[:k]
    return out


def levinson_durbin(r: np.ndarray, order: int) -> tuple[np.ndarray, float]:
    """Solve the normal equations for the prediction polynomial.

    Returns ``(a, err)`` with ``a[0] == 1`` such that the all-pole model is
    ``1 / A(z)``, ``A(z) = sum_k a[k] z^-k``.
    """
    if r[0] <= 0:
        raise FeatureError("autocorrelation r[0] must be positive")
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = float(r[0])
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1:0:-1])
        k = -acc / err
        a[1:i] = a[1:i] + k * a[i - 1:0:-1]
        a[i] = k
        err *= 1.0 - k * k
        if err <= 0:
            # perfectly predictable signal; higher orders add nothing
            break
    return a, err


def lpc_spectrum(a: np.ndarray, n_points: int = FORMANT_GRID) -> np.ndarray:
    """|1 / A(e^jw)| on ``n_points`` frequencies spanning [0, pi]."""
    w = np.linspace(0.0, np.pi, n_points)
    k = np.arange(len(a))
    response = np.exp(-1j * np.outer(w, k)) @ a
    return 1.0 / np.maximum(np.abs(response), 1e-300)


def formants(frame: np.ndarray, sample_rate: int, lpc_order: int = LPC_ORDER) -> np.ndarray:
    """First four peaks (ascending, Hz) of the LPC envelope; zero-padded."""
    y = np.asarray(frame, dtype=np.float64)
    r = autocorrelation(y, lpc_order)
    if r[0] <= 0:
        raise FeatureError("zero-energy frame")
    a, _ = levinson_durbin(r, lpc_order)
    h = lpc_spectrum(a)
    peaks = np.flatnonzero((h[1:-1] > h[:-2]) & (h[1:-1] >= h[2:])) + 1
    freqs = peaks * (sample_rate / 2) / (FORMANT_GRID - 1)
    out = np.zeros(N_FORMANTS)
    out[: min(N_FORMANTS, len(freqs))] = freqs[:N_FORMANTS]
    return out


# ---------------------------------------------------------------------------
# Fundamental frequency
# ---------------------------------------------------------------------------

def center_clip(y: np.ndarray, ratio: float = CLIP_RATIO) -> np.ndarray:
    c = ratio * np.max(np.abs(y))
    return np.where(y > c, y - c, np.where(y < -c, y + c, 0.0))


def f0(frame: np.ndarray, sample_rate: int) -> float:
    """Center-clipped autocorrelation pitch estimate; 0.0 when unvoiced."""
    y = np.asarray(frame, dtype=np.float64)
    lag_lo = int(np.ceil(sample_rate / F0_MAX))
    lag_hi = min(int(np.floor(sample_rate / F0_MIN)), len(y) - 2)
    if lag_hi <= lag_lo:
        return 0.0
    clipped = center_clip(y)
    r = autocorrelation(clipped, lag_hi + 1)
    if r[0] <= 0:
        return 0.0
    r = r / r[0]
    lag = lag_lo + int(np.argmax(r[lag_lo:lag_hi + 1]))
    if r[lag] < VOICING_THRESHOLD:
        return 0.0
    # parabolic refinement of the peak position
    left, mid, right = r[lag - 1], r[lag], r[lag + 1]
    denom = left - 2 * mid + right
    shift = 0.5 * (left - right) / denom if denom < 0 else 0.0
    est = sample_rate / (lag + float(np.clip(shift, -0.5, 0.5)))
    return float(np.clip(est, F0_MIN, F0_MAX))


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameFeatures:
    mfcc: np.ndarray
    formants: np.ndarray
    zcr: float
    kurtosis: float
    log_energy: float
    skewness: float
    entropy: float
    f0: float

    def to_array(self) -> np.ndarray:
        return np.concatenate([
            self.mfcc,
            self.formants,
            [self.zcr, self.kurtosis, self.log_energy, self.skewness, self.entropy, self.f0],
        ])


def frame_features(frame: np.ndarray, bank: MelFilterBank, sample_rate: int) -> FrameFeatures:
    frame = np.asarray(frame, dtype=np.float64)
    return FrameFeatures(
        mfcc=mfcc(dft_magnitude(frame), bank),
        formants=formants(frame, sample_rate),
        zcr=zcr(frame),
        kurtosis=kurtosis(frame),
        log_energy=log_energy(frame),
        skewness=skewness(frame),
        entropy=entropy(frame),
        f0=f0(frame, sample_rate),
    )


@dataclass(frozen=True)
class SegmentFeatureVector:
    values: np.ndarray
    feature_names: tuple = tuple(AGGREGATE_NAMES)


def aggregate(features: list, chunk_size: int | None = None) -> list[SegmentFeatureVector]:
    """Mean and population std of each feature over consecutive chunks.

    ``chunk_size=None`` treats all frames as one chunk. A trailing chunk shorter
    than ``chunk_size`` is kept.
    """
    if len(features) == 0:
        raise FeatureError("no frame features to aggregate")
    mat = np.stack([f.to_array() if isinstance(f, FrameFeatures) else np.asarray(f)
                    for f in features])
    size = len(mat) if chunk_size is None else int(chunk_size)
    if size < 1:
        raise ValueError("chunk_size must be >= 1")
    out = []
    for start in range(0, len(mat), size):
        chunk = mat[start:start + size]
        out.append(SegmentFeatureVector(np.concatenate([chunk.mean(axis=0), chunk.std(axis=0)])))
    return out


def segment_features(segment: CoughSegment, cfg: PreprocessConfig,
                     chunk_size: int | None = None) -> list[SegmentFeatureVector]:
    """Frame a segment and aggregate its frame features.

    Degenerate (zero-variance) frames are skipped; a segment with no usable
    frame yields an empty list.
    """
    if len(segment) < cfg.frame_length:
        return []
    frames = frame(segment, cfg.frame_length).frames
    bank = default_filter_bank(segment.sample_rate, cfg.frame_length)
    feats = []
    for fr in frames:
        try:
            feats.append(frame_features(fr, bank, segment.sample_rate))
        except FeatureError:
            continue
    if not feats:
        return []
    return aggregate(feats, chunk_size)


def format_float(x: float) -> str:
    return format(float(x), ".12g")


def write_feature_csv(path, rows) -> None:
    """``rows``: iterable of ``(segment_id, label, SegmentFeatureVector)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "label", *AGGREGATE_NAMES])
        for seg_id, label, vec in rows:
            w.writerow([seg_id, label, *(format_float(v) for v in vec.values)])


def read_feature_csv(path):
    """Returns ``(segment_ids, labels, matrix)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["segment_id", "label", *AGGREGATE_NAMES]:
            raise ValueError(f"{path}: unexpected feature CSV header")
        ids, labels, values = [], [], []
        for row in reader:
            ids.append(row[0])
            labels.append(row[1])
            values.append([float(v) for v in row[2:]])
    return ids, labels, np.array(values, dtype=np.float64).reshape(len(ids), len(AGGREGATE_NAMES))
