"""Synthetic labelled coughs and symptom records with planted class structure.

A cough is rendered as three consecutive phases (initial burst, noisy airflow,
decaying closure) whose durations, spectral bands and energy shares come from a
:class:`CoughClassProfile`. The defaults loosely encode qualitative differences
between healthy, asthma, bronchitis and COVID-19 coughs; they make no claim of
clinical realism.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .signal_prep import AudioSignal, write_wav
from .tabular import FLAG_FIELDS, GENDERS, RECORD_FIELDS, SymptomRecord, write_symptom_csv

SAMPLE_RATE = 16000
CLASS_LABELS = ("healthy", "asthma", "bronchitis", "covid_positive")
PAD_MS = 60.0
NOISE_FLOOR = 1e-4


@dataclass(frozen=True)
class CoughClassProfile:
    label: str
    durations_ms: tuple = (50.0, 250.0, 250.0)
    energy_fractions: tuple = (0.4, 0.35, 0.25)
    bands_hz: tuple = ((300.0, 4000.0), (300.0, 4000.0), (300.0, 4000.0))
    # gap between burst and airflow ("short catch"), ms
    catch_ms: float = 0.0
    # periodic closure component: fundamental (0 = none) and share of phase-3 energy
    tail_f0: float = 0.0
    tail_voiced: float = 0.0
    # irregularity of the closure: random amplitude bursts, 0..1
    tail_irregularity: float = 0.0
    # narrowband tone in the airflow phase (wheeze analog): (frequency Hz, energy share)
    wheeze: tuple = (0.0, 0.0)
    # impulsive clicks in the closure phase (crackle analog), clicks per second
    crackle_rate: float = 0.0
    duration_jitter: float = 0.2
    # probability that an item shows this class's acoustics instead of the neutral cough
    acoustic_typicality: float = 1.0
    symptom_rates: dict = field(default_factory=dict)
    age_range: tuple = (18.0, 70.0)

    def __post_init__(self):
        if len(self.durations_ms) != 3 or min(self.durations_ms) <= 0:
            raise ValueError("three positive phase durations required")
        if len(self.energy_fractions) != 3 or min(self.energy_fractions) < 0:
            raise ValueError("three nonnegative energy fractions required")
        if abs(sum(self.energy_fractions) - 1.0) > 1e-9:
            raise ValueError("energy fractions must sum to 1")
        for lo, hi in self.bands_hz:
            if not 0 < lo < hi < SAMPLE_RATE / 2:
                raise ValueError(f"invalid band ({lo}, {hi})")
        unknown = set(self.symptom_rates) - set(FLAG_FIELDS)
        if unknown:
            raise ValueError(f"unknown symptom fields {sorted(unknown)}")
        if any(not 0 <= r <= 1 for r in self.symptom_rates.values()):
            raise ValueError("symptom rates must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CoughClassProfile":
        d = dict(d)
        for key in ("durations_ms", "energy_fractions", "wheeze", "age_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "bands_hz" in d:
            d["bands_hz"] = tuple(tuple(b) for b in d["bands_hz"])
        return cls(**d)


_BASE_RATES = {
    "fever": 0.10, "dry_cough": 0.15, "sore_throat": 0.15, "headache": 0.30,
    "body_aches": 0.15, "chest_pain": 0.08, "dizziness_confusion": 0.10,
    "breathlessness": 0.10, "fatigue": 0.30, "asthma_history": 0.05,
    "diabetes": 0.10, "hypertension": 0.15,
}


def _rates(**overrides):
    r = dict(_BASE_RATES)
    r.update(overrides)
    return r


NEUTRAL_PROFILE = CoughClassProfile(label="neutral")

DEFAULT_PROFILES = {
    # high-frequency airflow after the burst, voiced closure
    "healthy": CoughClassProfile(
        label="healthy",
        durations_ms=(45.0, 200.0, 220.0),
        energy_fractions=(0.45, 0.35, 0.20),
        bands_hz=((400.0, 5000.0), (2500.0, 7000.0), (1500.0, 6000.0)),
        tail_f0=160.0, tail_voiced=0.5,
        acoustic_typicality=0.9,
        symptom_rates=_rates(),
        age_range=(18.0, 60.0),
    ),
    # wet cough: broadband airflow with a wheeze, random closure
    "asthma": CoughClassProfile(
        label="asthma",
        durations_ms=(55.0, 280.0, 260.0),
        energy_fractions=(0.45, 0.35, 0.20),
        bands_hz=((200.0, 6500.0), (200.0, 7000.0), (200.0, 6500.0)),
        tail_irregularity=0.8, wheeze=(600.0, 0.35),
        acoustic_typicality=0.9,
        symptom_rates=_rates(breathlessness=0.70, asthma_history=0.85, dry_cough=0.30,
                             chest_pain=0.15),
        age_range=(10.0, 70.0),
    ),
    # wet cough: low broadband energy, crackles in the closure
    "bronchitis": CoughClassProfile(
        label="bronchitis",
        durations_ms=(60.0, 300.0, 300.0),
        energy_fractions=(0.45, 0.30, 0.25),
        bands_hz=((150.0, 3500.0), (150.0, 3000.0), (150.0, 3000.0)),
        tail_irregularity=0.8, crackle_rate=40.0,
        acoustic_typicality=0.9,
        symptom_rates=_rates(sore_throat=0.80, body_aches=0.50, fever=0.75,
                             breathlessness=0.35, chest_pain=0.12),
        age_range=(30.0, 80.0),
    ),
    # dry cough: short catch, energy concentrated in airflow and closure;
    # less often typical, so symptoms carry part of the decision
    "covid_positive": CoughClassProfile(
        label="covid_positive",
        durations_ms=(40.0, 300.0, 280.0),
        energy_fractions=(0.20, 0.45, 0.35),
        bands_hz=((300.0, 4500.0), (300.0, 3500.0), (200.0, 3000.0)),
        catch_ms=35.0, tail_f0=260.0, tail_voiced=0.25, tail_irregularity=0.4,
        acoustic_typicality=0.75,
        symptom_rates=_rates(fever=0.85, chest_pain=0.75, dry_cough=0.35,
                             dizziness_confusion=0.25, body_aches=0.25),
        age_range=(25.0, 85.0),
    ),
}


def load_profiles(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    items = data["profiles"] if isinstance(data, dict) else data
    profiles = {}
    for item in items:
        p = CoughClassProfile.from_dict(item)
        profiles[p.label] = p
    return profiles


def dump_profiles(path, profiles: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"profiles": [p.to_dict() for p in profiles.values()]}, fh, indent=2)


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------

def _band_noise(rng, n, band, sr=SAMPLE_RATE):
    sos = sps.butter(4, band, btype="bandpass", fs=sr, output="sos")
    x = rng.standard_normal(n + 512)
    return sps.sosfilt(sos, x)[512:]


def _unit_energy(x):
    e = np.sum(x**2)
    return x / np.sqrt(e) if e > 0 else x


def _mix(parts_and_shares):
    out = 0.0
    for part, share in parts_and_shares:
        if share > 0:
            out = out + np.sqrt(share) * _unit_energy(part)
    return out


def render_phases(profile: CoughClassProfile, rng) -> tuple[list[np.ndarray], int]:
    """Unscaled phase waveforms and the length of the catch gap (samples)."""
    sr = SAMPLE_RATE
    jit = profile.duration_jitter
    lens = [max(16, int(round(d * sr / 1000 * rng.uniform(1 - jit, 1 + jit))))
            for d in profile.durations_ms]
    t = [np.arange(n) / sr for n in lens]

    burst = _band_noise(rng, lens[0], profile.bands_hz[0])
    burst *= np.minimum(1.0, t[0] / 0.004) * np.exp(-t[0] / (lens[0] / sr / 2.5))

    airflow = _band_noise(rng, lens[1], profile.bands_hz[1])
    airflow *= np.exp(-t[1] / (lens[1] / sr * 1.5))
    wf, ws = profile.wheeze
    if wf > 0 and ws > 0:
        tone = np.sin(2 * np.pi * wf * t[1] * (1 + 0.02 * np.sin(2 * np.pi * 5 * t[1])))
        airflow = _mix([(airflow, 1 - ws), (tone * np.exp(-t[1] / (lens[1] / sr)), ws)])

    closure = _band_noise(rng, lens[2], profile.bands_hz[2])
    if profile.tail_irregularity > 0:
        n_bumps = 1 + rng.poisson(6 * profile.tail_irregularity)
        env = np.ones(lens[2]) * (1 - profile.tail_irregularity)
        for _ in range(n_bumps):
            c = rng.uniform(0, t[2][-1])
            env += rng.uniform(0.5, 1.5) * np.exp(-0.5 * ((t[2] - c) / 0.012) ** 2)
        closure *= env
    if profile.crackle_rate > 0:
        clicks = np.zeros(lens[2])
        n_clicks = rng.poisson(profile.crackle_rate * lens[2] / sr)
        for pos in rng.integers(0, lens[2], size=n_clicks):
            width = min(24, lens[2] - pos)
            clicks[pos:pos + width] += rng.choice([-1, 1]) * np.hanning(width + 2)[1:-1] * 4
        closure = closure + clicks * np.std(closure)
    if profile.tail_f0 > 0 and profile.tail_voiced > 0:
        f0 = profile.tail_f0 * rng.uniform(0.85, 1.15)
        phase = 2 * np.pi * f0 * t[2]
        voiced = sum(np.sin(k * phase) / k for k in range(1, 8))
        closure = _mix([(closure, 1 - profile.tail_voiced), (voiced, profile.tail_voiced)])
    closure *= np.exp(-t[2] / (lens[2] / sr / 2.0))

    catch = int(round(profile.catch_ms * sr / 1000))
    return [burst, airflow, closure], catch


def gen_cough(profile: CoughClassProfile, seed, peak: float | None = None) -> AudioSignal:
    """Three-phase cough at 16 kHz with exact per-phase energy shares.

    Deterministic in ``seed``. ``peak`` fixes the output peak amplitude; by
    default it is drawn in [0.3, 0.8].
    """
    rng = np.random.default_rng(seed)
    phases, catch = render_phases(profile, rng)
    scaled = [np.sqrt(frac) * _unit_energy(p) for p, frac in zip(phases, profile.energy_fractions)]
    gap = NOISE_FLOOR * 0.1 * rng.standard_normal(catch)
    x = np.concatenate([scaled[0], gap, scaled[1], scaled[2]])
    level = rng.uniform(0.3, 0.8) if peak is None else peak
    x = x * (level / np.max(np.abs(x)))
    return AudioSignal(x, SAMPLE_RATE)


def phase_bounds(profile: CoughClassProfile, seed) -> list[tuple[int, int]]:
    """Sample ranges of the three phases inside ``gen_cough(profile, seed)``."""
    rng = np.random.default_rng(seed)
    phases, catch = render_phases(profile, rng)
    a = len(phases[0])
    b = a + catch
    return [(0, a), (b, b + len(phases[1])), (b + len(phases[1]), b + len(phases[1]) + len(phases[2]))]


def pad_with_silence(sig: AudioSignal, seed, pad_ms: float = PAD_MS) -> AudioSignal:
    rng = np.random.default_rng(seed)
    n = int(round(pad_ms * sig.sample_rate / 1000))
    floor = NOISE_FLOOR * rng.standard_normal(2 * n)
    return AudioSignal(np.concatenate([floor[:n], sig.samples, floor[n:]]), sig.sample_rate)


# ---------------------------------------------------------------------------
# Symptoms
# ---------------------------------------------------------------------------

def gen_symptoms(profile: CoughClassProfile, seed) -> SymptomRecord:
    rng = np.random.default_rng(seed)
    lo, hi = profile.age_range
    age = int(np.floor(rng.uniform(lo, hi)))
    gender = GENDERS[int(rng.choice(3, p=[0.49, 0.49, 0.02]))]
    flags = {f: int(rng.random() < profile.symptom_rates.get(f, 0.0)) for f in FLAG_FIELDS}
    return SymptomRecord(age=age, gender=gender, **flags)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def _item_seed(seed, class_idx, item, purpose):
    return int(np.random.SeedSequence([int(seed), class_idx, item, purpose]).generate_state(1)[0])


def _render_item(args):
    profile, class_idx, i, seed, wav_path = args
    typical = np.random.default_rng(_item_seed(seed, class_idx, i, 2)).random()
    acoustic = profile if typical < profile.acoustic_typicality else NEUTRAL_PROFILE
    sig = gen_cough(acoustic, _item_seed(seed, class_idx, i, 0))
    write_wav(wav_path, pad_with_silence(sig, _item_seed(seed, class_idx, i, 3)))
    return gen_symptoms(profile, _item_seed(seed, class_idx, i, 1))


def gen_dataset(out_dir, n_per_class: int, profiles: dict | None = None, seed: int = 0,
                workers: int = 1) -> Path:
    """Write WAVs, ``symptoms.csv`` and ``manifest.csv`` under ``out_dir``.

    Returns the manifest path. Each item draws from streams derived from
    ``(seed, class, index)``, so output does not depend on ``workers``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    profiles = profiles or DEFAULT_PROFILES
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")

    jobs, rel_paths, labels = [], [], []
    for ci, label in enumerate(sorted(profiles, key=_class_order)):
        for i in range(n_per_class):
            rel = f"wav/{label}_{i:04d}.wav"
            jobs.append((profiles[label], ci, i, seed, out / rel))
            rel_paths.append(rel)
            labels.append(label)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_render_item, jobs, chunksize=8))
    else:
        records = [_render_item(j) for j in jobs]

    write_symptom_csv(out / "symptoms.csv", records)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wav_path", "label", *RECORD_FIELDS])
        for rel, label, rec in zip(rel_paths, labels, records):
            row = rec.as_row()
            w.writerow([rel, label, *(row[f] for f in RECORD_FIELDS)])
    return manifest


def _class_order(label):
    return (CLASS_LABELS.index(label) if label in CLASS_LABELS else len(CLASS_LABELS), label)
