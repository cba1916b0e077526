"""Multi-lead ECG records, lead algebra, resampling and a synthetic generator.

Samples are stored lead-major in millivolts. Lead order is normative:
8-lead records use ``I, II, V1..V6`` and 12-lead records append the limb
derivations ``III, aVR, aVL, aVF``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BASE_LEADS = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")
DERIVED_LEADS = ("III", "aVR", "aVL", "aVF")
CANONICAL_LEADS = BASE_LEADS + DERIVED_LEADS

# ECGB lead-id codes
LEAD_CODES = {
    "I": 0, "II": 1, "III": 2, "aVR": 3, "aVL": 4, "aVF": 5,
    "V1": 6, "V2": 7, "V3": 8, "V4": 9, "V5": 10, "V6": 11,
}
CODE_LEADS = {v: k for k, v in LEAD_CODES.items()}

ECGB_MAGIC = b"ECGB"
ECGB_VERSION = 1
_ECGB_HEADER = struct.Struct("<4sHHIf")


class EcgFormatError(ValueError):
    """Raised for malformed ECGB files or sidecars."""


@dataclass(frozen=True)
class EcgRecord:
    lead_ids: tuple[str, ...]
    sample_rate_hz: float
    samples: np.ndarray

    def __post_init__(self):
        lead_ids = tuple(self.lead_ids)
        object.__setattr__(self, "lead_ids", lead_ids)
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D (leads x samples), got shape {samples.shape}")
        if samples.shape[0] != len(lead_ids):
            raise ValueError(f"{len(lead_ids)} lead ids but {samples.shape[0]} sample rows")
        if samples.shape[1] < 1:
            raise ValueError("record must hold at least one sample")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        unknown = [lead for lead in lead_ids if lead not in LEAD_CODES]
        if unknown:
            raise ValueError(f"unknown lead ids: {unknown}")
        if len(set(lead_ids)) != len(lead_ids):
            raise ValueError(f"duplicate lead ids in {lead_ids}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def lead_count(self) -> int:
        return len(self.lead_ids)

    @property
    def sample_count(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.sample_count / self.sample_rate_hz

    def lead(self, name: str) -> np.ndarray:
        return self.samples[self.lead_ids.index(name)]

    def select(self, leads) -> EcgRecord:
        """Restrict to ``leads`` in the given order."""
        leads = tuple(leads)
        _require_leads(self, leads)
        rows = [self.lead_ids.index(lead) for lead in leads]
        return EcgRecord(leads, self.sample_rate_hz, self.samples[rows])


def _require_leads(record: EcgRecord, required) -> None:
    missing = [lead for lead in required if lead not in record.lead_ids]
    if missing:
        raise ValueError(f"record is missing required lead(s): {', '.join(missing)}")


def derive_full_leads(record8: EcgRecord) -> EcgRecord:
    """Append III, aVR, aVL, aVF computed from I and II (Einthoven)."""
    _require_leads(record8, BASE_LEADS)
    if set(record8.lead_ids) != set(BASE_LEADS):
        extra = sorted(set(record8.lead_ids) - set(BASE_LEADS))
        raise ValueError(f"expected exactly the 8 base leads, got extra: {', '.join(extra)}")
    base = record8.select(BASE_LEADS).samples
    lead_i, lead_ii = base[0], base[1]
    derived = np.stack([
        lead_ii - lead_i,
        -(lead_i + lead_ii) / 2,
        (lead_i - lead_ii) / 2,
        (lead_ii - lead_i) / 2,
    ])
    return EcgRecord(CANONICAL_LEADS, record8.sample_rate_hz, np.vstack([base, derived]))


def reduce_to_8_leads(record12: EcgRecord) -> EcgRecord:
    return record12.select(BASE_LEADS)


def resample(record: EcgRecord, target_hz: float) -> EcgRecord:
    """Linear-interpolation resampling on the time axis."""
    if not target_hz > 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    if target_hz == record.sample_rate_hz:
        return record
    n_in = record.sample_count
    n_out = round_half_away(n_in * target_hz / record.sample_rate_hz)
    n_out = max(n_out, 1)
    t_in = np.arange(n_in) / record.sample_rate_hz
    t_out = np.arange(n_out) / target_hz
    out = np.empty((record.lead_count, n_out))
    tail = t_out > t_in[-1]
    for row, signal in enumerate(record.samples):
        out[row] = np.interp(t_out, t_in, signal)
        if tail.any() and n_in > 1:
            # past the last input sample, extend the final segment linearly
            slope = (signal[-1] - signal[-2]) * record.sample_rate_hz
            out[row, tail] = signal[-1] + slope * (t_out[tail] - t_in[-1])
    return EcgRecord(record.lead_ids, float(target_hz), out)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def heart_rate_from_rr(rr_ms: float) -> float:
    """Heart rate in bpm from an RR interval in milliseconds."""
    if not rr_ms > 0:
        raise ValueError(f"RR interval must be positive, got {rr_ms}")
    return 60000.0 / rr_ms


# --------------------------------------------------------------------------
# synthetic generator

# Per-lead gains applied to the single source beat train (I, II, V1..V6).
# The 12-lead variant derives the limb leads from I and II, which gives
# III=0.4, aVR=-0.8, aVL=-0.2, aVF=0.2; all twelve gains are distinct.
LEAD_GAINS = dict(zip(BASE_LEADS, (0.6, 1.0, -0.45, -0.3, 0.35, 0.9, 1.2, 0.7)))

P_AMP_MV, QRS_AMP_MV, T_AMP_MV = 0.15, 1.0, 0.3
P_SIGMA_MS, T_SIGMA_MS = 25.0, 50.0
WANDER_HZ = 0.3
_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class SyntheticEcgSpec:
    heart_rate_bpm: float = 70.0
    qrs_duration_ms: float = 90.0
    rr_jitter_frac: float = 0.0
    noise_std_mv: float = 0.0
    baseline_wander_amp_mv: float = 0.0
    duration_s: float = 10.0
    sample_rate_hz: float = 250.0
    lead_count: int = 8

    def __post_init__(self):
        problems = []
        if not 30 <= self.heart_rate_bpm <= 200:
            problems.append(f"heart_rate_bpm {self.heart_rate_bpm} outside [30, 200]")
        if not 40 <= self.qrs_duration_ms <= 200:
            problems.append(f"qrs_duration_ms {self.qrs_duration_ms} outside [40, 200]")
        if not 0 <= self.rr_jitter_frac <= 0.1:
            problems.append(f"rr_jitter_frac {self.rr_jitter_frac} outside [0, 0.1]")
        if self.noise_std_mv < 0:
            problems.append("noise_std_mv must be >= 0")
        if self.baseline_wander_amp_mv < 0:
            problems.append("baseline_wander_amp_mv must be >= 0")
        if not self.duration_s > 0:
            problems.append("duration_s must be > 0")
        if not self.sample_rate_hz > 0:
            problems.append("sample_rate_hz must be > 0")
        if self.lead_count not in (8, 12):
            problems.append(f"lead_count must be 8 or 12, got {self.lead_count}")
        if self.qrs_duration_ms >= 60000.0 / self.heart_rate_bpm:
            problems.append("QRS duration does not fit inside one RR interval")
        if problems:
            raise ValueError("invalid synthetic spec: " + "; ".join(problems))


@dataclass(frozen=True)
class EcgGroundTruth:
    heart_rate_bpm: float
    qrs_duration_ms: float
    class_label: int
    rr_interval_ms: float

    def to_dict(self) -> dict:
        return {
            "heart_rate_bpm": self.heart_rate_bpm,
            "qrs_duration_ms": self.qrs_duration_ms,
            "class_label": self.class_label,
            "rr_interval_ms": self.rr_interval_ms,
        }


def beat_times_ms(spec: SyntheticEcgSpec, rng: np.random.Generator) -> np.ndarray:
    """R-peak times covering the record plus one beat of margin on each side."""
    rr = 60000.0 / spec.heart_rate_bpm
    dt = 1000.0 / spec.sample_rate_hz
    duration = spec.duration_s * 1000.0
    # first in-window beat sits on the sample grid
    phase = np.round(rng.uniform(0.1, 0.9) * rr / dt) * dt
    times = [phase]
    while times[-1] < duration + rr:
        jitter = 1.0 + rng.uniform(-spec.rr_jitter_frac, spec.rr_jitter_frac)
        times.append(times[-1] + rr * jitter)
    jitter = 1.0 + rng.uniform(-spec.rr_jitter_frac, spec.rr_jitter_frac)
    return np.array([phase - rr * jitter] + times)


def source_beat_train(spec: SyntheticEcgSpec, beats_ms: np.ndarray) -> np.ndarray:
    rr = 60000.0 / spec.heart_rate_bpm
    n = int(round(spec.duration_s * spec.sample_rate_hz))
    t = np.arange(n) * (1000.0 / spec.sample_rate_hz)
    qrs_sigma = spec.qrs_duration_ms * _FWHM_TO_SIGMA
    p_offset = -min(160.0, 0.25 * rr)
    t_offset = min(300.0, 0.4 * rr)
    signal = np.zeros(n)
    for beat in beats_ms:
        signal += P_AMP_MV * np.exp(-0.5 * ((t - beat - p_offset) / P_SIGMA_MS) ** 2)
        signal += QRS_AMP_MV * np.exp(-0.5 * ((t - beat) / qrs_sigma) ** 2)
        signal += T_AMP_MV * np.exp(-0.5 * ((t - beat - t_offset) / T_SIGMA_MS) ** 2)
    return signal


def generate_synthetic(spec: SyntheticEcgSpec, seed: int) -> tuple[EcgRecord, EcgGroundTruth]:
    """Deterministic synthetic ECG with analytically known HR and QRS width.

    One Gaussian-bump beat train (P, QRS, T) is scaled by ``LEAD_GAINS``,
    then each base lead gets a 0.3 Hz baseline wander sinusoid and white
    noise. 12-lead output derives the limb leads from I and II.
    """
    rng = np.random.default_rng(seed)
    beats = beat_times_ms(spec, rng)
    source = source_beat_train(spec, beats)
    n = source.shape[0]
    t_s = np.arange(n) / spec.sample_rate_hz
    wander_phase = rng.uniform(0, 2 * np.pi)
    wander = spec.baseline_wander_amp_mv * np.sin(2 * np.pi * WANDER_HZ * t_s + wander_phase)
    gains = np.array([LEAD_GAINS[lead] for lead in BASE_LEADS])[:, None]
    samples = gains * source[None, :] + wander[None, :]
    if spec.noise_std_mv > 0:
        samples = samples + rng.normal(0.0, spec.noise_std_mv, size=samples.shape)
    record = EcgRecord(BASE_LEADS, float(spec.sample_rate_hz), samples)
    if spec.lead_count == 12:
        record = derive_full_leads(record)
    rr = 60000.0 / spec.heart_rate_bpm
    truth = EcgGroundTruth(
        heart_rate_bpm=float(spec.heart_rate_bpm),
        qrs_duration_ms=float(spec.qrs_duration_ms),
        class_label=0 if spec.heart_rate_bpm < 75 else 1,
        rr_interval_ms=rr,
    )
    return record, truth


# --------------------------------------------------------------------------
# ECGB files

def write_ecgb(path, record: EcgRecord) -> None:
    path = Path(path)
    header = _ECGB_HEADER.pack(
        ECGB_MAGIC, ECGB_VERSION, record.lead_count, record.sample_count, record.sample_rate_hz
    )
    codes = struct.pack(f"<{record.lead_count}H", *(LEAD_CODES[l] for l in record.lead_ids))
    payload = record.samples.astype("<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header + codes + payload)
    os.replace(tmp, path)


def read_ecgb(path) -> EcgRecord:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _ECGB_HEADER.size:
        raise EcgFormatError(f"{path}: truncated header")
    magic, version, lead_count, sample_count, rate = _ECGB_HEADER.unpack_from(data, 0)
    if magic != ECGB_MAGIC:
        raise EcgFormatError(f"{path}: bad magic {magic!r}")
    if version != ECGB_VERSION:
        raise EcgFormatError(f"{path}: unsupported version {version}")
    offset = _ECGB_HEADER.size
    expected = offset + 2 * lead_count + 4 * lead_count * sample_count
    if len(data) != expected:
        raise EcgFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    codes = struct.unpack_from(f"<{lead_count}H", data, offset)
    try:
        leads = tuple(CODE_LEADS[c] for c in codes)
    except KeyError as exc:
        raise EcgFormatError(f"{path}: unknown lead code {exc.args[0]}") from None
    offset += 2 * lead_count
    samples = np.frombuffer(data, dtype="<f4", count=lead_count * sample_count, offset=offset)
    return EcgRecord(leads, float(rate), samples.reshape(lead_count, sample_count).astype(np.float64))


SIDECAR_NAME = "labels.jsonl"


def write_sidecar(path, entries: list[dict]) -> None:
    """One JSON object per line; each carries the record filename under ``record``."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_sidecar(path) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EcgFormatError(f"{path}:{lineno}: {exc.msg}") from None
            if "record" not in entry:
                raise EcgFormatError(f"{path}:{lineno}: missing 'record' key")
            out[entry["record"]] = entry
    return out


def load_corpus(directory) -> tuple[list[EcgRecord], list[dict]]:
    """Read every record listed in the sidecar, in sidecar order."""
    directory = Path(directory)
    labels = read_sidecar(directory / SIDECAR_NAME)
    records = [read_ecgb(directory / name) for name in labels]
    return records, list(labels.values())
