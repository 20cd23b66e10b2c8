"""Synthetic desk-scale PPG cohorts with a known ground truth.

Each subject gets a calendar age from an imbalanced sampler (mass
concentrated in 50-69 with thin tails), a latent vascular-age offset, a
two-pulse waveform whose morphology ages with calendar age + offset, and an
exponential time-to-event whose hazard scales with the offset. The offset is
the signal the whole pipeline is supposed to detect: it is visible in the
waveform, hidden from the covariates, and drives the outcome.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .streams import derive_rng

WAVEFORM_SAMPLES = 100


@dataclass(frozen=True)
class MorphologyParams:
    """Two-Gaussian pulse shape and how it ages.

    The diastolic pulse moves toward the systolic one and loses amplitude as
    effective age grows, which is the morphology the saliency analysis is
    expected to pick up.
    """

    systolic_position: float = 0.23  # fraction of the window
    systolic_amplitude: float = 1.0
    systolic_width: float = 0.035
    diastolic_position_ref: float = 0.68  # at reference_age
    diastolic_amplitude_ref: float = 0.85
    diastolic_width: float = 0.05
    peak_distance_slope: float = 0.0035  # window fraction lost per year
    amplitude_slope: float = 0.006  # diastolic amplitude lost per year
    reference_age: float = 30.0
    drift_amplitude: float = 0.08
    noise_sigma: float = 0.04
    age_range: tuple[float, float] = (20.0, 110.0)

    def __post_init__(self):
        if not (0 < self.systolic_position < 1 and 0 < self.diastolic_position_ref < 1):
            raise InvalidInputError("peak positions must be inside (0, 1)")
        if self.systolic_width <= 0 or self.diastolic_width <= 0:
            raise InvalidInputError("pulse widths must be positive")
        if self.systolic_amplitude < 0 or self.diastolic_amplitude_ref < 0:
            raise InvalidInputError("pulse amplitudes must be non-negative")
        for age in self.age_range:
            if not self.diastolic_position(age) > self.systolic_position:
                raise InvalidInputError(
                    "diastolic peak must stay right of the systolic peak "
                    f"over the age range (violated at {age})"
                )
            if self.diastolic_amplitude(age) < 0:
                raise InvalidInputError(
                    f"diastolic amplitude goes negative at age {age}"
                )

    def diastolic_position(self, effective_age: float) -> float:
        return self.diastolic_position_ref - self.peak_distance_slope * (
            effective_age - self.reference_age
        )

    def diastolic_amplitude(self, effective_age: float) -> float:
        return self.diastolic_amplitude_ref - self.amplitude_slope * (
            effective_age - self.reference_age
        )

    def peak_sample_positions(self, effective_age: float) -> tuple[float, float]:
        """(systolic, diastolic) peak centers in sample index units."""
        scale = WAVEFORM_SAMPLES - 1
        return (
            self.systolic_position * scale,
            self.diastolic_position(effective_age) * scale,
        )


@dataclass
class PpgRecord:
    subject_id: int
    visit_index: int  # 0 or 1
    waveform: np.ndarray = field(repr=False)  # z-scored, WAVEFORM_SAMPLES long
    calendar_age: float
    latent_vascular_offset: float  # hidden ground truth (years)
    event_time: float  # years from baseline, > 0
    event_flag: int  # 1 = event observed, 0 = censored
    covariates: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 1000
    low_tail: tuple[int, int] = (37, 49)
    core: tuple[int, int] = (50, 69)
    high_tail: tuple[int, int] = (70, 87)
    tail_weight: float = 0.08  # probability mass of each tail
    core_mean: float = 59.0
    core_sd: float = 5.5
    offset_sigma: float = 5.0
    baseline_hazard: float = 0.02  # events per year at zero offset
    log_hr_per_offset_year: float = 0.05
    censor_horizon: float = 10.0
    serial_fraction: float = 0.0  # fraction of subjects with a second visit
    serial_gap_years: float = 4.0
    serial_offset_drift_sd: float = 2.0
    seed: int = 0
    morphology: MorphologyParams = MorphologyParams()

    def __post_init__(self):
        if self.n_subjects < 1:
            raise InvalidInputError("n_subjects must be >= 1")
        if not 0 <= 2 * self.tail_weight < 1:
            raise InvalidInputError("tail weights must leave mass for the core")
        if self.baseline_hazard <= 0 or self.censor_horizon <= 0:
            raise InvalidInputError("hazard and horizon must be positive")
        if not 0 <= self.serial_fraction <= 1:
            raise InvalidInputError("serial_fraction must be in [0, 1]")
        if self.offset_sigma < 0:
            raise InvalidInputError("offset_sigma must be >= 0")

    @property
    def n_serial(self) -> int:
        return int(round(self.serial_fraction * self.n_subjects))


def synth_waveform(
    effective_age: float, params: MorphologyParams, rng: np.random.Generator
) -> np.ndarray:
    """One z-scored waveform at the given effective (vascular) age."""
    lo, hi = params.age_range
    if not lo <= effective_age <= hi:
        raise InvalidInputError(
            f"effective age {effective_age} outside configured range [{lo}, {hi}]"
        )
    x = np.linspace(0.0, 1.0, WAVEFORM_SAMPLES)
    systolic = params.systolic_amplitude * np.exp(
        -((x - params.systolic_position) ** 2) / (2 * params.systolic_width**2)
    )
    diastolic = params.diastolic_amplitude(effective_age) * np.exp(
        -((x - params.diastolic_position(effective_age)) ** 2)
        / (2 * params.diastolic_width**2)
    )
    wave = systolic + diastolic
    if params.drift_amplitude > 0:
        phase = rng.uniform(0.0, 1.0)
        wave = wave + params.drift_amplitude * np.sin(2 * np.pi * (x + phase))
    if params.noise_sigma > 0:
        wave = wave + rng.normal(0.0, params.noise_sigma, size=WAVEFORM_SAMPLES)
    return zscore(wave)


def zscore(wave: np.ndarray) -> np.ndarray:
    std = wave.std()
    if std < 1e-12:
        raise InvalidInputError("waveform is constant; cannot z-score")
    return (wave - wave.mean()) / std


def sample_age(spec: CohortSpec, rng: np.random.Generator) -> float:
    """Integer age from the imbalanced mixture (thin tails, dense core)."""
    u = rng.random()
    if u < spec.tail_weight:
        return float(rng.integers(spec.low_tail[0], spec.low_tail[1] + 1))
    if u < 2 * spec.tail_weight:
        return float(rng.integers(spec.high_tail[0], spec.high_tail[1] + 1))
    while True:
        age = rng.normal(spec.core_mean, spec.core_sd)
        rounded = int(np.rint(age))
        if spec.core[0] <= rounded <= spec.core[1]:
            return float(rounded)


def sample_cohort(spec: CohortSpec) -> list[PpgRecord]:
    """Generate the cohort; subjects are independent given the seed.

    The first ``n_serial`` subjects receive a second visit whose offset has
    drifted. Event times use the first-visit offset; effective ages are
    clamped into the morphology's valid range before synthesis.
    """
    lo, hi = spec.morphology.age_range
    records: list[PpgRecord] = []
    for subject in range(spec.n_subjects):
        rng = derive_rng(spec.seed, "subject", subject)
        age = sample_age(spec, rng)
        offset = rng.normal(0.0, spec.offset_sigma) if spec.offset_sigma else 0.0
        covariates = {
            "sex": float(rng.integers(0, 2)),
            "bmi": float(np.round(rng.normal(27.0, 4.0), 1)),
            "smoking": float(rng.random() < 0.1),
        }
        rate = spec.baseline_hazard * np.exp(spec.log_hr_per_offset_year * offset)
        raw_time = rng.exponential(1.0 / rate)
        event_flag = int(raw_time < spec.censor_horizon)
        event_time = min(raw_time, spec.censor_horizon)

        effective = float(np.clip(age + offset, lo, hi))
        records.append(
            PpgRecord(
                subject_id=subject,
                visit_index=0,
                waveform=synth_waveform(effective, spec.morphology, rng),
                calendar_age=age,
                latent_vascular_offset=offset,
                event_time=event_time,
                event_flag=event_flag,
                covariates=covariates,
            )
        )
        if subject < spec.n_serial:
            age2 = age + spec.serial_gap_years
            offset2 = offset + rng.normal(0.0, spec.serial_offset_drift_sd)
            effective2 = float(np.clip(age2 + offset2, lo, hi))
            records.append(
                PpgRecord(
                    subject_id=subject,
                    visit_index=1,
                    waveform=synth_waveform(effective2, spec.morphology, rng),
                    calendar_age=age2,
                    latent_vascular_offset=offset2,
                    event_time=event_time,
                    event_flag=event_flag,
                    covariates=covariates,
                )
            )
    return records


def split_dataset(
    records: list[PpgRecord], ratios: tuple[int, int, int] = (8, 1, 1), seed: int = 0
) -> tuple[list[PpgRecord], list[PpgRecord], list[PpgRecord]]:
    """Subject-level split; a subject's visits never straddle partitions."""
    if any(r <= 0 for r in ratios):
        raise InvalidInputError("split ratios must be positive")
    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < len(ratios):
        raise InvalidInputError(
            f"need at least {len(ratios)} subjects to split, got {len(subjects)}"
        )
    order = derive_rng(seed, "split").permutation(len(subjects))
    shuffled = [subjects[i] for i in order]

    total = sum(ratios)
    exact = [len(subjects) * r / total for r in ratios]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    for _ in range(len(subjects) - sum(sizes)):
        idx = int(np.argmax(remainders))
        sizes[idx] += 1
        remainders[idx] = -1.0

    assignment: dict[int, int] = {}
    cursor = 0
    for part, size in enumerate(sizes):
        for sid in shuffled[cursor : cursor + size]:
            assignment[sid] = part
        cursor += size

    parts: tuple[list[PpgRecord], ...] = ([], [], [])
    for record in records:
        parts[assignment[record.subject_id]].append(record)
    return parts


def measure_peak_positions(waveform: np.ndarray, min_separation: int = 10):
    """(systolic, diastolic) peak locations via argmax + quadratic refinement.

    The systolic pulse has the larger amplitude, so it is the global argmax;
    the diastolic peak is the argmax at least ``min_separation`` samples to
    its right.
    """
    waveform = np.asarray(waveform, dtype=float)
    sys_idx = int(np.argmax(waveform))
    tail_start = sys_idx + min_separation
    if tail_start >= waveform.size - 1:
        raise InvalidInputError("no room for a diastolic peak after the systolic one")
    dia_idx = tail_start + int(np.argmax(waveform[tail_start:]))
    return _refine_peak(waveform, sys_idx), _refine_peak(waveform, dia_idx)


def measure_peak_spacing(waveform: np.ndarray) -> float:
    sys_pos, dia_pos = measure_peak_positions(waveform)
    return dia_pos - sys_pos


def _refine_peak(waveform: np.ndarray, idx: int) -> float:
    if idx <= 0 or idx >= waveform.size - 1:
        return float(idx)
    left, mid, right = waveform[idx - 1 : idx + 2]
    denom = left - 2 * mid + right
    if denom >= 0:
        return float(idx)
    return float(idx + 0.5 * (left - right) / denom)


# Dataset files are JSON lines; every float is rounded to 9 significant
# digits before writing so that load followed by save is byte-identical.


def _round9(value: float) -> float:
    return float(f"{value:.9g}")


def record_to_json(record: PpgRecord) -> str:
    payload = {
        "id": record.subject_id,
        "visit": record.visit_index,
        "age": _round9(record.calendar_age),
        "offset": _round9(record.latent_vascular_offset),
        "event_time": _round9(record.event_time),
        "event": record.event_flag,
        "covariates": {k: _round9(v) for k, v in record.covariates.items()},
        "waveform": [_round9(v) for v in record.waveform],
    }
    return json.dumps(payload, separators=(",", ":"))


def record_from_json(line: str) -> PpgRecord:
    data = json.loads(line)
    waveform = np.asarray(data["waveform"], dtype=float)
    if waveform.size != WAVEFORM_SAMPLES:
        raise InvalidInputError(
            f"waveform must have {WAVEFORM_SAMPLES} samples, got {waveform.size}"
        )
    return PpgRecord(
        subject_id=int(data["id"]),
        visit_index=int(data["visit"]),
        waveform=waveform,
        calendar_age=float(data["age"]),
        latent_vascular_offset=float(data["offset"]),
        event_time=float(data["event_time"]),
        event_flag=int(data["event"]),
        covariates={k: float(v) for k, v in data["covariates"].items()},
    )


def save_dataset(path: str | Path, records: list[PpgRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record))
            fh.write("\n")


def load_dataset(path: str | Path) -> list[PpgRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_json(line))
    return records


def records_to_arrays(records: list[PpgRecord]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1, L) float32 waveforms and (N,) float64 ages for training."""
    x = np.stack([r.waveform for r in records]).astype(np.float32)[:, None, :]
    y = np.asarray([r.calendar_age for r in records], dtype=np.float64)
    return x, y
