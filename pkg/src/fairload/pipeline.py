"""IMU gait preprocessing: low-pass filtering, gait event detection,
cycle segmentation, resampling and the on-disk dataset container.

Trials are time-major ``[T, C]`` arrays whose channels are grouped per
sensor in the order ``acc_x, acc_y, acc_z, gyr_x, gyr_y, gyr_z``.  The
sagittal shank angular velocity used for event detection is ``gyr_x``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

from .errors import DataError, LengthError, ParameterError

logger = logging.getLogger(__name__)

CHANNELS_PER_SENSOR = 6
CHANNEL_SUFFIXES = ("acc_x", "acc_y", "acc_z", "gyr_x", "gyr_y", "gyr_z")
SAGITTAL_GYRO = 3
CYCLE_LENGTH = 128
FILTER_ORDER = 2
FORMAT_VERSION = 1

SENSORS_12 = (
    "left_thigh", "right_thigh", "left_shank", "right_shank", "right_foot",
    "left_upper_arm", "right_upper_arm", "left_forearm", "right_forearm",
    "t6", "sternum", "sacrum",
)

SEXES = ("male", "female")


def channel_names(sensors: Sequence[str]) -> list[str]:
    return [f"{s}.{c}" for s in sensors for c in CHANNEL_SUFFIXES]


@dataclass
class RawTrial:
    samples: np.ndarray
    subject_id: str
    sex: str
    weight_kg: float
    trial_id: str
    sensors: Sequence[str] = SENSORS_12
    sample_rate_hz: float = 80.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] < 2:
            raise LengthError("trial needs a [T, C] array with T >= 2")
        if self.samples.shape[1] != CHANNELS_PER_SENSOR * len(self.sensors):
            raise DataError(
                f"{self.samples.shape[1]} channels do not match "
                f"{len(self.sensors)} sensors x {CHANNELS_PER_SENSOR}")
        if self.sample_rate_hz <= 0:
            raise ParameterError("sample_rate_hz must be positive")
        if self.sex not in SEXES:
            raise DataError(f"unknown sex label {self.sex!r}")
        if self.weight_kg < 0:
            raise DataError("weight_kg must be >= 0")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"trial {self.trial_id} has non-finite samples")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def channel(self, sensor: str, offset: int) -> np.ndarray:
        try:
            i = list(self.sensors).index(sensor)
        except ValueError:
            raise DataError(f"trial {self.trial_id} has no sensor {sensor!r}") from None
        return self.samples[:, i * CHANNELS_PER_SENSOR + offset]


@dataclass
class GaitEvents:
    """Complete gait cycles as ``(rhs, lto, lhs, rto, next_rhs)`` sample indices."""

    cycles: list[tuple[int, int, int, int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.cycles)

    def validate(self, n_samples: int | None = None) -> None:
        prev_end = -1
        for ev in self.cycles:
            if not all(a < b for a, b in zip(ev, ev[1:])):
                raise DataError(f"event tuple {ev} is not strictly increasing")
            if ev[0] < prev_end:
                raise DataError(f"event tuple {ev} overlaps its predecessor")
            if n_samples is not None and ev[-1] >= n_samples:
                raise DataError(f"event tuple {ev} exceeds trial length {n_samples}")
            prev_end = ev[-1]


@dataclass
class GaitCycle:
    data: np.ndarray
    subject_id: str
    sex: str
    weight_kg: float
    trial_id: str
    cycle_index: int


@dataclass(frozen=True)
class DetectionParams:
    min_peak_height: float = 0.8
    min_peak_separation_s: float = 0.5


@dataclass(frozen=True)
class PipelineParams:
    cutoff_hz: float = 6.0
    cycle_length: int = CYCLE_LENGTH
    detection: DetectionParams = DetectionParams()
    right_shank: str = "right_shank"
    left_shank: str = "left_shank"


def _check_cutoff(sample_rate_hz, cutoff_hz):
    if sample_rate_hz <= 0:
        raise ParameterError("sample_rate_hz must be positive")
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise ParameterError(
            f"cutoff {cutoff_hz} Hz outside (0, {sample_rate_hz / 2}) Hz")


def butterworth_coefficients(sample_rate_hz: float, cutoff_hz: float):
    """Second-order digital Butterworth low-pass ``(b, a)`` (bilinear transform)."""
    _check_cutoff(sample_rate_hz, cutoff_hz)
    return sps.butter(FILTER_ORDER, cutoff_hz, btype="low", fs=sample_rate_hz)


def _filtfilt(x, sample_rate_hz, cutoff_hz, axis=0):
    b, a = butterworth_coefficients(sample_rate_hz, cutoff_hz)
    # forward-backward doubles the effective order; pad 3x that, odd reflection
    padlen = 3 * 2 * FILTER_ORDER
    if x.shape[axis] <= padlen:
        raise LengthError(f"need more than {padlen} samples to filter, got {x.shape[axis]}")
    if not np.all(np.isfinite(x)):
        raise DataError("cannot filter non-finite samples")
    return sps.filtfilt(b, a, x, axis=axis, padtype="odd", padlen=padlen)


def butterworth_lowpass(signal, sample_rate_hz: float, cutoff_hz: float) -> np.ndarray:
    """Zero-phase (forward-backward) second-order Butterworth low-pass of a 1-D signal."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise DataError("butterworth_lowpass expects a 1-D signal")
    return _filtfilt(x, sample_rate_hz, cutoff_hz)


def lowpass_trial(trial: RawTrial, cutoff_hz: float = 6.0) -> RawTrial:
    filtered = _filtfilt(trial.samples, trial.sample_rate_hz, cutoff_hz, axis=0)
    return RawTrial(filtered, trial.subject_id, trial.sex, trial.weight_kg,
                    trial.trial_id, trial.sensors, trial.sample_rate_hz)


def _swing_events(gyro, sample_rate_hz, params):
    """Toe-offs and heel strikes around the mid-swing peaks of one leg."""
    distance = max(1, int(round(params.min_peak_separation_s * sample_rate_hz)))
    peaks, _ = sps.find_peaks(gyro, height=params.min_peak_height, distance=distance)
    minima, _ = sps.find_peaks(-gyro)
    toe_offs, heel_strikes = set(), set()
    for p in peaks:
        k = np.searchsorted(minima, p)
        if k > 0:
            toe_offs.add(int(minima[k - 1]))
        if k < len(minima):
            heel_strikes.add(int(minima[k]))
    return np.array(sorted(toe_offs), dtype=int), np.array(sorted(heel_strikes), dtype=int)


def detect_gait_events(right_gyro, left_gyro, sample_rate_hz: float,
                       params: DetectionParams = DetectionParams()) -> GaitEvents:
    """Find complete right-heel-strike to right-heel-strike cycles.

    Mid-swing is a peak of sagittal shank angular velocity above
    ``min_peak_height``; heel strike is the first local minimum after it and
    toe-off the last local minimum before it.  Cycles whose four
    intermediate events cannot be matched in order are dropped.
    """
    right = np.asarray(right_gyro, dtype=float)
    left = np.asarray(left_gyro, dtype=float)
    if right.shape != left.shape or right.ndim != 1:
        raise DataError("shank signals must be 1-D and of equal length")
    if len(right) < 3:
        return GaitEvents()
    r_to, r_hs = _swing_events(right, sample_rate_hz, params)
    l_to, l_hs = _swing_events(left, sample_rate_hz, params)

    cycles = []
    for h0, h1 in zip(r_hs, r_hs[1:]):
        lto = l_to[(l_to > h0) & (l_to < h1)]
        if not len(lto):
            continue
        lto = int(lto[0])
        lhs = l_hs[(l_hs > lto) & (l_hs < h1)]
        if not len(lhs):
            continue
        lhs = int(lhs[0])
        rto = r_to[(r_to > lhs) & (r_to < h1)]
        if not len(rto):
            continue
        cycles.append((int(h0), lto, lhs, int(rto[-1]), int(h1)))
    events = GaitEvents(cycles)
    events.validate(len(right))
    return events


def segment_cycles(trial: RawTrial, events: GaitEvents) -> list[np.ndarray]:
    events.validate(trial.samples.shape[0])
    return [trial.samples[ev[0]:ev[-1]] for ev in events.cycles]


def resample_cycle(cycle, length: int = CYCLE_LENGTH) -> np.ndarray:
    """Linearly interpolate every channel onto ``length`` points over ``[0, n-1]``."""
    x = np.asarray(cycle, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise LengthError(f"cannot resample a cycle of {n} samples")
    pos = np.linspace(0.0, n - 1, length)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = (pos - i0)[:, None]
    return x[i0] * (1.0 - frac) + x[i0 + 1] * frac


@dataclass
class Dataset:
    """Fixed-length labelled gait cycles stacked as ``data[N, L, C]``."""

    data: np.ndarray
    subject_ids: list[str]
    sexes: list[str]
    weights: np.ndarray
    trial_ids: list[str]
    cycle_index: list[int]
    subjects: list[tuple[str, str]]
    channel_names: list[str]
    channel_stats: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        n = self.data.shape[0]
        if self.data.ndim != 3:
            raise DataError("dataset data must be [N, L, C]")
        for name in ("subject_ids", "sexes", "trial_ids", "cycle_index"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} has wrong length")
        if len(self.weights) != n:
            raise DataError("weights has wrong length")
        roster = dict(self.subjects)
        for sid, sex in zip(self.subject_ids, self.sexes):
            if roster.get(sid) != sex:
                raise DataError(f"cycle subject {sid!r} ({sex}) not in roster")
        if self.channel_stats is not None:
            mean, std = (np.asarray(a, dtype=float) for a in self.channel_stats)
            if np.any(std <= 0):
                raise DataError("channel_stats std must be positive")
            self.channel_stats = (mean, std)

    def __len__(self):
        return self.data.shape[0]

    @property
    def cycle_length(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    @property
    def is_female(self) -> np.ndarray:
        return np.array([s == "female" for s in self.sexes])

    def cycle(self, i: int) -> GaitCycle:
        return GaitCycle(self.data[i], self.subject_ids[i], self.sexes[i],
                         float(self.weights[i]), self.trial_ids[i], self.cycle_index[i])

    @property
    def cycles(self) -> list[GaitCycle]:
        return [self.cycle(i) for i in range(len(self))]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        sids = [self.subject_ids[i] for i in idx]
        keep = set(sids)
        return Dataset(
            self.data[idx], sids, [self.sexes[i] for i in idx], self.weights[idx],
            [self.trial_ids[i] for i in idx], [self.cycle_index[i] for i in idx],
            [s for s in self.subjects if s[0] in keep], list(self.channel_names),
            self.channel_stats)

    def select_subjects(self, subject_ids: Iterable[str]) -> "Dataset":
        wanted = set(subject_ids)
        return self.subset([i for i, s in enumerate(self.subject_ids) if s in wanted])

    def trials(self) -> dict[str, np.ndarray]:
        """Cycle indices grouped by trial id, in first-appearance order."""
        out: dict[str, list[int]] = {}
        for i, t in enumerate(self.trial_ids):
            out.setdefault(t, []).append(i)
        return {t: np.array(v) for t, v in out.items()}

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": FORMAT_VERSION,
            "n_cycles": len(self),
            "cycle_length": self.cycle_length,
            "n_channels": self.n_channels,
            "channel_names": list(self.channel_names),
            "subjects": [{"id": s, "sex": x} for s, x in self.subjects],
            "labels": [
                {"cycle_index": int(self.cycle_index[i]), "subject_id": self.subject_ids[i],
                 "trial_id": self.trial_ids[i], "weight_kg": float(self.weights[i]),
                 "sex": self.sexes[i]}
                for i in range(len(self))
            ],
        }
        if self.channel_stats is not None:
            manifest["channel_stats"] = {"mean": self.channel_stats[0].tolist(),
                                         "std": self.channel_stats[1].tolist()}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
        self.data.astype("<f4").tofile(path / "cycles.f32")
        return path

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read dataset manifest in {path}: {exc}") from exc
        shape = (manifest["n_cycles"], manifest["cycle_length"], manifest["n_channels"])
        raw = np.fromfile(path / "cycles.f32", dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise DataError(f"cycles.f32 holds {raw.size} values, expected {np.prod(shape)}")
        labels = manifest["labels"]
        stats = manifest.get("channel_stats")
        return cls(
            raw.reshape(shape).astype(float),
            [r["subject_id"] for r in labels], [r["sex"] for r in labels],
            np.array([r["weight_kg"] for r in labels], dtype=float),
            [r["trial_id"] for r in labels], [int(r["cycle_index"]) for r in labels],
            [(s["id"], s["sex"]) for s in manifest["subjects"]],
            manifest["channel_names"],
            None if stats is None else (np.array(stats["mean"]), np.array(stats["std"])),
        )


def build_dataset(trials: Sequence[RawTrial], params: PipelineParams = PipelineParams()) -> Dataset:
    """Filter, detect, segment and resample every trial into one Dataset."""
    if not trials:
        raise ParameterError("build_dataset needs at least one trial")
    names = channel_names(trials[0].sensors)
    blocks, sids, sexes, weights, tids, cidx = [], [], [], [], [], []
    roster: dict[str, str] = {}
    for trial in trials:
        if list(trial.sensors) != list(trials[0].sensors):
            raise DataError(f"trial {trial.trial_id} has a different sensor layout")
        if roster.setdefault(trial.subject_id, trial.sex) != trial.sex:
            raise DataError(f"subject {trial.subject_id} has conflicting sex labels")
        filtered = lowpass_trial(trial, params.cutoff_hz)
        events = detect_gait_events(
            filtered.channel(params.right_shank, SAGITTAL_GYRO),
            filtered.channel(params.left_shank, SAGITTAL_GYRO),
            trial.sample_rate_hz, params.detection)
        if not len(events):
            logger.warning("trial %s yielded no gait cycles", trial.trial_id)
            continue
        for k, raw in enumerate(segment_cycles(filtered, events)):
            blocks.append(resample_cycle(raw, params.cycle_length))
            sids.append(trial.subject_id)
            sexes.append(trial.sex)
            weights.append(trial.weight_kg)
            tids.append(trial.trial_id)
            cidx.append(k)
    data = (np.stack(blocks) if blocks
            else np.zeros((0, params.cycle_length, len(names))))
    return Dataset(data, sids, sexes, np.array(weights), tids, cidx,
                   list(roster.items()), names)


def normalize(dataset: Dataset, stats=None) -> Dataset:
    """Per-channel z-score.  Without ``stats`` they are estimated from ``dataset``."""
    if stats is None:
        if not len(dataset):
            raise ParameterError("cannot estimate channel statistics of an empty dataset")
        flat = dataset.data.reshape(-1, dataset.n_channels)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        # degenerate channels are centred only
        std = np.where(std < 1e-8, 1.0, std)
    else:
        mean, std = (np.asarray(a, dtype=float) for a in stats)
    out = Dataset(
        (dataset.data - mean) / std, list(dataset.subject_ids), list(dataset.sexes),
        dataset.weights.copy(), list(dataset.trial_ids), list(dataset.cycle_index),
        list(dataset.subjects), list(dataset.channel_names), (mean, std))
    return out


def denormalize(dataset: Dataset) -> np.ndarray:
    if dataset.channel_stats is None:
        raise ParameterError("dataset carries no channel statistics")
    mean, std = dataset.channel_stats
    return dataset.data * std + mean
