"""Seeded synthetic gait trials with embedded ground-truth events.

Every channel is a function of a piecewise-linear gait phase whose knots sit
exactly on the embedded event samples.  Sagittal shank gyroscopes carry an
event waveform (swing bump, stance hump, dips at heel strike and toe-off);
all other channels are fixed three-harmonic templates.  On top of the
template the generator layers load-dependent amplitude, sex-dependent
cadence and channel offsets, subject random effects and white noise.

Random streams are Philox generators keyed by ``(seed, sex, subject, ...)``
so adding subjects of one sex never changes draws for existing subjects.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .pipeline import (CHANNELS_PER_SENSOR, SAGITTAL_GYRO, Dataset, GaitEvents,
                       PipelineParams, RawTrial, build_dataset)

SENSOR_PRIORITY = (
    "right_shank", "left_shank", "sacrum", "sternum", "right_thigh", "left_thigh",
    "t6", "right_foot", "right_upper_arm", "left_upper_arm", "right_forearm",
    "left_forearm",
)

# fractions of the stride at which (rhs, lto, lhs, rto) occur
EVENT_FRACTIONS = (0.0, 0.1, 0.5, 0.6)
N_HARMONICS = 3
TEMPLATE_SEED = 20250301

SWING_PEAK = 3.0
STANCE_PEAK = 0.4
DIP_DEPTH = 1.0
DIP_WIDTH = 0.05
EVENT_GAP = 0.1


@dataclass
class GeneratorConfig:
    n_male: int = 4
    n_female: int = 4
    trials_per_condition: int = 1
    weights_kg: list[float] = field(default_factory=lambda: [4.5, 13.6, 22.7])
    cycles_per_trial: int = 8
    sample_rate_hz: float = 80.0
    n_channels: int = 72
    base_stride_hz: float = 0.9
    weight_amplitude_gain: float = 0.03
    sex_cadence_delta_hz: float = 0.05
    sex_channel_offset: float = 0.8
    sex_channels: list[int] | None = None
    load_channels: list[int] | None = None
    subject_variability_std: float = 0.1
    cycle_jitter_std: float = 0.01
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.n_male, self.n_female) < 0:
            raise ParameterError("subject counts must be >= 0")
        if self.n_male + self.n_female == 0:
            raise ParameterError("at least one subject is required")
        if not self.weights_kg:
            raise ParameterError("at least one weight level is required")
        if any(w < 0 for w in self.weights_kg):
            raise ParameterError("weights must be non-negative")
        if self.trials_per_condition < 1 or self.cycles_per_trial < 1:
            raise ParameterError("trials_per_condition and cycles_per_trial must be >= 1")
        if self.noise_std < 0 or self.subject_variability_std < 0 or self.cycle_jitter_std < 0:
            raise ParameterError("standard deviations must be >= 0")
        if self.n_channels % CHANNELS_PER_SENSOR or self.n_channels < 2 * CHANNELS_PER_SENSOR:
            raise ParameterError("n_channels must be a multiple of 6 and cover both shanks")
        if self.n_channels > CHANNELS_PER_SENSOR * len(SENSOR_PRIORITY):
            raise ParameterError("at most 72 channels are supported")
        if self.sample_rate_hz <= 0 or self.base_stride_hz <= 0:
            raise ParameterError("rates must be positive")

    @property
    def sensors(self) -> tuple[str, ...]:
        return SENSOR_PRIORITY[: self.n_channels // CHANNELS_PER_SENSOR]

    @property
    def event_channels(self) -> tuple[int, int]:
        return SAGITTAL_GYRO, CHANNELS_PER_SENSOR + SAGITTAL_GYRO

    def resolved_load_channels(self) -> list[int]:
        if self.load_channels is not None:
            return sorted(self.load_channels)
        # trunk and thigh sensors (everything past the shanks), accelerometer axes
        return [c for c in range(2 * CHANNELS_PER_SENSOR, self.n_channels)
                if c % CHANNELS_PER_SENSOR < 3]

    def resolved_sex_channels(self) -> list[int]:
        if self.sex_channels is not None:
            return sorted(self.sex_channels)
        # half overlaps the load channels so sex and load are entangled
        load = self.resolved_load_channels()
        other = [c for c in range(self.n_channels)
                 if c not in load and c not in self.event_channels]
        return sorted(load[: max(1, len(load) // 2)] + other[: max(1, len(other) // 4)])

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrialTruth:
    trial_id: str
    events: GaitEvents
    stride_hz: list[float]
    amplitude: float


@dataclass
class GroundTruth:
    trials: dict[str, TrialTruth] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            tid: {"events": [list(e) for e in t.events.cycles],
                  "stride_hz": t.stride_hz, "amplitude": t.amplitude}
            for tid, t in self.trials.items()
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def _stream(*key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=key[0] & (2**64 - 1), spawn_key=key[1:])
    return np.random.Generator(np.random.Philox(seq))


def _harmonic_table(n_channels: int):
    rng = _stream(TEMPLATE_SEED, n_channels)
    amps = rng.uniform(0.2, 1.0, size=(n_channels, N_HARMONICS)) / np.arange(1, N_HARMONICS + 1)
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_channels, N_HARMONICS))
    levels = rng.normal(0.0, 0.5, size=n_channels)
    return amps, phases, levels


def _wrapped(d):
    return d - np.round(d)


def shank_gyro_waveform(phase) -> np.ndarray:
    """Sagittal angular velocity (rad/s) of the right shank at gait ``phase``.

    Heel strike sits at integer phase, toe-off at fraction 0.6.  Both events
    are strict local minima; mid-swing (fraction 0.8) is the global maximum.
    The left shank uses ``phase + 0.5``.
    """
    frac = np.mod(phase, 1.0)
    to, g = EVENT_FRACTIONS[3], EVENT_GAP
    # flat within EVENT_GAP of each event so the dips stay symmetric after filtering
    swing_u = np.clip((frac - to - g) / (1 - to - 2 * g), 0.0, 1.0)
    stance_u = np.clip((frac - g) / (to - 2 * g), 0.0, 1.0)
    bump = np.where(frac >= to, SWING_PEAK * np.sin(np.pi * swing_u) ** 2,
                    STANCE_PEAK * np.sin(np.pi * stance_u) ** 2)
    dips = (np.exp(-(_wrapped(frac) / DIP_WIDTH) ** 2)
            + np.exp(-(_wrapped(frac - to) / DIP_WIDTH) ** 2))
    return bump - DIP_DEPTH * dips


def template_values(phase, n_channels: int) -> np.ndarray:
    """Noise- and effect-free channel values ``[len(phase), n_channels]``."""
    phase = np.asarray(phase, dtype=float)
    amps, phases, levels = _harmonic_table(n_channels)
    h = np.arange(1, N_HARMONICS + 1)
    arg = 2 * np.pi * phase[:, None, None] * h + phases[None]
    out = levels + np.sum(amps[None] * np.sin(arg), axis=2)
    out[:, SAGITTAL_GYRO] = shank_gyro_waveform(phase)
    out[:, CHANNELS_PER_SENSOR + SAGITTAL_GYRO] = shank_gyro_waveform(phase + 0.5)
    return out


def _phase_track(lengths):
    """Sample-wise phase and embedded events for strides ``lengths[0..K+1]``.

    ``lengths[0]`` is the partial lead-in stride and ``lengths[-1]`` the partial
    lead-out stride; the strides in between are the complete cycles.
    """
    starts = np.concatenate([[0], np.cumsum(lengths)])
    knots_t, knots_p = [], []
    for k, n in enumerate(lengths):
        for f in EVENT_FRACTIONS:
            knots_t.append(starts[k] + int(round(f * n)))
            knots_p.append(k - 1 + f)
    knots_t.append(starts[-1])
    knots_p.append(len(lengths) - 1)
    t0 = starts[0] + int(round(0.62 * lengths[0]))
    t1 = starts[-2] + int(round(0.3 * lengths[-1]))
    t = np.arange(t0, t1)
    phase = np.interp(t, knots_t, knots_p)
    knots_t = np.array(knots_t) - t0
    cycles = []
    for k in range(1, len(lengths) - 1):
        ev = knots_t[4 * k: 4 * k + 5]
        cycles.append(tuple(int(e) for e in ev))
    return phase, GaitEvents(cycles)


def _subject_effects(cfg: GeneratorConfig, sex_code: int, index: int):
    rng = _stream(cfg.seed, sex_code, index, 0)
    sv = cfg.subject_variability_std
    return {
        "stride": 0.1 * sv * rng.standard_normal(),
        "gain": 1.0 + sv * rng.standard_normal(cfg.n_channels),
        "offset": sv * rng.standard_normal(cfg.n_channels),
    }


def _make_trial(cfg, sex, sex_code, index, effects, weight_idx, rep):
    rng = _stream(cfg.seed, sex_code, index, 1, weight_idx, rep)
    weight = cfg.weights_kg[weight_idx]
    stride_hz = cfg.base_stride_hz + effects["stride"]
    if sex == "female":
        stride_hz += cfg.sex_cadence_delta_hz
    k = cfg.cycles_per_trial + 2
    per_cycle = stride_hz * (1.0 + cfg.cycle_jitter_std * rng.standard_normal(k))
    lengths = np.maximum(np.round(cfg.sample_rate_hz / per_cycle).astype(int), 10)
    phase, events = _phase_track(lengths)

    x = template_values(phase, cfg.n_channels)
    scale = np.ones(cfg.n_channels)
    shift = np.zeros(cfg.n_channels)
    load = cfg.resolved_load_channels()
    amplitude = 1.0 + cfg.weight_amplitude_gain * weight
    scale[load] *= amplitude
    shift[cfg.resolved_sex_channels()] += (0.5 if sex == "female" else -0.5) * cfg.sex_channel_offset
    free = np.ones(cfg.n_channels, dtype=bool)
    free[list(cfg.event_channels)] = False
    scale[free] *= effects["gain"][free]
    shift[free] += effects["offset"][free]
    _, _, levels = _harmonic_table(cfg.n_channels)
    # scale the oscillation about each channel's resting level
    x = levels + (x - levels) * scale + shift
    if cfg.noise_std > 0:
        x = x + cfg.noise_std * rng.standard_normal(x.shape)
    sid = f"{'M' if sex == 'male' else 'F'}{index:02d}"
    tid = f"{sid}_w{weight_idx}_r{rep}"
    trial = RawTrial(x, sid, sex, weight, tid, cfg.sensors, cfg.sample_rate_hz)
    truth = TrialTruth(tid, events, [float(v) for v in per_cycle[1:-1]], float(amplitude))
    return trial, truth


def generate_dataset(config: GeneratorConfig):
    """All trials for ``config`` in deterministic subject/weight/repeat order."""
    trials, truth = [], GroundTruth()
    for sex, code, count in (("male", 0, config.n_male), ("female", 1, config.n_female)):
        for i in range(count):
            effects = _subject_effects(config, code, i)
            for w in range(len(config.weights_kg)):
                for rep in range(config.trials_per_condition):
                    trial, tt = _make_trial(config, sex, code, i, effects, w, rep)
                    trials.append(trial)
                    truth.trials[tt.trial_id] = tt
    return trials, truth


def generate_balanced_splits(config: GeneratorConfig,
                             params: PipelineParams = PipelineParams()):
    """Generate trials and push them through the preprocessing pipeline."""
    trials, truth = generate_dataset(config)
    return build_dataset(trials, params), truth
