"""
Synthetic gait signals and the segmentation pipeline
====================================================

Generates a few subjects, low-pass filters one trial, finds gait events on
the shank gyroscopes and resamples every stride to 128 samples.  Figures
land in ``notebook_out/``.
"""

# %%
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fairload.pipeline import build_dataset, detect_gait_events, lowpass_trial
from fairload.synthgait import GeneratorConfig, generate_dataset

out = Path("notebook_out")
out.mkdir(exist_ok=True)

# %% two men and two women, three load levels each, 24 channels (4 IMUs)
cfg = GeneratorConfig(n_male=2, n_female=2, n_channels=24, seed=1)
trials, truth = generate_dataset(cfg)
print(len(trials), "trials;", trials[0].samples.shape, "samples x channels")
print("sex channels:", cfg.resolved_sex_channels())
print("load channels:", cfg.resolved_load_channels())

# %% filter one trial and detect heel strikes / toe-offs
trial = trials[0]
filtered = lowpass_trial(trial)
right = filtered.channel("right_shank", 3)
left = filtered.channel("left_shank", 3)
events = detect_gait_events(right, left, trial.sample_rate_hz)
print("detected", len(events), "cycles; ground truth", len(truth.trials[trial.trial_id].events))
print("first cycle (HS, TO_opp, HS_opp, TO, HS):", events.cycles[0])

t = np.arange(len(right)) / trial.sample_rate_hz
fig, ax = plt.subplots(figsize=(8, 3))
ax.plot(t, trial.channel("right_shank", 3), lw=0.6, alpha=0.5, label="raw")
ax.plot(t, right, lw=1.2, label="filtered")
hs = [c[0] for c in events.cycles]
ax.plot(t[hs], right[hs], "kv", label="heel strike")
ax.set_xlabel("time [s]")
ax.set_ylabel("shank gyro [rad/s]")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(out / "events.svg")

# %% every stride becomes a [128, C] cycle
ds = build_dataset(trials)
print(ds.data.shape, "cycles from", len(ds.subjects), "subjects")

# mean cycle of one load channel per weight: heavier loads swing wider
ch = cfg.resolved_load_channels()[0]
fig, ax = plt.subplots(figsize=(5, 3))
for w in sorted(set(ds.weights)):
    ax.plot(ds.data[ds.weights == w, :, ch].mean(axis=0), label=f"{w} kg")
ax.set_xlabel("% gait cycle (resampled)")
ax.set_title(ds.channel_names[ch])
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(out / "load_channel.svg")
