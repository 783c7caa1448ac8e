"""Synthetic toy corpora for tests and capacity checks.

Each technique class and pitch bin is assigned its own sinusoid frequency,
so the stub encoder's band energies make the labels linearly recoverable.
"""

from __future__ import annotations

import numpy as np

from .dataset import (
    SAMPLE_RATE,
    WINDOW_SECONDS,
    ClassMap,
    IPTEvent,
    Sample,
    rasterize,
)
from .encoder import STUB_N_TIME


def class_tone_hz(c: int) -> float:
    return 400.0 + 750.0 * c


def pitch_tone_hz(p: int) -> float:
    return 6000.0 + 375.0 * p


def make_toy_dataset(
    n_samples: int = 20,
    n_ipt: int = 4,
    n_pitch: int = 12,
    seed: int = 0,
    n_frames: int = STUB_N_TIME,
) -> tuple[list[Sample], ClassMap]:
    """Generate fixed-length windows with tone-coded technique/pitch events."""
    rng = np.random.default_rng(seed)
    class_map = ClassMap(
        tuple(f"tech{c}" for c in range(n_ipt)),
        (60, 60 + n_pitch - 1),
    )
    t = np.arange(int(SAMPLE_RATE * WINDOW_SECONDS)) / SAMPLE_RATE

    samples = []
    for i in range(n_samples):
        events = []
        pos = 0.0
        while pos < WINDOW_SECONDS - 0.3:
            dur = float(rng.uniform(0.3, 1.0))
            end = min(pos + dur, WINDOW_SECONDS - 1e-3)
            c = int(rng.integers(n_ipt))
            p = int(rng.integers(n_pitch))
            events.append(IPTEvent(c, pos, end, 60 + p))
            pos = end
        wave = np.zeros_like(t, dtype=np.float32)
        for ev in events:
            span = (t >= ev.onset) & (t < ev.offset)
            wave[span] += np.sin(2 * np.pi * class_tone_hz(ev.label) * t[span]).astype(np.float32)
            wave[span] += 0.7 * np.sin(
                2 * np.pi * pitch_tone_hz(ev.pitch - 60) * t[span]
            ).astype(np.float32)
        wave += 0.01 * rng.standard_normal(len(t)).astype(np.float32)
        grid = rasterize(events, n_frames, class_map)
        samples.append(Sample(wave, grid, f"toy{i:03d}", 0.0))
    return samples, class_map
