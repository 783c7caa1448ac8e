"""Posterior post-processing: onset binarization and onset-gated decoding
of frame-level technique activations into events."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import IPTEvent


@dataclass(frozen=True)
class DecodeConfig:
    onset_threshold: float = 0.5
    frame_threshold: float = 0.5
    min_event_frames: int = 1

    def __post_init__(self):
        if not (0 < self.onset_threshold < 1 and 0 < self.frame_threshold < 1):
            raise ValueError("thresholds must lie in (0, 1)")


def binarize_onsets(onset: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold the onset posterior; the boundary value counts as onset."""
    return (np.asarray(onset).reshape(-1) >= threshold).astype(np.int8)


def decode_frames(y_ipt: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Elementwise >= thresholding for frame-level scoring."""
    return (np.asarray(y_ipt) >= threshold).astype(np.int8)


def decode_events(
    y_ipt: np.ndarray,
    onset_mask: np.ndarray,
    cfg: DecodeConfig = DecodeConfig(),
    frame_rate: float = 75.0,
    y_pitch: np.ndarray | None = None,
    pitch_offset: int = 0,
) -> list[IPTEvent]:
    """Decode technique activations into events, gated by onsets.

    Per class independently: an event starts at frame t only when the
    activation crosses the frame threshold AND the onset mask fires at
    that exact frame. Once started it continues through consecutive
    above-threshold frames (onsets no longer required), ending at the
    first below-threshold frame. A NEW onset inside an ongoing run (a
    rising edge of the onset mask, so consecutive onset-positive frames
    count as one detection) closes the current event and opens a new one.
    Active runs never gated by an onset produce no event.

    When ``y_pitch`` is given, each event carries the argmax pitch bin over
    its span, shifted by ``pitch_offset`` to MIDI.
    """
    y_ipt = np.asarray(y_ipt)
    onset_mask = np.asarray(onset_mask).reshape(-1).astype(bool)
    n_time, n_classes = y_ipt.shape
    if onset_mask.shape[0] != n_time:
        raise ValueError(f"onset mask length {onset_mask.shape[0]} != n_time {n_time}")
    active = y_ipt >= cfg.frame_threshold
    rising = onset_mask.copy()
    rising[1:] &= ~onset_mask[:-1]

    events = []
    for c in range(n_classes):
        start = None
        for t in range(n_time):
            if active[t, c]:
                if start is None:
                    if onset_mask[t]:
                        start = t
                elif rising[t]:
                    events.append(_emit(c, start, t, frame_rate, cfg, y_pitch, pitch_offset))
                    start = t
            else:
                if start is not None:
                    events.append(_emit(c, start, t, frame_rate, cfg, y_pitch, pitch_offset))
                    start = None
        if start is not None:
            events.append(_emit(c, start, n_time, frame_rate, cfg, y_pitch, pitch_offset))

    events = [e for e in events if e is not None]
    events.sort(key=lambda e: (e.onset, e.label))
    return events


def _emit(c, t_start, t_end, frame_rate, cfg, y_pitch, pitch_offset):
    if t_end - t_start < cfg.min_event_frames:
        return None
    pitch = None
    if y_pitch is not None:
        span = np.asarray(y_pitch)[t_start:t_end]
        pitch = int(span.sum(axis=0).argmax()) + pitch_offset
    return IPTEvent(c, t_start / frame_rate, t_end / frame_rate, pitch)
