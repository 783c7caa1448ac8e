"""Dataset ingestion: annotation loading, rasterization to frame grids,
audio segmentation, splits, and class-imbalance weights.

All annotations are normalized to a single CSV schema
(``onset_sec,offset_sec,technique,midi_pitch``) so one rasterizer serves
every corpus.
"""

from __future__ import annotations

import csv
import json
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 24000
WINDOW_SECONDS = 5.0
WINDOW_SAMPLES = int(SAMPLE_RATE * WINDOW_SECONDS)  # 120000
DEFAULT_FRAME_RATE = 75.0

# Technique vocabularies per corpus schema.
GUZHENG_TECH99_CLASSES = [
    "vibrato",
    "point note",
    "upward portamento",
    "downward portamento",
    "glissando",
    "tremolo",
    "plucks",
]
EG_SOLO_CLASSES = [
    "normal",
    "slide",
    "bend",
    "vibrato",
    "mute",
    "pull",
    "harmonic",
    "hammer",
    "tap",
]
CBF_CLASSES = [
    "vibrato",
    "tremolo",
    "trill",
    "flutter-tongue",
    "acciaccatura",
    "portamento",
    "glissando",
]

KNOWN_SCHEMAS = ("guzheng_tech99", "eg_solo", "cbf")


class AnnotationError(ValueError):
    """Malformed annotation file or row."""


class SchemaError(ValueError):
    """Annotation content does not fit the declared dataset schema."""


@dataclass(frozen=True)
class IPTEvent:
    """One labeled playing-technique interval."""

    label: int
    onset: float
    offset: float
    pitch: int | None = None

    def __post_init__(self):
        if not self.offset > self.onset:
            raise ValueError(
                f"event offset must exceed onset: [{self.onset}, {self.offset})"
            )
        if self.label < 0:
            raise ValueError(f"negative class label {self.label}")


@dataclass(frozen=True)
class ClassMap:
    """Class vocabulary: ordered technique names plus the pitch range."""

    ipt_names: tuple[str, ...]
    pitch_range: tuple[int, int]  # inclusive [midi_min, midi_max]
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        lo, hi = self.pitch_range
        if hi < lo:
            raise ValueError(f"empty pitch range {self.pitch_range}")

    @property
    def n_ipt(self) -> int:
        return len(self.ipt_names)

    @property
    def n_pitch(self) -> int:
        return self.pitch_range[1] - self.pitch_range[0] + 1

    @property
    def has_pitch(self) -> bool:
        # A single-bin pitch vocabulary marks a corpus without pitch labels.
        return self.n_pitch > 1

    def pitch_bin(self, midi: int) -> int:
        lo, hi = self.pitch_range
        if not lo <= midi <= hi:
            raise ValueError(f"MIDI pitch {midi} outside range [{lo}, {hi}]")
        return midi - lo

    def to_dict(self) -> dict:
        return {
            "ipt_names": list(self.ipt_names),
            "pitch_range": list(self.pitch_range),
            "frame_rate": self.frame_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMap":
        return cls(
            ipt_names=tuple(d["ipt_names"]),
            pitch_range=tuple(d["pitch_range"]),
            frame_rate=float(d.get("frame_rate", DEFAULT_FRAME_RATE)),
        )


def default_class_map(schema: str) -> ClassMap:
    """Built-in class map for each supported corpus schema."""
    if schema == "guzheng_tech99":
        return ClassMap(tuple(GUZHENG_TECH99_CLASSES), (36, 96))
    if schema == "eg_solo":
        return ClassMap(tuple(EG_SOLO_CLASSES), (40, 88))
    if schema == "cbf":
        # No pitch labels: single dummy bin, pitch loss disabled downstream.
        return ClassMap(tuple(CBF_CLASSES), (0, 0))
    raise SchemaError(f"unknown dataset schema {schema!r}; expected one of {KNOWN_SCHEMAS}")


@dataclass
class FrameGrid:
    """Per-frame binary targets: techniques, pitches, onsets, validity mask."""

    ipt: np.ndarray  # (n_time, n_ipt) in {0,1}
    pitch: np.ndarray  # (n_time, n_pitch) in {0,1}
    onset: np.ndarray  # (n_time,) in {0,1}
    frame_rate: float
    mask: np.ndarray  # (n_time,) in {0,1}

    @property
    def n_time(self) -> int:
        return self.ipt.shape[0]

    def validate(self):
        n = self.n_time
        assert self.pitch.shape[0] == n and self.onset.shape == (n,)
        assert self.mask.shape == (n,)
        for arr in (self.ipt, self.pitch, self.onset, self.mask):
            vals = np.unique(arr)
            assert np.isin(vals, (0, 1)).all(), "grid entries must be binary"
        # Padded frames carry no labels.
        invalid = self.mask == 0
        assert not self.ipt[invalid].any()
        assert not self.pitch[invalid].any()
        assert not self.onset[invalid].any()


@dataclass
class Sample:
    """One fixed-length training window with rasterized labels."""

    waveform: np.ndarray  # (WINDOW_SAMPLES,) float32 @ 24 kHz
    labels: FrameGrid
    source_id: str
    window_offset: float  # seconds into the source recording


@dataclass
class SplitPlan:
    """Cross-validation folds of recording ids."""

    folds: list[dict]  # each {"train": [...], "val": [...], "test": [...]}
    policy: str

    def validate(self):
        for fold in self.folds:
            train, val, test = set(fold["train"]), set(fold["val"]), set(fold["test"])
            assert not train & test and not train & val and not val & test, (
                "split ids overlap within a fold"
            )


def load_annotations(path, schema: str, class_map: ClassMap) -> list[IPTEvent]:
    """Read a normalized annotation CSV into sorted events.

    Header: ``onset_sec,offset_sec,technique,midi_pitch`` (midi_pitch may
    be empty). Unknown technique names are rejected against the class map.
    """
    if schema not in KNOWN_SCHEMAS:
        raise SchemaError(f"unknown dataset schema {schema!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    name_to_label = {n: i for i, n in enumerate(class_map.ipt_names)}

    events = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if not rows:
        return []
    start = 1 if rows[0] and rows[0][0].strip().lower() in ("onset_sec", "onset") else 0
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise AnnotationError(f"{path}:{lineno}: expected >= 3 fields, got {len(row)}")
        try:
            onset = float(row[0])
            offset = float(row[1])
        except ValueError as e:
            raise AnnotationError(f"{path}:{lineno}: bad time field ({e})") from None
        technique = row[2].strip()
        if technique not in name_to_label:
            raise SchemaError(
                f"{path}:{lineno}: unknown technique {technique!r} for schema {schema}"
            )
        pitch = None
        if len(row) >= 4 and row[3].strip():
            try:
                pitch = int(float(row[3]))
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: bad midi_pitch {row[3]!r}") from None
            class_map.pitch_bin(pitch)  # range check
        try:
            events.append(IPTEvent(name_to_label[technique], onset, offset, pitch))
        except ValueError as e:
            raise AnnotationError(f"{path}:{lineno}: {e}") from None
    events.sort(key=lambda e: (e.onset, e.label))
    return events


def save_annotations(events: list[IPTEvent], path, class_map: ClassMap):
    """Write events back to the normalized CSV schema."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["onset_sec", "offset_sec", "technique", "midi_pitch"])
        for e in sorted(events, key=lambda e: (e.onset, e.label)):
            w.writerow([
                f"{e.onset:.6f}",
                f"{e.offset:.6f}",
                class_map.ipt_names[e.label],
                "" if e.pitch is None else e.pitch,
            ])


def rasterize(events: list[IPTEvent], n_frames: int, class_map: ClassMap) -> FrameGrid:
    """Turn events into a frame grid.

    A frame is active for a class when its center time lies in
    [onset, offset). Onsets mark the single frame whose span
    [t/fr, (t+1)/fr) contains the event onset.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    fr = class_map.frame_rate
    duration = n_frames / fr
    ipt = np.zeros((n_frames, class_map.n_ipt), dtype=np.int8)
    pitch = np.zeros((n_frames, class_map.n_pitch), dtype=np.int8)
    onset = np.zeros(n_frames, dtype=np.int8)
    centers = (np.arange(n_frames) + 0.5) / fr

    for ev in events:
        if ev.onset < 0 or ev.onset >= duration:
            raise ValueError(f"event onset {ev.onset} outside [0, {duration})")
        if ev.label >= class_map.n_ipt:
            raise ValueError(f"label {ev.label} >= n_ipt {class_map.n_ipt}")
        active = (centers >= ev.onset) & (centers < ev.offset)
        ipt[active, ev.label] = 1
        if ev.pitch is not None and class_map.has_pitch:
            pitch[active, class_map.pitch_bin(ev.pitch)] = 1
        onset[int(ev.onset * fr)] = 1

    # An onset can land on a frame whose center misses the (short) event;
    # the grid invariant requires some class active wherever onset fires.
    ipt_any = ipt.any(axis=1)
    for t in np.flatnonzero(onset):
        if not ipt_any[t]:
            for ev in events:
                if int(ev.onset * fr) == t:
                    ipt[t, ev.label] = 1
                    if ev.pitch is not None and class_map.has_pitch:
                        pitch[t, class_map.pitch_bin(ev.pitch)] = 1
    return FrameGrid(ipt, pitch, onset, fr, np.ones(n_frames, dtype=np.int8))


def segment(
    waveform: np.ndarray,
    events: list[IPTEvent],
    class_map: ClassMap,
    source_id: str,
    frames_per_window: int,
    window_seconds: float = WINDOW_SECONDS,
) -> list[Sample]:
    """Cut a 24 kHz mono recording into consecutive fixed windows.

    The final short window is zero-padded; frames whose centers fall past
    the real audio are masked invalid. Events are shifted into window-local
    time and clipped at window edges (an event spanning a boundary becomes
    one clipped event per window).
    """
    waveform = np.asarray(waveform, dtype=np.float32)
    window_samples = int(round(window_seconds * SAMPLE_RATE))
    fr = class_map.frame_rate
    if len(waveform) < SAMPLE_RATE / fr:
        warnings.warn(f"{source_id}: audio shorter than one frame; no samples produced")
        return []

    n_windows = int(np.ceil(len(waveform) / window_samples))
    duration = len(waveform) / SAMPLE_RATE
    samples = []
    for w in range(n_windows):
        t0 = w * window_seconds
        t1 = t0 + window_seconds
        chunk = waveform[w * window_samples:(w + 1) * window_samples]
        if len(chunk) < window_samples:
            chunk = np.pad(chunk, (0, window_samples - len(chunk)))

        local = []
        for ev in events:
            on = max(ev.onset, t0)
            off = min(ev.offset, t1)
            if off <= on or on >= t1:
                continue
            local.append(IPTEvent(ev.label, on - t0, min(off - t0, window_seconds - 1e-9), ev.pitch))
        grid = rasterize(local, frames_per_window, class_map)

        # Frames centered beyond the real recording are padding.
        centers = t0 + (np.arange(frames_per_window) + 0.5) / fr
        grid.mask = (centers < duration).astype(np.int8)
        invalid = grid.mask == 0
        grid.ipt[invalid] = 0
        grid.pitch[invalid] = 0
        grid.onset[invalid] = 0
        samples.append(Sample(chunk, grid, source_id, t0))
    return samples


def make_splits(
    schema: str,
    seed: int,
    recording_ids: list[str] | None = None,
    performers: dict[str, str] | None = None,
    manifest_path=None,
) -> SplitPlan:
    """Build the evaluation splits for a corpus.

    Single-split corpora load their published split manifest (JSON mapping
    fold -> {train, val, test} id lists). The flute corpus is split by
    performer: 5 folds, each holding out 2 of the 10 players.
    """
    if schema in ("guzheng_tech99", "eg_solo"):
        if manifest_path is None:
            raise FileNotFoundError(
                f"{schema} uses its published split; pass manifest_path to the JSON manifest"
            )
        with open(manifest_path, encoding="utf-8") as f:
            raw = json.load(f)
        folds = [
            {"train": list(v["train"]), "val": list(v.get("val", [])), "test": list(v["test"])}
            for v in (raw.values() if isinstance(raw, dict) else raw)
        ]
        plan = SplitPlan(folds, policy=f"{schema}_published")
        plan.validate()
        return plan

    if schema == "cbf":
        if not performers:
            raise ValueError("CBF splits require performer metadata (recording_id -> performer)")
        players = sorted(set(performers.values()))
        if len(players) % 5 != 0:
            raise ValueError(f"CBF expects performer count divisible by 5, got {len(players)}")
        rng = random.Random(seed)
        shuffled = players[:]
        rng.shuffle(shuffled)
        per_fold = len(shuffled) // 5
        folds = []
        for k in range(5):
            test_players = set(shuffled[k * per_fold:(k + 1) * per_fold])
            test = sorted(r for r, p in performers.items() if p in test_players)
            train = sorted(r for r, p in performers.items() if p not in test_players)
            folds.append({"train": train, "val": [], "test": test})
        plan = SplitPlan(folds, policy="cbf_performer_5fold")
        plan.validate()
        return plan

    raise SchemaError(f"unknown dataset schema {schema!r}")


def class_weights(train_grids: list[FrameGrid], n_ipt: int | None = None) -> np.ndarray:
    """Positive-class weights from masked frame counts.

    w_c = clamp(neg_c / max(pos_c, 1), 1, 100); classes never seen clamp
    to the ceiling.
    """
    if not train_grids:
        raise ValueError("need at least one grid")
    if n_ipt is None:
        n_ipt = train_grids[0].ipt.shape[1]
    pos = np.zeros(n_ipt, dtype=np.float64)
    neg = np.zeros(n_ipt, dtype=np.float64)
    total_valid = 0
    for g in train_grids:
        valid = g.mask.astype(bool)
        total_valid += int(valid.sum())
        pos += g.ipt[valid].sum(axis=0)
        neg += (1 - g.ipt[valid]).sum(axis=0)
    if total_valid == 0:
        raise ValueError("no valid frames in training grids")
    return np.clip(neg / np.maximum(pos, 1.0), 1.0, 100.0)
