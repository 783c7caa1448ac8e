"""Audio file loading with resampling to the 24 kHz mono contract."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .dataset import SAMPLE_RATE


def load_audio(path, target_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Load WAV (or FLAC, when the soundfile package is installed) as
    float32 mono at the target rate."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".wav":
        rate, data = wavfile.read(path)
        if data.dtype.kind == "i":
            data = data.astype(np.float32) / float(np.iinfo(data.dtype).max)
        elif data.dtype.kind == "u":
            info = np.iinfo(data.dtype)
            data = (data.astype(np.float32) - info.max / 2) / (info.max / 2)
        else:
            data = data.astype(np.float32)
    elif suffix == ".flac":
        try:
            import soundfile
        except ImportError:
            raise IOError(
                "FLAC input needs the optional 'soundfile' package; "
                "install it or convert to WAV"
            ) from None
        data, rate = soundfile.read(path, dtype="float32")
    else:
        raise IOError(f"unsupported audio format {suffix!r} (expected .wav or .flac)")

    if data.ndim == 2:
        data = data.mean(axis=1)
    return resample(data.astype(np.float32), rate, target_rate)


def resample(data: np.ndarray, rate: int, target_rate: int) -> np.ndarray:
    if rate == target_rate:
        return data
    frac = Fraction(target_rate, rate).limit_denominator(1000)
    return resample_poly(data, frac.numerator, frac.denominator).astype(np.float32)


def save_wav(path, data: np.ndarray, rate: int = SAMPLE_RATE):
    wavfile.write(path, rate, np.asarray(data, dtype=np.float32))
