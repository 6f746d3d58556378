"""WAV reading and writing on top of :mod:`scipy.io.wavfile`.

Samples are exchanged as float64 arrays of shape ``(n, channels)`` in the
nominal range [-1, 1].
"""
from __future__ import annotations

import numpy as np
from scipy.io import wavfile

FORMATS = ("float32", "pcm16")


def read_wav(path):
    """Return ``(samples (n, ch) float64, sample_rate)``."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(float) - 128.0) / 128.0
    else:
        x = data.astype(float)
    if x.ndim == 1:
        x = x[:, None]
    return x, int(rate)


def write_wav(path, samples, rate: int, fmt: str = "float32") -> None:
    """Write ``samples`` ((n,) or (n, ch)) as 32-bit float or 16-bit PCM."""
    x = np.asarray(samples, dtype=float)
    if fmt == "float32":
        data = x.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}; use one of {FORMATS}")
    wavfile.write(path, int(rate), data)
