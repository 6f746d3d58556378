"""Hann-windowed STFT analysis and weighted overlap-add synthesis.

Spectrograms are plain complex arrays indexed ``(freq, frame, channel)``.
Multichannel PCM is ``(n_samples, n_channels)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .errors import InputTooShort, ShapeMismatch


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_len: int = 1024
    hop_len: int = 512
    window_kind: str = "hann"

    def __post_init__(self):
        if self.window_kind != "hann":
            raise ValueError(f"unsupported window {self.window_kind!r}")
        if self.hop_len <= 0 or self.window_len % self.hop_len:
            raise ValueError("hop_len must divide window_len")
        if self.window_len < 2 * self.hop_len:
            raise ValueError("window_len must be at least twice hop_len")

    @property
    def n_freq(self) -> int:
        return self.window_len // 2 + 1

    @property
    def hop_seconds(self) -> float:
        return self.hop_len / self.sample_rate

    @property
    def window(self) -> np.ndarray:
        # periodic Hann
        return get_window("hann", self.window_len, fftbins=True)

    def bin_frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.window_len, d=1.0 / self.sample_rate)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            return 0
        return 1 + (n_samples - self.window_len) // self.hop_len


def analyze(pcm, cfg: StftConfig) -> np.ndarray:
    """STFT of multichannel PCM.

    Parameters
    ----------
    pcm: ndarray (n_samples,) or (n_samples, n_channels)
    cfg: StftConfig

    Returns
    -------
    ndarray (n_freq, n_frames, n_channels), complex
        ``n_frames = 1 + (n_samples - window_len) // hop_len``; no padding.
    """
    pcm = np.asarray(pcm, dtype=float)
    if pcm.ndim == 1:
        pcm = pcm[:, None]
    if pcm.shape[1] < 1 or pcm.shape[0] < cfg.window_len:
        raise InputTooShort(
            f"need at least {cfg.window_len} samples, got {pcm.shape[0]}"
        )
    n_frames = cfg.n_frames(pcm.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(pcm, cfg.window_len, axis=0)
    frames = frames[:: cfg.hop_len][:n_frames]  # (J, M, L)
    spec = np.fft.rfft(frames * cfg.window, axis=-1)  # (J, M, I)
    return np.ascontiguousarray(spec.transpose(2, 0, 1))


def synthesize(spec, cfg: StftConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`analyze` for one channel.

    Each frame is inverse transformed, multiplied by the synthesis window and
    accumulated; the sum is divided by the accumulated squared window. Samples
    where that normalizer vanishes (the very first/last one) are set to zero.

    Parameters
    ----------
    spec: ndarray (n_freq, n_frames)

    Returns
    -------
    ndarray (window_len + (n_frames - 1) * hop_len,)
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != cfg.n_freq:
        raise ShapeMismatch(
            f"expected ({cfg.n_freq}, n_frames) spectrogram, got {spec.shape}"
        )
    win = cfg.window
    n_frames = spec.shape[1]
    length = cfg.window_len + max(n_frames - 1, 0) * cfg.hop_len
    out = np.zeros(length)
    norm = np.zeros(length)
    frames = np.fft.irfft(spec.T, n=cfg.window_len, axis=-1) * win
    for j in range(n_frames):
        sl = slice(j * cfg.hop_len, j * cfg.hop_len + cfg.window_len)
        out[sl] += frames[j]
        norm[sl] += win**2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


class OverlapAdd:
    """Streaming counterpart of :func:`synthesize`.

    Feed one spectrum per hop with :meth:`push`; each call returns the
    ``hop_len`` samples that no later frame can touch any more. The output is
    sample-identical to the batch synthesis of the same frames.
    """

    def __init__(self, cfg: StftConfig):
        self.cfg = cfg
        self._win = cfg.window
        self._acc = np.zeros(cfg.window_len)
        self._norm = np.zeros(cfg.window_len)

    def push(self, spectrum) -> np.ndarray:
        hop = self.cfg.hop_len
        frame = np.fft.irfft(spectrum, n=self.cfg.window_len) * self._win
        self._acc += frame
        self._norm += self._win**2
        out = self._acc[:hop].copy()
        norm = self._norm[:hop]
        nz = norm > 1e-10
        out[nz] /= norm[nz]
        out[~nz] = 0.0
        self._acc = np.concatenate([self._acc[hop:], np.zeros(hop)])
        self._norm = np.concatenate([self._norm[hop:], np.zeros(hop)])
        return out
