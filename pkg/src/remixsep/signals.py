"""Waveform containers, STFT/iSTFT and mixture normalization.

Tensors follow a fixed shape convention throughout the package:

* waveform batch: ``(B, T)``
* source stack: ``(B, N, T)``
* spectrogram data: ``(..., frames, bins)`` complex

The transforms are written with plain torch ops (``unfold`` / ``fold`` and
``rfft``) so they are differentiable and the padding rule is explicit.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

EPS = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass(frozen=True)
class WaveBatch:
    data: torch.Tensor  # (B, T)
    sample_rate: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"expected (B, T) batch, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("batch contains non-finite values")


@dataclass(frozen=True)
class SourceStack:
    data: torch.Tensor  # (B, N, T)
    sample_rate: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1] < 1:
            raise ValueError(f"expected (B, N, T) stack, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("source stack contains non-finite values")


@dataclass(frozen=True)
class Spectrogram:
    data: torch.Tensor  # (..., frames, bins) complex
    fft_size: int
    win_size: int
    hop: int

    def __post_init__(self):
        _check_window(self.fft_size, self.win_size, self.hop)

    @property
    def n_frames(self) -> int:
        return self.data.shape[-2]


def _check_window(fft_size: int, win_size: int, hop: int) -> None:
    if min(fft_size, win_size, hop) <= 0:
        raise ValueError("fft_size, win_size and hop must be positive")
    if not hop <= win_size <= fft_size:
        raise ValueError(f"need hop <= win_size <= fft_size, got {hop}/{win_size}/{fft_size}")


def analysis_window(fft_size: int, win_size: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Periodic Hann of ``win_size`` centred in ``fft_size`` zeros."""
    win = torch.hann_window(win_size, periodic=True, dtype=dtype, device=device)
    left = (fft_size - win_size) // 2
    return F.pad(win, (left, fft_size - win_size - left))


def stft(x: torch.Tensor, fft_size: int = 256, win_size: int = 256, hop: int = 64) -> Spectrogram:
    """Short-time Fourier transform over the last axis.

    The signal is padded by ``fft_size // 2`` on both sides (reflection when
    long enough, zeros otherwise), so the frame count is
    ``floor((T + 2 * (fft_size // 2) - fft_size) / hop) + 1`` and every
    original sample is covered by the window.
    """
    _check_window(fft_size, win_size, hop)
    x = torch.as_tensor(x)
    T = x.shape[-1]
    if T < win_size:
        raise ValueError(f"signal length {T} is shorter than win_size {win_size}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, T)
    pad = fft_size // 2
    mode = "reflect" if T > pad else "constant"
    flat = F.pad(flat, (pad, pad), mode=mode)
    frames = flat[:, 0].unfold(-1, fft_size, hop)  # (M, frames, fft)
    win = analysis_window(fft_size, win_size, dtype=x.dtype, device=x.device)
    spec = torch.fft.rfft(frames * win, n=fft_size, dim=-1)
    return Spectrogram(spec.reshape(*lead, *spec.shape[-2:]), fft_size, win_size, hop)


def istft(spec: Spectrogram, length: int) -> torch.Tensor:
    """Windowed overlap-add inverse of :func:`stft`, trimmed/padded to ``length``."""
    fft_size, win_size, hop = spec.fft_size, spec.win_size, spec.hop
    data = spec.data
    if data.shape[-1] != fft_size // 2 + 1:
        raise ValueError(
            f"spectrogram has {data.shape[-1]} bins, expected {fft_size // 2 + 1} for fft_size {fft_size}"
        )
    lead = data.shape[:-2]
    n_frames = data.shape[-2]
    frames = torch.fft.irfft(data.reshape(-1, n_frames, data.shape[-1]), n=fft_size, dim=-1)
    win = analysis_window(fft_size, win_size, dtype=frames.dtype, device=frames.device)
    frames = frames * win

    total = (n_frames - 1) * hop + fft_size
    ola = F.fold(frames.transpose(1, 2), output_size=(1, total), kernel_size=(1, fft_size), stride=(1, hop))
    wsum = F.fold(
        (win**2).expand(1, n_frames, fft_size).transpose(1, 2),
        output_size=(1, total),
        kernel_size=(1, fft_size),
        stride=(1, hop),
    )
    ola, wsum = ola.reshape(ola.shape[0], total), wsum.reshape(total)

    pad = fft_size // 2
    stop = min(total, pad + length)
    if (wsum[pad:stop] < 1e-10).any():
        raise ValueError("window/hop combination violates the overlap-add (NOLA) condition")
    y = ola[:, pad:stop] / wsum[pad:stop]
    if y.shape[-1] < length:
        y = F.pad(y, (0, length - y.shape[-1]))
    return y.reshape(*lead, length)


class Normalized(NamedTuple):
    wave: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor
    degenerate: torch.Tensor


def normalize_mixture(x: torch.Tensor, eps: float = EPS) -> Normalized:
    """Zero-mean, unit (population) std over the last axis.

    Silent inputs (std <= eps) come back as zeros with ``std`` recorded as
    ``eps`` and ``degenerate`` set.
    """
    x = torch.as_tensor(x)
    mean = x.mean(dim=-1, keepdim=True)
    std = x.std(dim=-1, unbiased=False, keepdim=True)
    degenerate = std <= eps
    std = torch.where(degenerate, torch.full_like(std, eps), std)
    wave = torch.where(degenerate, torch.zeros_like(x), (x - mean) / std)
    return Normalized(wave, mean, std, degenerate.squeeze(-1))


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono WAV as float32; 16-bit PCM is scaled into [-1, 1)."""
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: only mono audio is supported")
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0, sr
    if data.dtype == np.float32:
        return data, sr
    raise ValueError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int, pcm16: bool = False) -> None:
    samples = np.asarray(samples)
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(str(path), sample_rate, data)
