"""STFT mask-estimation separator, parameter vectors and checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .signals import Spectrogram, istft, stft


class SeparationDiverged(FloatingPointError):
    pass


@dataclass
class SeparatorConfig:
    n_out: int = 3
    feature: str = "log-magnitude"
    hidden_width: int = 64
    n_blocks: int = 2
    kernel_size: int = 5
    mask_activation: str = "sigmoid"
    zero_init_output: bool = False
    fft_size: int = 256
    win_size: int = 256
    hop: int = 64

    def __post_init__(self):
        if self.n_out < 2:
            raise ValueError("n_out must be >= 2")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.feature not in ("log-magnitude", "magnitude"):
            raise ValueError(f"unknown feature {self.feature!r}")
        if self.mask_activation not in ("sigmoid", "relu"):
            raise ValueError(f"unknown mask_activation {self.mask_activation!r}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def mixture_consistency(raw: torch.Tensor, mix: torch.Tensor) -> torch.Tensor:
    """Spread the residual ``mix - sum(raw)`` evenly over the N channels."""
    if raw.shape[0] != mix.shape[0] or raw.shape[-1] != mix.shape[-1]:
        raise ValueError(f"shape mismatch: sources {tuple(raw.shape)} vs mixture {tuple(mix.shape)}")
    residual = mix - raw.sum(dim=1)
    return raw + residual.unsqueeze(1) / raw.shape[1]


class _Block(nn.Module):
    """Feed-forward, gated temporal conv, layer norm; residual around each."""

    def __init__(self, width: int, kernel_size: int):
        super().__init__()
        self.ff = nn.Sequential(nn.Linear(width, 2 * width), nn.SiLU(), nn.Linear(2 * width, width))
        self.conv = nn.Conv1d(width, 2 * width, kernel_size, padding=kernel_size // 2)
        self.norm = nn.LayerNorm(width)

    def forward(self, h):  # h: (B, frames, width)
        h = h + self.ff(h)
        h = h + nn.functional.glu(self.conv(h.transpose(1, 2)), dim=1).transpose(1, 2)
        return self.norm(h)


class MaskSeparator(nn.Module):
    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Sequential(nn.Linear(cfg.n_bins, cfg.hidden_width), nn.LayerNorm(cfg.hidden_width))
        self.blocks = nn.ModuleList(_Block(cfg.hidden_width, cfg.kernel_size) for _ in range(cfg.n_blocks))
        self.head = nn.Linear(cfg.hidden_width, cfg.n_bins * cfg.n_out)
        if cfg.zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def features(self, spec: torch.Tensor) -> torch.Tensor:
        mag = spec.abs()
        if self.cfg.feature == "log-magnitude":
            return torch.log(mag + 1e-5)
        return mag

    def masks(self, spec: torch.Tensor) -> torch.Tensor:
        """(B, frames, bins) complex -> (B, N, frames, bins) real masks."""
        h = self.in_proj(self.features(spec))
        for block in self.blocks:
            h = block(h)
        logits = self.head(h)
        B, n_frames, _ = logits.shape
        logits = logits.reshape(B, n_frames, self.cfg.n_out, self.cfg.n_bins).permute(0, 2, 1, 3)
        if self.cfg.mask_activation == "sigmoid":
            return torch.sigmoid(logits)
        return torch.relu(logits)

    def forward(self, mix: torch.Tensor) -> torch.Tensor:
        """(B, T) mixtures -> (B, N, T) mixture-consistent sources."""
        cfg = self.cfg
        spec = stft(mix, cfg.fft_size, cfg.win_size, cfg.hop)
        masked = self.masks(spec.data) * spec.data.unsqueeze(1)
        raw = istft(Spectrogram(masked, cfg.fft_size, cfg.win_size, cfg.hop), mix.shape[-1])
        out = mixture_consistency(raw, mix)
        if not torch.isfinite(out).all():
            raise SeparationDiverged("separator produced non-finite outputs (training diverged?)")
        return out


@dataclass(frozen=True)
class ParameterVector:
    """Flat snapshot of a module's parameters plus a ``(name, shape)`` index."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 1 or self.data.numel() != sum(int(np.prod(s)) for s in self.shapes):
            raise ValueError("parameter data does not match the shape index")

    @property
    def index(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple(zip(self.names, self.shapes))

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterVector":
        named = list(module.named_parameters())
        data = torch.cat([p.detach().reshape(-1) for _, p in named]).clone()
        return cls(tuple(n for n, _ in named), tuple(tuple(p.shape) for _, p in named), data)

    def tensors(self) -> dict[str, torch.Tensor]:
        out, offset = {}, 0
        for name, shape in self.index:
            size = int(np.prod(shape))
            out[name] = self.data[offset : offset + size].reshape(shape)
            offset += size
        return out

    def load_into(self, module: nn.Module) -> nn.Module:
        own = dict(module.named_parameters())
        if set(own) != set(self.names):
            raise ValueError("parameter index does not match module")
        with torch.no_grad():
            for name, t in self.tensors().items():
                if own[name].shape != t.shape:
                    raise ValueError(f"shape mismatch for {name}")
                own[name].copy_(t)
        return module

    def same_index(self, other: "ParameterVector") -> bool:
        return self.index == other.index

    def with_data(self, data: torch.Tensor) -> "ParameterVector":
        return ParameterVector(self.names, self.shapes, data)


def build_model(cfg: SeparatorConfig, dtype=torch.float32) -> MaskSeparator:
    return MaskSeparator(cfg).to(dtype)


def random_init(cfg: SeparatorConfig, seed: int, dtype=torch.float32) -> ParameterVector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = build_model(cfg, dtype)
    return ParameterVector.from_module(model)


_MODEL_CACHE: dict[tuple, MaskSeparator] = {}


def separate(params: ParameterVector, batch: torch.Tensor, cfg: SeparatorConfig) -> torch.Tensor:
    """Functional forward pass; differentiable w.r.t. ``params.data``."""
    key = (cfg.digest(), params.data.dtype)
    model = _MODEL_CACHE.get(key)
    if model is None:
        model = _MODEL_CACHE[key] = build_model(cfg, params.data.dtype)
    return functional_call(model, params.tensors(), (batch.to(params.data.dtype),))


# checkpoint file: magic, u32 version, u64 header length, JSON header, raw little-endian data
_MAGIC = b"RMXSCKPT"
_VERSION = 1


def save_checkpoint(path: str | Path, params: ParameterVector, metadata: dict | None = None) -> None:
    arr = params.data.detach().cpu().numpy()
    dtype = {np.float32: "<f4", np.float64: "<f8"}[arr.dtype.type]
    header = json.dumps(
        {
            "index": [[n, list(s)] for n, s in params.index],
            "dtype": dtype,
            "metadata": metadata or {},
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        fh.write(arr.astype(dtype).tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParameterVector, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a remixsep checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        arr = np.frombuffer(fh.read(), dtype=header["dtype"])
    names = tuple(n for n, _ in header["index"])
    shapes = tuple(tuple(s) for _, s in header["index"])
    data = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())
    return ParameterVector(names, shapes, data), header["metadata"]
