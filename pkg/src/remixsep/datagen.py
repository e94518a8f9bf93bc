"""Synthetic desk-scale mixture corpora and mixtures-of-mixtures.

Every example is drawn from its own generator seeded with ``(seed, index)``,
so serial and parallel synthesis produce identical corpora.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from scipy import signal as sps

from .signals import normalize_mixture, read_wav, write_wav

SOURCE_KINDS = ("tonal-chirp", "amplitude-modulated-noise", "filtered-noise-burst", "harmonic-stack")


@dataclass
class CorpusSpec:
    num_examples: int = 2000
    duration_s: float = 2.0
    sample_rate: int = 8000
    k_min: int = 2
    k_max: int = 2
    noise_snr_range_db: Optional[tuple[float, float]] = None
    seed: int = 0
    rms_range_db: tuple[float, float] = (-25.0, -15.0)

    def __post_init__(self):
        if self.noise_snr_range_db is not None:
            self.noise_snr_range_db = tuple(self.noise_snr_range_db)
        self.rms_range_db = tuple(self.rms_range_db)
        self.validate()

    def validate(self) -> None:
        if self.num_examples < 0:
            raise ValueError("num_examples must be non-negative")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.k_max > len(SOURCE_KINDS):
            raise ValueError(f"k_max is limited to {len(SOURCE_KINDS)} distinct source kinds")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ValueError("duration_s and sample_rate must be positive")
        lo, hi = self.rms_range_db
        if lo > hi:
            raise ValueError("rms_range_db must be (low, high)")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))

    @property
    def n_rows(self) -> int:
        """Rows in the stored source stack (an extra one for background noise)."""
        return self.k_max + (self.noise_snr_range_db is not None)


@dataclass
class SyntheticSource:
    kind: str
    params: dict = field(default_factory=dict)
    active: bool = True


@dataclass
class MixtureExample:
    index: int
    mixture: np.ndarray  # (T,)
    sources: np.ndarray  # (n_rows, T); inactive rows are exactly zero
    k_active: int
    kinds: list[str]
    snr_db: list[float]  # rms of each active source in dBFS, then noise SNR if present
    sample_rate: int


def _rms(x):
    return float(np.sqrt(np.mean(x**2)))


def _envelope(rng, n, sr):
    # slow random fade so sources are not perfectly stationary
    knots = rng.uniform(0.5, 1.0, size=5)
    return np.interp(np.arange(n), np.linspace(0, n - 1, 5), knots)


def _tonal_chirp(rng, n, sr):
    t = np.arange(n) / sr
    f0, f1 = rng.uniform(300.0, 1200.0, size=2)
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / t[-1] * t**2) + rng.uniform(0, 2 * np.pi)
    return np.sin(phase) * _envelope(rng, n, sr), {"f_start": f0, "f_end": f1}


def _harmonic_stack(rng, n, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(100.0, 250.0)
    vib_rate, vib_depth = rng.uniform(3.0, 6.0), rng.uniform(0.005, 0.02)
    inst = f0 * (1 + vib_depth * np.sin(2 * np.pi * vib_rate * t))
    phase = 2 * np.pi * np.cumsum(inst) / sr
    n_harm = int(rng.integers(4, 9))
    x = sum(np.sin(h * phase) / h for h in range(1, n_harm + 1) if h * f0 < 0.45 * sr)
    return x * _envelope(rng, n, sr), {"f0": f0, "n_harmonics": n_harm}


def _am_noise(rng, n, sr):
    t = np.arange(n) / sr
    rate = rng.uniform(2.0, 6.0)
    b, a = sps.butter(4, min(0.99, 2000.0 / (sr / 2)), btype="low")
    noise = sps.lfilter(b, a, rng.standard_normal(n))
    mod = 0.5 * (1 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    return noise * mod, {"mod_rate_hz": rate}


def _noise_burst(rng, n, sr):
    centre = rng.uniform(2000.0, 3200.0)
    lo, hi = centre - 400.0, min(centre + 400.0, 0.49 * sr)
    b, a = sps.butter(4, [lo / (sr / 2), hi / (sr / 2)], btype="band")
    noise = sps.lfilter(b, a, rng.standard_normal(n))
    gate = np.zeros(n)
    pos = int(rng.integers(0, max(1, n // 8)))
    while pos < n:
        on = int(rng.uniform(0.05, 0.3) * sr)
        gate[pos : pos + on] = 1.0
        pos += on + int(rng.uniform(0.05, 0.2) * sr)
    # short raised-cosine ramps avoid clicks at burst edges
    ramp = np.hanning(int(0.01 * sr) * 2 + 1)
    gate = np.convolve(gate, ramp / ramp.sum(), mode="same")
    return noise * gate, {"centre_hz": centre}


_GENERATORS = {
    "tonal-chirp": _tonal_chirp,
    "amplitude-modulated-noise": _am_noise,
    "filtered-noise-burst": _noise_burst,
    "harmonic-stack": _harmonic_stack,
}


def synthesize_example(spec: CorpusSpec, index: int) -> MixtureExample:
    rng = np.random.default_rng([spec.seed, index])
    n, sr = spec.n_samples, spec.sample_rate
    k = int(rng.integers(spec.k_min, spec.k_max + 1))
    kinds = [SOURCE_KINDS[i] for i in rng.permutation(len(SOURCE_KINDS))[:k]]

    sources = np.zeros((spec.n_rows, n), dtype=np.float32)
    record = []
    for row, kind in enumerate(kinds):
        x, _ = _GENERATORS[kind](rng, n, sr)
        level_db = rng.uniform(*spec.rms_range_db)
        x = x * (10 ** (level_db / 20) / max(_rms(x), 1e-12))
        sources[row] = x
        record.append(level_db)
    if spec.noise_snr_range_db is not None:
        snr = rng.uniform(*spec.noise_snr_range_db)
        speech = sources[:k].sum(0, dtype=np.float64)
        noise = rng.standard_normal(n)
        noise *= _rms(speech) / _rms(noise) * 10 ** (-snr / 20)
        sources[-1] = noise
        record.append(snr)

    mixture = sources.sum(axis=0)
    return MixtureExample(index, mixture, sources, k, kinds, record, sr)


def synthesize_corpus(spec: CorpusSpec, workers: int | None = None) -> Iterator[MixtureExample]:
    """Yield ``spec.num_examples`` examples in index order."""
    spec.validate()
    if workers is None:
        workers = int(os.environ.get("REMIXSEP_NUM_WORKERS", "0"))
    indices = range(spec.num_examples)
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            yield from pool.map(synthesize_example, [spec] * len(indices), indices, chunksize=16)
    else:
        for i in indices:
            yield synthesize_example(spec, i)


@dataclass
class Corpus:
    """In-memory split: stacked arrays, ready for batching."""

    mixtures: np.ndarray  # (M, T)
    sources: np.ndarray  # (M, n_rows, T)
    k_active: np.ndarray  # (M,)
    sample_rate: int

    def __len__(self):
        return len(self.mixtures)

    @classmethod
    def from_examples(cls, examples: Sequence[MixtureExample]) -> "Corpus":
        examples = list(examples)
        if not examples:
            raise ValueError("empty corpus")
        return cls(
            np.stack([e.mixture for e in examples]),
            np.stack([e.sources for e in examples]),
            np.array([e.k_active for e in examples]),
            examples[0].sample_rate,
        )

    @classmethod
    def synthesize(cls, spec: CorpusSpec) -> "Corpus":
        return cls.from_examples(synthesize_corpus(spec))


def write_corpus(spec: CorpusSpec, out_dir: str | Path, workers: int | None = None) -> Path:
    """Write ``mix/NNNNN.wav``, ``src/NNNNN_k.wav`` and ``manifest.jsonl``."""
    out = Path(out_dir)
    (out / "mix").mkdir(parents=True, exist_ok=True)
    (out / "src").mkdir(exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for ex in synthesize_corpus(spec, workers):
            name = f"{ex.index:05d}"
            write_wav(out / "mix" / f"{name}.wav", ex.mixture, ex.sample_rate)
            src_paths = []
            for k, row in enumerate(ex.sources):
                p = f"src/{name}_{k}.wav"
                write_wav(out / p, row, ex.sample_rate)
                src_paths.append(p)
            rec = {
                "index": ex.index,
                "mix": f"mix/{name}.wav",
                "sources": src_paths,
                "k": ex.k_active,
                "kinds": ex.kinds,
                "snr_db": ex.snr_db,
                "seed": spec.seed,
                "sample_rate": ex.sample_rate,
            }
            fh.write(json.dumps(rec) + "\n")
    with open(out / "corpus_spec.json", "w") as fh:
        json.dump(asdict(spec), fh, indent=2)
    return out


def read_corpus(split_dir: str | Path) -> Corpus:
    split_dir = Path(split_dir)
    mixes, srcs, ks = [], [], []
    sr = None
    with open(split_dir / "manifest.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            mix, sr = read_wav(split_dir / rec["mix"])
            mixes.append(mix)
            srcs.append(np.stack([read_wav(split_dir / p)[0] for p in rec["sources"]]))
            ks.append(rec["k"])
    if not mixes:
        raise ValueError(f"{split_dir}: manifest is empty")
    return Corpus(np.stack(mixes), np.stack(srcs), np.array(ks), sr)


def make_mom(batch: torch.Tensor, b_prime: int, normalize: bool = True):
    """Sum consecutive groups of ``b_prime`` mixtures.

    Returns ``(mom, provenance)`` where ``provenance[g]`` lists the batch
    indices summed into MoM ``g``.  With ``normalize`` the MoMs are also
    mean/std normalized and the result is the :class:`Normalized` tuple,
    whose ``mean``/``std`` undo it.
    """
    B = batch.shape[0]
    if b_prime < 2:
        raise ValueError("b_prime must be at least 2")
    if B % b_prime:
        raise ValueError(f"batch size {B} is not divisible by b_prime={b_prime}")
    mom = batch.reshape(B // b_prime, b_prime, *batch.shape[1:]).sum(dim=1)
    provenance = [tuple(range(g * b_prime, (g + 1) * b_prime)) for g in range(B // b_prime)]
    if normalize:
        return normalize_mixture(mom), provenance
    return mom, provenance
