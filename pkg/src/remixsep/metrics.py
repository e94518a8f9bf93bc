"""SISDR evaluation and the 1S / kSi / MSi / TRF aggregates."""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

SISDR_CAP = 100.0


def sisdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Scale-invariant SDR in dB, clipped to +-SISDR_CAP."""
    y = np.asarray(reference, dtype=np.float64)
    y_hat = np.asarray(estimate, dtype=np.float64)
    ref_energy = np.dot(y, y)
    if ref_energy == 0:
        raise ValueError("SISDR is undefined for an all-zero reference")
    alpha = np.dot(y_hat, y) / ref_energy
    target = alpha * y
    num = np.dot(target, target)
    den = np.dot(target - y_hat, target - y_hat)
    if num == 0:
        return -SISDR_CAP
    if den == 0:
        return SISDR_CAP
    return float(np.clip(10 * np.log10(num / den), -SISDR_CAP, SISDR_CAP))


def sisdr_matrix(references: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    """(K, T) x (N, T) -> (K, N) pairwise SISDR."""
    return np.array([[sisdr(r, e) for e in estimates] for r in references])


def match_exhaustive(scores: np.ndarray) -> np.ndarray:
    """Injective map refs -> estimates maximising the summed score; ``out[k]`` = estimate index."""
    K, N = scores.shape
    best, best_val = None, -np.inf
    for combo in itertools.permutations(range(N), K):
        val = scores[np.arange(K), combo].sum()
        if val > best_val:
            best, best_val = combo, val
    return np.asarray(best)


def match_assignment(scores: np.ndarray) -> np.ndarray:
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return cols[np.argsort(rows)]


@dataclass
class EvalRecord:
    example_id: int
    k_active: int
    per_source_sisdr: list[float]
    mixture_sisdr: list[float]
    sisdri: list[float]
    matched: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.per_source_sisdr) == len(self.mixture_sisdr) == len(self.sisdri) == self.k_active):
            raise ValueError("per-source vectors must have length k_active")

    @property
    def score(self) -> float:
        """Absolute SISDR for single-source examples, SISDRi otherwise."""
        if self.k_active == 1:
            return float(np.mean(self.per_source_sisdr))
        return float(np.mean(self.sisdri))


def evaluate_example(
    references: np.ndarray,
    estimates: np.ndarray,
    mixture: np.ndarray,
    example_id: int = 0,
    matcher=match_assignment,
) -> EvalRecord:
    """Score the K active ``references`` against the best-matching K of N ``estimates``.

    Low-energy estimates stay in the candidate pool.
    """
    references = np.atleast_2d(references)
    estimates = np.atleast_2d(estimates)
    K, N = len(references), len(estimates)
    if K < 1:
        raise ValueError("need at least one reference")
    if K > N:
        raise ValueError(f"{K} references but only {N} estimates")
    scores = sisdr_matrix(references, estimates)
    matched = matcher(scores)
    per = scores[np.arange(K), matched]
    mix = np.array([sisdr(r, mixture) for r in references])
    return EvalRecord(example_id, K, per.tolist(), mix.tolist(), (per - mix).tolist(), matched.tolist())


@dataclass
class AggregateReport:
    one_s: Optional[float]
    k_si: dict[int, float]
    m_si: Optional[float]
    trf: float
    counts: dict[int, int]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_si"] = {str(k): v for k, v in self.k_si.items()}
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        return d


def aggregate(records: Sequence[EvalRecord]) -> AggregateReport:
    if not records:
        raise ValueError("no records to aggregate")
    by_k = defaultdict(list)
    for r in records:
        by_k[r.k_active].append(r.score)
    one_s = float(np.mean(by_k[1])) if by_k.get(1) else None
    k_si = {k: float(np.mean(v)) for k, v in sorted(by_k.items()) if k >= 2}
    multi = [s for k, v in by_k.items() if k >= 2 for s in v]
    m_si = float(np.mean(multi)) if multi else None
    trf = float(np.mean([r.score for r in records]))
    return AggregateReport(one_s, k_si, m_si, trf, {k: len(v) for k, v in sorted(by_k.items())})
