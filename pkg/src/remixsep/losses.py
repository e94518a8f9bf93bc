"""Training objectives.

All signal losses work in the dB domain on the last (time) axis and return
per-item values unless stated otherwise; callers reduce with a mean.  The
assignment searches (MixIT mixing matrix, PIT permutation) run without
gradient; the loss is then recomputed through the selected assignment so
gradients flow only through the chosen mixing.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .remix import RemixPlan, unshuffle

# keeps silent references finite without moving the -10*log10(1/tau) floor measurably
_ENERGY_EPS = 1e-8
MIXIT_MAX_SOURCES = 14
PIT_EXHAUSTIVE_MAX = 5


@dataclass
class LossConfig:
    tau: float = 1e-3
    sparsity_weight: float = 0.0
    sparsity_form: str = "l1_of_l2"
    zero_ref_mode: str = "soft-threshold"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.sparsity_weight < 0:
            raise ValueError("sparsity_weight must be non-negative")
        if self.zero_ref_mode not in ("skip", "soft-threshold"):
            raise ValueError(f"unknown zero_ref_mode {self.zero_ref_mode!r}")


@dataclass
class AssignmentResult:
    assignment: np.ndarray  # (B', N) one-hot columns for MixIT; (N,) permutation for PIT
    loss_value: torch.Tensor  # scalar, differentiable
    per_target_losses: torch.Tensor  # (B',) or (N,)


def _energy(x):
    return (x * x).sum(dim=-1)


def snr_loss(y: torch.Tensor, y_hat: torch.Tensor, tau: float = 1e-3) -> torch.Tensor:
    """Negative thresholded SNR; bounded below by ``-10 log10(1 / tau)``."""
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    ref = _energy(y)
    err = _energy(y - y_hat)
    return -10 * torch.log10((ref + _ENERGY_EPS) / (err + tau * ref + _ENERGY_EPS))


def zero_ref_snr_loss(
    reference: torch.Tensor,
    estimate: torch.Tensor,
    mixture_energy: torch.Tensor | float,
    cfg: LossConfig,
) -> torch.Tensor:
    """SNR loss that tolerates all-zero references.

    Active references get :func:`snr_loss`.  Silent references get
    ``10 log10(|est|^2 + tau E_mix) - 10 log10(tau E_mix)`` in
    ``soft-threshold`` mode and 0 in ``skip`` mode (use
    :func:`counted_pairs` to drop them from the mean).
    """
    active = _energy(reference) > 0
    base = snr_loss(reference, estimate, cfg.tau)
    if cfg.zero_ref_mode == "skip":
        silent = torch.zeros_like(base)
    else:
        floor = cfg.tau * torch.as_tensor(mixture_energy, dtype=base.dtype) + _ENERGY_EPS
        silent = 10 * torch.log10(_energy(estimate) + floor) - 10 * torch.log10(floor)
    return torch.where(active, base, silent)


def counted_pairs(reference: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Boolean mask of reference/estimate pairs that enter the mean."""
    if cfg.zero_ref_mode == "skip":
        return _energy(reference) > 0
    return torch.ones(reference.shape[:-1], dtype=torch.bool, device=reference.device)


# ---------------------------------------------------------------- MixIT


def mixing_matrices(b_prime: int, n: int) -> np.ndarray:
    """All ``b_prime ** n`` binary matrices with one-hot columns, shape (M, B', N)."""
    labels = np.array(list(itertools.product(range(b_prime), repeat=n)), dtype=np.int64)
    out = np.zeros((len(labels), b_prime, n))
    out[np.arange(len(labels))[:, None], labels, np.arange(n)[None, :]] = 1.0
    return out


def _check_mixit(mixtures, estimates):
    b_prime, n = mixtures.shape[0], estimates.shape[0]
    if b_prime < 2:
        raise ValueError("MixIT needs at least two mixtures")
    if n > MIXIT_MAX_SOURCES:
        raise ValueError(
            f"exhaustive MixIT search over {b_prime}**{n} assignments refused (N > {MIXIT_MAX_SOURCES})"
        )
    return b_prime, n


def mixit_search_exhaustive(mixtures: torch.Tensor, estimates: torch.Tensor, tau: float = 1e-3):
    """Reference search: form every ``A @ est`` in the time domain."""
    b_prime, n = _check_mixit(mixtures, estimates)
    with torch.no_grad():
        A = torch.as_tensor(mixing_matrices(b_prime, n), dtype=estimates.dtype)
        remixed = torch.einsum("mbn,nt->mbt", A, estimates)
        totals = snr_loss(mixtures.expand_as(remixed), remixed, tau).sum(-1)
        best = int(torch.argmin(totals))
    return A[best].numpy(), totals


def mixit_search(mixtures: torch.Tensor, estimates: torch.Tensor, tau: float = 1e-3):
    """Exact search using only inner products.

    ``|x_b - sum_{n in S} s_n|^2`` expands into ``|x_b|^2``, cross terms
    ``<x_b, s_n>`` and the Gram matrix of the estimates, so every assignment
    is scored without revisiting the waveforms.
    """
    b_prime, n = _check_mixit(mixtures, estimates)
    with torch.no_grad():
        x = mixtures.to(torch.float64)
        s = estimates.to(torch.float64)
        gram = s @ s.T  # (N, N)
        cross = x @ s.T  # (B', N)
        ref = _energy(x)  # (B',)
        A = torch.as_tensor(mixing_matrices(b_prime, n), dtype=torch.float64)
        err = (
            ref[None, :]
            - 2 * (A * cross[None]).sum(-1)
            + torch.einsum("mbi,ij,mbj->mb", A, gram, A)
        ).clamp_min(0)
        totals = (-10 * torch.log10((ref + _ENERGY_EPS) / (err + tau * ref + _ENERGY_EPS))).sum(-1)
        best = int(torch.argmin(totals))
    return A[best].numpy(), totals


def mixit_loss(
    mixtures: torch.Tensor,
    estimates: torch.Tensor,
    cfg: Optional[LossConfig] = None,
    search: Callable = mixit_search,
) -> AssignmentResult:
    """MixIT for one MoM: ``mixtures`` (B', T), ``estimates`` (N, T).

    ``loss_value`` is the sum over the B' mixtures of the loss for the best
    mixing matrix.
    """
    cfg = cfg or LossConfig()
    A, _ = search(mixtures, estimates, cfg.tau)
    remixed = torch.as_tensor(A, dtype=estimates.dtype) @ estimates
    per = snr_loss(mixtures, remixed, cfg.tau)
    return AssignmentResult(A, per.sum(), per)


# ---------------------------------------------------------------- PIT


def pairwise_losses(targets: torch.Tensor, estimates: torch.Tensor, pair_loss) -> torch.Tensor:
    """(..., N, T) x (..., N, T) -> (..., N_targets, N_estimates)."""
    n_t, n_e = targets.shape[-2], estimates.shape[-2]
    shape = (*targets.shape[:-2], n_t, n_e, targets.shape[-1])
    return pair_loss(targets.unsqueeze(-2).expand(shape), estimates.unsqueeze(-3).expand(shape))


def pit_search_exhaustive(loss_matrix: np.ndarray) -> np.ndarray:
    """``perm[i]`` = estimate matched to target ``i``; minimises the summed loss."""
    n = loss_matrix.shape[0]
    best, best_val = None, np.inf
    for perm in itertools.permutations(range(n)):
        val = loss_matrix[np.arange(n), perm].sum()
        if val < best_val:
            best, best_val = perm, val
    return np.asarray(best)


def pit_search_hungarian(loss_matrix: np.ndarray) -> np.ndarray:
    rows, cols = linear_sum_assignment(loss_matrix)
    return cols[np.argsort(rows)]


def pit_search(loss_matrix: np.ndarray) -> np.ndarray:
    if loss_matrix.shape[0] <= PIT_EXHAUSTIVE_MAX:
        return pit_search_exhaustive(loss_matrix)
    return pit_search_hungarian(loss_matrix)


def pit_align(targets: torch.Tensor, estimates: torch.Tensor, pair_loss, search: Callable = pit_search):
    """Batched PIT over (B, N, T) stacks.

    Returns ``(per_item_loss, aligned, perms)``; ``aligned[b, n]`` is the
    estimate matched to target ``n`` and ``per_item_loss`` is the mean of the
    matched pair losses.
    """
    with torch.no_grad():
        mats = pairwise_losses(targets, estimates, pair_loss).cpu().numpy()
    perms = np.stack([search(m) for m in mats])
    B, N = perms.shape
    idx = torch.as_tensor(perms, device=estimates.device)
    aligned = estimates[torch.arange(B, device=estimates.device)[:, None], idx]
    per_item = pair_loss(targets, aligned).mean(dim=-1)
    return per_item, aligned, perms


def mixpit_loss(
    mixtures: torch.Tensor,
    estimates: torch.Tensor,
    cfg: Optional[LossConfig] = None,
    search: Callable = pit_search,
) -> AssignmentResult:
    """Permutation-invariant loss against the individual mixtures (B' == N)."""
    cfg = cfg or LossConfig()
    if mixtures.shape[0] != estimates.shape[0]:
        raise ValueError(f"MixPIT needs N == B', got N={estimates.shape[0]}, B'={mixtures.shape[0]}")
    tau = cfg.tau
    _, aligned, perms = pit_align(
        mixtures[None], estimates[None], lambda y, yh: snr_loss(y, yh, tau), search
    )
    per = snr_loss(mixtures, aligned[0], tau)
    return AssignmentResult(perms[0], per.mean(), per)


def remixit_loss(
    teacher_shuffled: torch.Tensor,
    student_out: torch.Tensor,
    cfg: Optional[LossConfig] = None,
    search: Callable = pit_search,
):
    """Per-item PIT between remixed teacher sources and student outputs.

    Returns ``(loss, aligned_student, perms)``; the teacher side carries no
    gradient.
    """
    cfg = cfg or LossConfig()
    tau = cfg.tau
    per_item, aligned, perms = pit_align(
        teacher_shuffled.detach(), student_out, lambda y, yh: snr_loss(y, yh, tau), search
    )
    return per_item.mean(), aligned, perms


def self_remixing_loss(
    student_out: torch.Tensor,
    teacher_shuffled: torch.Tensor,
    plan: RemixPlan,
    initial_mixtures: torch.Tensor,
    cfg: Optional[LossConfig] = None,
    reduce: bool = True,
):
    """Align student outputs to the teacher, undo the remix, and score against the inputs."""
    cfg = cfg or LossConfig()
    _, aligned, _ = remixit_loss(teacher_shuffled, student_out, cfg)
    recon = unshuffle(aligned, plan).sum(dim=1)
    per = snr_loss(initial_mixtures, recon, cfg.tau)
    return per.mean() if reduce else per


# ---------------------------------------------------------------- sparsity


def l1_of_l2(estimates: torch.Tensor, mixture: torch.Tensor) -> torch.Tensor:
    """Sum of per-channel L2 norms over the mixture norm: (..., N, T), (..., T) -> (...)."""
    norms = torch.sqrt(_energy(estimates) + 1e-12) - 1e-6
    return norms.sum(-1) / torch.sqrt(_energy(mixture) + _ENERGY_EPS)


SPARSITY_FORMS: dict[str, Callable] = {"l1_of_l2": l1_of_l2}


def sparsity_regularizer(
    estimates: torch.Tensor, mixture: torch.Tensor, weight: float, form: str = "l1_of_l2"
) -> torch.Tensor:
    if weight < 0:
        raise ValueError("weight must be non-negative")
    return weight * SPARSITY_FORMS[form](estimates, mixture)
