"""Pseudo-mixture construction: batch shuffle, channel shuffle and their inverse.

Index conventions (0-based):

* ``batch_perms[n, b]`` is the batch item whose channel-``n`` source lands in
  pseudo-mixture ``b``; so pseudo-mixture ``b`` is
  ``sum_n s[batch_perms[n, b], n]``.
* ``channel_perms[b, n]`` is the channel of item ``b`` moved to slot ``n``
  before the batch shuffle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

MAX_REJECTION_ATTEMPTS = 100


class PigeonholeError(ValueError):
    pass


@dataclass(frozen=True)
class RemixPlan:
    batch_perms: np.ndarray  # (N, B)
    channel_perms: Optional[np.ndarray]  # (B, N) or None
    avoid_same_mixture: bool = False

    def __post_init__(self):
        N, B = self.batch_perms.shape
        for perm in self.batch_perms:
            if not _is_perm(perm, B):
                raise ValueError(f"batch permutation {perm.tolist()} is not a bijection on {B} items")
        if self.channel_perms is not None:
            if self.channel_perms.shape != (B, N):
                raise ValueError("channel_perms must have shape (B, N)")
            for perm in self.channel_perms:
                if not _is_perm(perm, N):
                    raise ValueError(f"channel permutation {perm.tolist()} is not a bijection")
        if self.avoid_same_mixture and not rows_distinct(self.batch_perms):
            raise ValueError("plan remixes two sources from the same mixture")

    @property
    def n_sources(self) -> int:
        return self.batch_perms.shape[0]

    @property
    def batch_size(self) -> int:
        return self.batch_perms.shape[1]

    def origin_matrix(self) -> np.ndarray:
        """(B, B) counts: entry ``[b, j]`` = sources of mixture ``j`` in pseudo-mixture ``b``."""
        B = self.batch_size
        out = np.zeros((B, B), dtype=int)
        for perm in self.batch_perms:
            out[np.arange(B), perm] += 1
        return out

    def to_record(self) -> dict:
        return {
            "batch_perms": self.batch_perms.tolist(),
            "channel_perms": None if self.channel_perms is None else self.channel_perms.tolist(),
            "avoid_same_mixture": self.avoid_same_mixture,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RemixPlan":
        cp = rec.get("channel_perms")
        return cls(
            np.asarray(rec["batch_perms"], dtype=np.int64),
            None if cp is None else np.asarray(cp, dtype=np.int64),
            bool(rec.get("avoid_same_mixture", False)),
        )

    @classmethod
    def identity(cls, B: int, N: int, channel_shuffle: bool = False) -> "RemixPlan":
        bp = np.tile(np.arange(B), (N, 1))
        cp = np.tile(np.arange(N), (B, 1)) if channel_shuffle else None
        return cls(bp, cp)


@dataclass
class PseudoBatch:
    mixtures: torch.Tensor  # (B, T)
    shuffled_sources: torch.Tensor  # (B, N, T)
    plan: RemixPlan


def _is_perm(p: np.ndarray, n: int) -> bool:
    return p.shape == (n,) and np.array_equal(np.sort(p), np.arange(n))


def rows_distinct(batch_perms: np.ndarray) -> bool:
    """True when every pseudo-mixture draws its N sources from N different mixtures."""
    cols = np.sort(batch_perms.T, axis=1)
    return bool(np.all(cols[:, 1:] != cols[:, :-1]))


def _latin_rectangle(B: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """Build N row-distinct permutations one at a time by augmenting-path matching.

    Permutation ``n`` is a perfect matching between pseudo-mixtures and origin
    indices not yet used in their row; the bipartite graph is regular, so a
    matching always exists and backtracking (augmenting paths) finds it.
    """
    perms = np.empty((N, B), dtype=np.int64)
    used = [set() for _ in range(B)]
    for n in range(N):
        match_of_origin = [-1] * B
        order = rng.permutation(B)

        def augment(b, seen):
            for j in rng.permutation(B):
                if j in used[b] or j in seen:
                    continue
                seen.add(j)
                if match_of_origin[j] < 0 or augment(match_of_origin[j], seen):
                    match_of_origin[j] = b
                    return True
            return False

        for b in order:
            if not augment(int(b), set()):
                raise RuntimeError("latin rectangle construction failed")  # unreachable for B >= N
        for j, b in enumerate(match_of_origin):
            perms[n, b] = j
            used[b].add(j)
    return perms


def sample_plan(
    B: int,
    N: int,
    avoid_same_mixture: bool,
    use_channel_shuffle: bool,
    rng: np.random.Generator,
) -> RemixPlan:
    """Draw a fresh remix plan.

    Unconstrained plans are N independent uniform permutations.  With
    ``avoid_same_mixture`` the permutations are rejection-sampled until every
    row is distinct (at most ``MAX_REJECTION_ATTEMPTS`` tries), falling back to
    a randomized Latin-rectangle construction, which is not exactly uniform.
    """
    if avoid_same_mixture and B < N:
        raise PigeonholeError(
            f"cannot avoid same-mixture remixing with batch size {B} < {N} sources: "
            "each pseudo-mixture needs sources from N distinct mixtures"
        )
    perms = None
    for _ in range(MAX_REJECTION_ATTEMPTS):
        cand = np.stack([rng.permutation(B) for _ in range(N)])
        if not avoid_same_mixture or rows_distinct(cand):
            perms = cand
            break
    if perms is None:
        perms = _latin_rectangle(B, N, rng)
    channel = np.stack([rng.permutation(N) for _ in range(B)]) if use_channel_shuffle else None
    return RemixPlan(perms, channel, avoid_same_mixture)


def _idx(x, arr: np.ndarray):
    return torch.as_tensor(arr, device=x.device) if isinstance(x, torch.Tensor) else arr


def channel_shuffle(sources, plan: RemixPlan):
    """Reorder each item's channels by its permutation; identity when disabled."""
    if plan.channel_perms is None:
        return sources
    B, N = plan.channel_perms.shape
    rows = _idx(sources, np.repeat(np.arange(B)[:, None], N, axis=1))
    return sources[rows, _idx(sources, plan.channel_perms)]


def batch_shuffle(sources, plan: RemixPlan):
    N, B = plan.batch_perms.shape
    cols = np.repeat(np.arange(N)[None, :], B, axis=0)
    return sources[_idx(sources, plan.batch_perms.T), _idx(sources, cols)]


def remix_pseudo_mixtures(sources: torch.Tensor, plan: RemixPlan) -> PseudoBatch:
    B, N = sources.shape[:2]
    if (N, B) != plan.batch_perms.shape:
        raise ValueError(f"plan is for B={plan.batch_size}, N={plan.n_sources}; sources are {B}x{N}")
    shuffled = batch_shuffle(channel_shuffle(sources, plan), plan)
    return PseudoBatch(shuffled.sum(dim=1), shuffled, plan)


def unshuffle(aligned, plan: RemixPlan):
    """Undo the batch shuffle then the channel shuffle of ``plan``."""
    N, B = plan.batch_perms.shape
    inv_batch = np.argsort(plan.batch_perms, axis=1)
    cols = np.repeat(np.arange(N)[None, :], B, axis=0)
    out = aligned[_idx(aligned, inv_batch.T), _idx(aligned, cols)]
    if plan.channel_perms is not None:
        inv_chan = np.argsort(plan.channel_perms, axis=1)
        rows = np.repeat(np.arange(B)[:, None], N, axis=1)
        out = out[_idx(out, rows), _idx(out, inv_chan)]
    return out
