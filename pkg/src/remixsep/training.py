"""Teacher-student training loop for MixIT, MixPIT, RemixIT and Self-Remixing.

One ``train_step`` per mini-batch; the teacher is refreshed by an EMA of the
student only at epoch boundaries.  Initial mixtures are mean/std normalized
before they reach any network; pseudo-mixtures are fed to the student as-is.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .datagen import Corpus, make_mom
from .losses import (
    LossConfig,
    counted_pairs,
    mixit_loss,
    mixpit_loss,
    pairwise_losses,
    pit_search,
    remixit_loss,
    self_remixing_loss,
    snr_loss,
    sparsity_regularizer,
    zero_ref_snr_loss,
)
from .metrics import aggregate, evaluate_example
from .remix import remix_pseudo_mixtures, sample_plan, unshuffle
from .separator import (
    MaskSeparator,
    ParameterVector,
    SeparatorConfig,
    build_model,
    load_checkpoint,
    random_init,
    save_checkpoint,
)
from .signals import normalize_mixture

log = logging.getLogger(__name__)

METHODS = (
    "mixit",
    "mixit_sparsity",
    "mixpit",
    "remixit",
    "self_remixing",
    "sup_remixit",
    "sup_self_remixing",
    "sup_pit",
)
TEACHER_METHODS = ("remixit", "self_remixing")
REMIX_METHODS = ("remixit", "self_remixing", "sup_remixit", "sup_self_remixing")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    method: str = "self_remixing"
    alpha: float = 0.8
    epochs: int = 60
    batch_size: int = 8
    lr_peak: float = 2e-4
    lr_floor: float = 2e-5
    warmup_steps: int = 200
    constant_epochs: int = 10
    decay_factor: float = 0.98
    decay_every_epochs: int = 3
    grad_clip_norm: float = 5.0
    weight_decay: float = 1e-2
    seed: int = 0
    tau: float = 1e-3
    mom_size: int = 2
    # None picks the method default (see remix_flags)
    channel_shuffle: Optional[bool] = None
    avoid_same_mixture: Optional[bool] = None
    sparsity_weight: float = 0.1
    sparsity_start_frac: float = 0.75
    zero_ref_mode: str = "soft-threshold"
    finetune_from: Optional[str] = None
    log_plans: bool = False
    save_every_epoch: bool = True
    n_best: int = 5
    eval_batch_size: int = 16
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lr_floor > self.lr_peak:
            raise ValueError("lr_floor must not exceed lr_peak")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")
        if self.n_best < 1:
            raise ValueError("n_best must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        LossConfig(self.tau, self.sparsity_weight, zero_ref_mode=self.zero_ref_mode)

    def remix_flags(self) -> tuple[bool, bool]:
        """(channel_shuffle, avoid_same_mixture) after applying method defaults."""
        self_remix = self.method in ("self_remixing", "sup_self_remixing")
        cs = self_remix if self.channel_shuffle is None else self.channel_shuffle
        avoid = (not self_remix) if self.avoid_same_mixture is None else self.avoid_same_mixture
        return cs, avoid

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.sparsity_weight, zero_ref_mode=self.zero_ref_mode)


def check_compatible(cfg: TrainConfig, model_cfg: SeparatorConfig) -> None:
    """Cross-config validation that needs both the method and N."""
    N, B = model_cfg.n_out, cfg.batch_size
    cs, avoid = cfg.remix_flags()
    if cfg.method in REMIX_METHODS and avoid and B < N:
        # surfaces the pigeonhole condition before any training happens
        sample_plan(B, N, True, cs, np.random.default_rng(0))
    if cfg.method in ("mixit", "mixit_sparsity") and B % cfg.mom_size:
        raise ValueError(f"batch_size {B} is not divisible by mom_size {cfg.mom_size}")
    if cfg.method == "mixpit" and B % N:
        raise ValueError(f"MixPIT sums N={N} mixtures per MoM; batch_size {B} is not divisible by N")


# ---------------------------------------------------------------- parameter ops


def ema_update(teacher: ParameterVector, student: ParameterVector, alpha: float) -> ParameterVector:
    if not teacher.same_index(student):
        raise ValueError("teacher and student parameter indices differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return teacher.with_data(teacher.data.clone())
    if alpha == 0.0:
        return student.with_data(student.data.clone())
    return teacher.with_data(alpha * teacher.data + (1 - alpha) * student.data)


def average_checkpoints(ring) -> ParameterVector:
    """Elementwise mean of parameter vectors (or ``(score, ..., params)`` tuples)."""
    vecs = [r[-1] if isinstance(r, tuple) else r for r in ring]
    if not vecs:
        raise ValueError("cannot average an empty checkpoint ring")
    first = vecs[0]
    for v in vecs[1:]:
        if not first.same_index(v):
            raise ValueError("checkpoints have different parameter indices")
    # mean of offsets from the first vector: identical inputs come back bit-exact
    base = first.data.to(torch.float64)
    offset = torch.stack([v.data.to(torch.float64) - base for v in vecs]).mean(dim=0)
    return first.with_data((base + offset).to(first.data.dtype))


def params_digest(params: ParameterVector) -> str:
    return hashlib.sha1(params.data.detach().cpu().numpy().tobytes()).hexdigest()


def learning_rate(cfg: TrainConfig, step: int, epoch: int) -> float:
    """Linear warmup by step, then constant, then stepwise geometric decay by epoch."""
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if epoch < cfg.constant_epochs:
        return cfg.lr_peak
    n_decays = (epoch - cfg.constant_epochs) // cfg.decay_every_epochs
    return max(cfg.lr_floor, cfg.lr_peak * cfg.decay_factor**n_decays)


# ---------------------------------------------------------------- data


@dataclass
class PreparedSplit:
    """Normalized tensors for one corpus split."""

    mix: torch.Tensor  # (M, T) normalized mixtures
    sources: torch.Tensor  # (M, R, T) sources in the same normalized units
    k_active: np.ndarray
    raw_mix: np.ndarray
    raw_sources: np.ndarray

    @classmethod
    def from_corpus(cls, corpus: Corpus, dtype=torch.float32) -> "PreparedSplit":
        mix = torch.as_tensor(corpus.mixtures, dtype=torch.float64)
        norm = normalize_mixture(mix)
        src = torch.as_tensor(corpus.sources, dtype=torch.float64)
        src = (src - src.mean(-1, keepdim=True)) / norm.std.unsqueeze(1)
        return cls(norm.wave.to(dtype), src.to(dtype), corpus.k_active, corpus.mixtures, corpus.sources)

    def __len__(self):
        return len(self.mix)


def pad_channels(src: torch.Tensor, n: int) -> torch.Tensor:
    R = src.shape[1]
    if R > n:
        if src[:, n:].abs().sum() > 0:
            raise ValueError(f"references have {R} active rows but the separator has only {n} outputs")
        return src[:, :n]
    if R < n:
        return torch.cat([src, src.new_zeros(src.shape[0], n - R, src.shape[-1])], dim=1)
    return src


# ---------------------------------------------------------------- state & step


@dataclass
class TrainState:
    student: MaskSeparator
    teacher: Optional[MaskSeparator]
    teacher_params: Optional[ParameterVector]
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    global_step: int = 0
    best: list = field(default_factory=list)  # (score, epoch, ParameterVector), best first


def init_state(cfg: TrainConfig, model_cfg: SeparatorConfig) -> TrainState:
    dtype = cfg.torch_dtype
    if cfg.finetune_from:
        params, _ = load_checkpoint(cfg.finetune_from)
        params = params.with_data(params.data.to(dtype))
    else:
        params = random_init(model_cfg, cfg.seed, dtype)
    student = params.load_into(build_model(model_cfg, dtype))
    teacher = teacher_params = None
    if cfg.method in TEACHER_METHODS:
        teacher_params = params
        teacher = params.load_into(build_model(model_cfg, dtype)).eval()
        teacher.requires_grad_(False)
    opt = torch.optim.AdamW(student.parameters(), lr=0.0, weight_decay=cfg.weight_decay)
    return TrainState(student, teacher, teacher_params, opt, np.random.default_rng(cfg.seed))


def _zero_ref_pair(cfg: LossConfig, mix_energy: torch.Tensor):
    def pair(y, y_hat):
        e = mix_energy.reshape(-1, *([1] * (y.ndim - 2)))
        return zero_ref_snr_loss(y, y_hat, e, cfg)

    return pair


def _supervised_pit(targets, estimates, mix_energy, lcfg: LossConfig, keep: torch.Tensor):
    """Zero-reference-aware PIT; returns (loss, n_items_used)."""
    pair = _zero_ref_pair(lcfg, mix_energy)
    with torch.no_grad():
        mats = pairwise_losses(targets, estimates, pair).cpu().numpy()
    perms = torch.as_tensor(np.stack([pit_search(m) for m in mats]))
    aligned = estimates[torch.arange(len(perms))[:, None], perms]
    per_pair = pair(targets, aligned)
    counted = counted_pairs(targets, lcfg) & keep[:, None]
    if not counted.any():
        return None, aligned, perms
    return (per_pair * counted).sum() / counted.sum(), aligned, perms


def compute_loss(state: TrainState, cfg: TrainConfig, mix: torch.Tensor, sources: torch.Tensor):
    """Method dispatch.  Returns ``(loss or None, info)``; ``None`` means nothing trainable."""
    student = state.student
    lcfg = cfg.loss_config()
    method = cfg.method
    N = student.cfg.n_out
    B = mix.shape[0]
    info = {"skipped": 0}

    if method in ("mixit", "mixit_sparsity", "mixpit"):
        b_prime = N if method == "mixpit" else cfg.mom_size
        mom, groups = make_mom(mix, b_prime)
        est = student(mom.wave) * mom.std.unsqueeze(1) + mom.mean.unsqueeze(1) / N
        losses = []
        for g, idx in enumerate(groups):
            targets = mix[list(idx)]
            res = (mixpit_loss if method == "mixpit" else mixit_loss)(targets, est[g], lcfg)
            losses.append(res.per_target_losses.mean())
        loss = torch.stack(losses).mean()
        sparse_from = int(np.floor(cfg.sparsity_start_frac * cfg.epochs))
        if method == "mixit_sparsity" and state.epoch >= sparse_from:
            raw_mom = mom.wave * mom.std + mom.mean
            loss = loss + sparsity_regularizer(est, raw_mom, cfg.sparsity_weight).mean()
        return loss, info

    if method == "sup_pit":
        targets = pad_channels(sources, N)
        est = student(mix)
        keep = torch.ones(B, dtype=torch.bool)
        loss, _, _ = _supervised_pit(targets, est, (mix**2).sum(-1), lcfg, keep)
        return loss, info

    # remixing methods
    cs, avoid = cfg.remix_flags()
    plan = sample_plan(B, N, avoid, cs, state.rng)
    if cfg.log_plans:
        info["plan"] = plan.to_record()
    if method in TEACHER_METHODS:
        with torch.no_grad():
            teacher_out = state.teacher(mix)
    else:
        teacher_out = pad_channels(sources, N)
    pseudo = remix_pseudo_mixtures(teacher_out, plan)
    student_out = student(pseudo.mixtures)

    if method == "remixit":
        loss, _, _ = remixit_loss(pseudo.shuffled_sources, student_out, lcfg)
        return loss, info
    if method == "self_remixing":
        return self_remixing_loss(student_out, pseudo.shuffled_sources, plan, mix, lcfg), info

    # supervised remixing: all-zero pseudo-mixtures are not trained on
    keep = (pseudo.mixtures**2).sum(-1) > 0
    info["skipped"] = int((~keep).sum())
    pm_energy = (pseudo.mixtures**2).sum(-1)
    if method == "sup_remixit":
        loss, _, _ = _supervised_pit(pseudo.shuffled_sources, student_out, pm_energy, lcfg, keep)
        return loss, info
    # sup_self_remixing; skipped pseudo-mixtures produce exact zeros and drop out of the sum
    _, aligned, _ = _supervised_pit(pseudo.shuffled_sources, student_out, pm_energy, lcfg, keep)
    recon = unshuffle(aligned, plan).sum(dim=1)
    if not keep.any():
        return None, info
    return snr_loss(mix, recon, lcfg.tau).mean(), info


def train_step(state: TrainState, mix: torch.Tensor, sources: torch.Tensor, cfg: TrainConfig) -> dict:
    state.student.train()
    state.optimizer.zero_grad(set_to_none=True)
    lr = learning_rate(cfg, state.global_step, state.epoch)
    loss, info = compute_loss(state, cfg, mix, sources)
    metrics = {"step": state.global_step, "epoch": state.epoch, "lr": lr, "skipped": info["skipped"]}
    if loss is None:
        metrics.update(loss=None, grad_norm=0.0)
        state.global_step += 1
        return metrics
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at step {state.global_step} (epoch {state.epoch}, seed {cfg.seed}); "
            f"plan={info.get('plan')}"
        )
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(state.student.parameters(), cfg.grad_clip_norm)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.global_step += 1
    metrics.update(loss=float(loss.detach()), grad_norm=float(grad_norm))
    if "plan" in info:
        metrics["plan"] = info["plan"]
    return metrics


def end_epoch(state: TrainState, cfg: TrainConfig) -> bool:
    """Refresh the teacher by EMA; returns whether an update happened."""
    state.epoch += 1
    if state.teacher is None:
        return False
    student_params = ParameterVector.from_module(state.student)
    state.teacher_params = ema_update(state.teacher_params, student_params, cfg.alpha)
    state.teacher_params.load_into(state.teacher)
    return True


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def separate_corpus(model: MaskSeparator, split: PreparedSplit, batch_size: int = 16) -> np.ndarray:
    """De-normalized estimates for every example, (M, N, T) float64."""
    model.eval()
    out = []
    for i in range(0, len(split), batch_size):
        raw = torch.as_tensor(split.raw_mix[i : i + batch_size], dtype=torch.float64)
        norm = normalize_mixture(raw)
        est = model(norm.wave.to(next(model.parameters()).dtype)).to(torch.float64)
        est = est * norm.std.unsqueeze(1) + norm.mean.unsqueeze(1) / est.shape[1]
        out.append(est.numpy())
    return np.concatenate(out)


def evaluate_split(model: MaskSeparator, split: PreparedSplit, batch_size: int = 16):
    estimates = separate_corpus(model, split, batch_size)
    records = []
    for i, est in enumerate(estimates):
        k = int(split.k_active[i])
        refs = split.raw_sources[i, :k].astype(np.float64)
        records.append(evaluate_example(refs, est, split.raw_mix[i].astype(np.float64), example_id=i))
    return records, aggregate(records)


# ---------------------------------------------------------------- driver


@dataclass
class TrainReport:
    method: str
    history: list[dict]
    final_params: ParameterVector
    final_score: float
    best_scores: list[float]
    skipped_items: int
    teacher_digests: list[str] = field(default_factory=list)


class _JsonlLog:
    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "w") if path else None

    def write(self, rec: dict):
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def run_training(
    cfg: TrainConfig,
    model_cfg: SeparatorConfig,
    train: Corpus | PreparedSplit,
    val: Corpus | PreparedSplit,
    out_dir: str | Path | None = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainReport:
    cfg.validate()
    check_compatible(cfg, model_cfg)
    dtype = cfg.torch_dtype
    if isinstance(train, Corpus):
        train = PreparedSplit.from_corpus(train, dtype)
    if isinstance(val, Corpus):
        val = PreparedSplit.from_corpus(val, dtype)
    if len(train) < cfg.batch_size:
        raise ValueError(f"training split has {len(train)} examples, fewer than one batch")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "ckpt").mkdir(parents=True, exist_ok=True)
    logf = _JsonlLog(out / "train_log.jsonl" if out is not None else None)
    meta = {"separator": asdict(model_cfg), "method": cfg.method, "config_hash": model_cfg.digest()}

    state = init_state(cfg, model_cfg)
    history, skipped, teacher_digests = [], 0, []
    n_batches = len(train) // cfg.batch_size
    try:
        for _ in range(cfg.epochs):
            if state.teacher_params is not None:
                teacher_digests.append(params_digest(state.teacher_params))
            order = state.rng.permutation(len(train))
            for i in range(n_batches):
                idx = torch.as_tensor(order[i * cfg.batch_size : (i + 1) * cfg.batch_size])
                m = train_step(state, train.mix[idx], train.sources[idx], cfg)
                skipped += m["skipped"]
                logf.write({"type": "step", **m})
            if state.teacher_params is not None:
                # teacher must not have moved inside the epoch
                assert teacher_digests[-1] == params_digest(state.teacher_params)
            epoch = state.epoch
            updated = end_epoch(state, cfg)

            _, agg = evaluate_split(state.student, val, cfg.eval_batch_size)
            params = ParameterVector.from_module(state.student)
            state.best.append((agg.trf, epoch, params))
            state.best.sort(key=lambda r: (-r[0], r[1]))
            del state.best[cfg.n_best :]
            rec = {
                "type": "epoch",
                "epoch": epoch,
                "val_score": agg.trf,
                "val_msi": agg.m_si,
                "val_1s": agg.one_s,
                "teacher_update": updated,
            }
            history.append(rec)
            logf.write(rec)
            log.info("epoch %d: val score %.2f dB", epoch, agg.trf)
            if out is not None and cfg.save_every_epoch:
                save_checkpoint(out / "ckpt" / f"epoch{epoch:03d}.bin", params, {**meta, "epoch": epoch, "val_score": agg.trf})
            if on_epoch:
                on_epoch(rec)
    finally:
        logf.close()

    final = average_checkpoints(state.best)
    final_model = final.load_into(build_model(model_cfg, dtype))
    _, agg = evaluate_split(final_model, val, cfg.eval_batch_size)
    if out is not None:
        save_checkpoint(
            out / "ckpt" / "best_avg.bin",
            final,
            {**meta, "epoch": state.epoch, "val_score": agg.trf, "averaged_epochs": [r[1] for r in state.best]},
        )
    return TrainReport(cfg.method, history, final, agg.trf, [r[0] for r in state.best], skipped, teacher_digests)
