"""Desk-scale trend experiment: every training method on a small two-source corpus.

Each run trains from scratch, logs the per-epoch validation SISDRi curve and
scores the checkpoint-averaged model on a held-out test split.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median
from typing import Callable, Optional

from .datagen import Corpus, CorpusSpec
from .separator import SeparatorConfig, build_model
from .training import PreparedSplit, TrainConfig, evaluate_split, run_training

UNSUPERVISED = ("mixit", "remixit", "self_remixing", "self_remixing_nocs")


@dataclass(frozen=True)
class RunSpec:
    name: str
    method: str
    n_out: int
    channel_shuffle: Optional[bool] = None


DESK_RUNS = (
    RunSpec("mixit", "mixit", 4),
    RunSpec("remixit", "remixit", 3),
    RunSpec("self_remixing", "self_remixing", 3, channel_shuffle=True),
    RunSpec("self_remixing_nocs", "self_remixing", 3, channel_shuffle=False),
    RunSpec("sup_pit", "sup_pit", 3),
)


@dataclass
class DeskTrendConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    num_train: int = 800
    num_val: int = 48
    num_test: int = 100
    duration_s: float = 1.0
    data_seed: int = 100
    epochs: int = 20
    batch_size: int = 8
    lr_peak: float = 1e-3
    warmup_steps: int = 50
    hidden_width: int = 64
    n_blocks: int = 2
    runs: tuple[RunSpec, ...] = DESK_RUNS

    def corpora(self) -> tuple[Corpus, Corpus, Corpus]:
        def spec(n, offset):
            return CorpusSpec(num_examples=n, duration_s=self.duration_s, k_min=2, k_max=2, seed=self.data_seed + offset)

        return (
            Corpus.synthesize(spec(self.num_train, 0)),
            Corpus.synthesize(spec(self.num_val, 1)),
            Corpus.synthesize(spec(self.num_test, 2)),
        )

    def configs(self, run: RunSpec, seed: int) -> tuple[TrainConfig, SeparatorConfig]:
        train = TrainConfig(
            method=run.method,
            channel_shuffle=run.channel_shuffle,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_peak=self.lr_peak,
            warmup_steps=self.warmup_steps,
            # constant learning rate over the short desk run
            constant_epochs=self.epochs,
            seed=seed,
        )
        model = SeparatorConfig(n_out=run.n_out, hidden_width=self.hidden_width, n_blocks=self.n_blocks)
        return train, model


@dataclass
class RunResult:
    name: str
    seed: int
    curve: list[float]
    test_sisdri: float
    seconds: float


@dataclass
class TrendVerdict:
    passed: dict[str, bool]
    detail: dict[str, str] = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())


def run_one(cfg: DeskTrendConfig, run: RunSpec, seed: int, corpora) -> RunResult:
    train, val, test = corpora
    tcfg, mcfg = cfg.configs(run, seed)
    t0 = time.time()
    curve = []
    report = run_training(tcfg, mcfg, train, val, on_epoch=lambda r: curve.append(r["val_score"]))
    model = report.final_params.load_into(build_model(mcfg, tcfg.torch_dtype))
    _, agg = evaluate_split(model, PreparedSplit.from_corpus(test, tcfg.torch_dtype))
    return RunResult(run.name, seed, curve, agg.m_si, time.time() - t0)


def run_desk_trend(
    cfg: DeskTrendConfig = DeskTrendConfig(),
    out_path: Optional[str | Path] = None,
    log: Callable[[str], None] = print,
) -> list[RunResult]:
    corpora = cfg.corpora()
    results = []
    for seed in cfg.seeds:
        for run in cfg.runs:
            r = run_one(cfg, run, seed, corpora)
            results.append(r)
            log(f"{r.name:20s} seed {seed}: test SISDRi {r.test_sisdri:6.2f} dB  ({r.seconds:.0f} s)  "
                f"curve {' '.join(f'{v:.1f}' for v in r.curve)}")
            if out_path is not None:
                Path(out_path).write_text(json.dumps([asdict(x) for x in results], indent=1) + "\n")
    return results


def judge(results: list[RunResult]) -> TrendVerdict:
    """Check the four trend claims; scores are test-split SISDRi of the averaged models."""
    by_name: dict[str, dict[int, RunResult]] = {}
    for r in results:
        by_name.setdefault(r.name, {})[r.seed] = r
    med = {name: median(r.test_sisdri for r in runs.values()) for name, runs in by_name.items()}
    passed, detail = {}, {}

    worst = {n: min(r.test_sisdri for r in by_name[n].values()) for n in UNSUPERVISED}
    passed["a"] = all(v > 3.0 for v in worst.values())
    detail["a"] = "min over seeds: " + ", ".join(f"{n}={v:.2f}" for n, v in worst.items())

    passed["b"] = all(med["sup_pit"] >= med[n] for n in UNSUPERVISED)
    detail["b"] = "medians: " + ", ".join(f"{n}={v:.2f}" for n, v in med.items())

    passed["c"] = all(med[n] >= med["mixit"] - 1.0 for n in ("remixit", "self_remixing"))
    detail["c"] = f"remixit {med['remixit']:.2f}, self_remixing {med['self_remixing']:.2f} vs mixit - 1 = {med['mixit'] - 1:.2f}"

    stalls = []
    for seed, cs_run in by_name["self_remixing"].items():
        over = [e for e, v in enumerate(cs_run.curve) if v > 3.0]
        nocs = by_name["self_remixing_nocs"].get(seed)
        if not over or nocs is None:
            continue
        e = over[0]
        stalls.append((seed, e, nocs.curve[e]))
    passed["d"] = any(v < 1.0 for _, _, v in stalls)
    detail["d"] = "; ".join(f"seed {s}: CS run > 3 dB at epoch {e}, no-CS run at {v:.2f} dB" for s, e, v in stalls)
    return TrendVerdict(passed, detail)


def load_results(path: str | Path) -> list[RunResult]:
    return [RunResult(**r) for r in json.loads(Path(path).read_text())]
