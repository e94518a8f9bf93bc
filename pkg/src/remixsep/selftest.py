"""Fast invariant checks across all modules, run by ``remixsep selftest``."""
from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np
import torch

from . import config as config_io
from .datagen import CorpusSpec, synthesize_example
from .losses import (
    mixit_search,
    mixit_search_exhaustive,
    pit_search_exhaustive,
    pit_search_hungarian,
    remixit_loss,
    self_remixing_loss,
    snr_loss,
)
from .metrics import match_assignment, match_exhaustive, sisdr
from .remix import remix_pseudo_mixtures, sample_plan, unshuffle
from .separator import SeparatorConfig, mixture_consistency, random_init, separate
from .signals import istft, stft
from .training import TrainConfig, average_checkpoints, ema_update, learning_rate


def check_stft_round_trip():
    x = torch.randn(2, 1000, dtype=torch.float64)
    y = istft(stft(x, 64, 64, 16), 1000)
    assert torch.allclose(x, y, atol=1e-10)


def check_snr_floor():
    y = torch.randn(500, dtype=torch.float64)
    assert abs(snr_loss(y, y).item() + 30.0) < 1e-6
    assert abs(snr_loss(y, torch.zeros_like(y)).item() + 10 * math.log10(1 / 1.001)) < 1e-9


def check_mixit_oracle():
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        x = torch.randn(2, 64, generator=g, dtype=torch.float64)
        s = torch.randn(4, 64, generator=g, dtype=torch.float64)
        a, ta = mixit_search(x, s)
        b, tb = mixit_search_exhaustive(x, s)
        assert np.array_equal(a, b) and float((ta - tb).abs().max()) < 1e-9


def check_pit_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = rng.standard_normal((4, 4))
        assert np.array_equal(pit_search_hungarian(m), pit_search_exhaustive(m))


def check_remix_round_trip():
    rng = np.random.default_rng(0)
    s = torch.randn(8, 3, 32, dtype=torch.float64)
    for cs in (False, True):
        plan = sample_plan(8, 3, True, cs, rng)
        assert plan.origin_matrix().max() == 1
        assert torch.equal(unshuffle(remix_pseudo_mixtures(s, plan).shuffled_sources, plan), s)


def check_zero_init_is_mom():
    cfg = SeparatorConfig(n_out=3, hidden_width=8, n_blocks=1, kernel_size=3, fft_size=32, win_size=32, hop=8,
                          zero_init_output=True)
    x = torch.randn(4, 256, dtype=torch.float64)
    out = separate(random_init(cfg, 0, torch.float64), x, cfg)
    assert torch.allclose(out, (x / 3).unsqueeze(1).expand_as(out), atol=1e-12)


def check_perfect_teacher():
    x = torch.randn(6, 80, dtype=torch.float64)
    teacher = mixture_consistency(torch.randn(6, 3, 80, dtype=torch.float64), x)
    plan = sample_plan(6, 3, True, True, np.random.default_rng(1))
    pb = remix_pseudo_mixtures(teacher, plan)
    r, _, _ = remixit_loss(pb.shuffled_sources, pb.shuffled_sources.clone())
    s = self_remixing_loss(pb.shuffled_sources.clone(), pb.shuffled_sources, plan, x)
    assert abs(r.item() + 30) < 1e-5 and abs(s.item() + 30) < 1e-5


def check_parameter_ops():
    cfg = SeparatorConfig(n_out=2, hidden_width=4, n_blocks=1, kernel_size=3, fft_size=16, win_size=16, hop=4)
    t, s = random_init(cfg, 0), random_init(cfg, 1)
    mid = ema_update(t, s, 0.8).data
    assert torch.all(mid >= torch.minimum(t.data, s.data) - 1e-7)
    assert torch.all(mid <= torch.maximum(t.data, s.data) + 1e-7)
    assert torch.equal(average_checkpoints([t] * 5).data, t.data)
    tc = TrainConfig()
    assert math.isclose(learning_rate(tc, tc.warmup_steps // 2, 0), tc.lr_peak / 2)


def check_metrics():
    rng = np.random.default_rng(0)
    y, e = rng.standard_normal(100), rng.standard_normal(100)
    assert abs(sisdr(y, 5 * e) - sisdr(y, e)) < 1e-9
    for k, n in itertools.product(range(1, 4), range(3, 6)):
        sc = rng.standard_normal((k, n))
        a, b = match_assignment(sc), match_exhaustive(sc)
        assert abs(sc[np.arange(k), a].sum() - sc[np.arange(k), b].sum()) < 1e-12


def check_datagen():
    spec = CorpusSpec(num_examples=2, duration_s=0.1, k_min=1, k_max=3, seed=5)
    a, b = synthesize_example(spec, 1), synthesize_example(spec, 1)
    assert np.array_equal(a.mixture, b.mixture)
    assert np.array_equal(a.mixture, a.sources.sum(0))


def check_config_round_trip():
    cfg = config_io.ExperimentConfig()
    assert config_io.loads(config_io.dumps(cfg)) == cfg


CHECKS: dict[str, Callable[[], None]] = {
    "signals: stft/istft perfect reconstruction": check_stft_round_trip,
    "losses: thresholded SNR floor": check_snr_floor,
    "losses: MixIT solver vs enumeration": check_mixit_oracle,
    "losses: PIT solver vs enumeration": check_pit_oracle,
    "remix: constraint and unshuffle round trip": check_remix_round_trip,
    "separator: zero-init output is x/N": check_zero_init_is_mom,
    "losses: perfect-teacher fixed points": check_perfect_teacher,
    "training: EMA convexity, averaging, warmup": check_parameter_ops,
    "metrics: scale invariance and matching": check_metrics,
    "datagen: determinism and sum consistency": check_datagen,
    "config: lossless round trip": check_config_round_trip,
}


def run_all(out=print) -> bool:
    ok = True
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        for name, fn in CHECKS.items():
            try:
                fn()
                out(f"PASS  {name}")
            except Exception as e:  # noqa: BLE001
                ok = False
                out(f"FAIL  {name}: {type(e).__name__}: {e}")
    out("selftest: all checks passed" if ok else "selftest: FAILED")
    return ok
