import json

import numpy as np
import pytest
import torch

from remixsep.datagen import (
    Corpus,
    CorpusSpec,
    make_mom,
    read_corpus,
    synthesize_corpus,
    synthesize_example,
    write_corpus,
)
from remixsep.metrics import sisdr


def small_spec(**kw):
    base = dict(num_examples=12, duration_s=0.25, sample_rate=8000, k_min=1, k_max=3, seed=7)
    base.update(kw)
    return CorpusSpec(**base)


def test_single_source_mixture_equals_source():
    for ex in synthesize_corpus(small_spec(k_min=1, k_max=1)):
        assert ex.k_active == 1
        assert np.array_equal(ex.mixture, ex.sources[0])
        assert np.all(ex.sources[1:] == 0)


def test_same_seed_bit_identical():
    a = Corpus.synthesize(small_spec())
    b = Corpus.synthesize(small_spec())
    assert a.mixtures.tobytes() == b.mixtures.tobytes()
    assert a.sources.tobytes() == b.sources.tobytes()
    c = Corpus.synthesize(small_spec(seed=8))
    assert not np.array_equal(a.mixtures, c.mixtures)


def test_parallel_matches_serial():
    spec = small_spec(num_examples=6)
    serial = [e.mixture for e in synthesize_corpus(spec, workers=0)]
    parallel = [e.mixture for e in synthesize_corpus(spec, workers=2)]
    assert all(np.array_equal(a, b) for a, b in zip(serial, parallel))


def test_sum_consistency_and_inactive_rows():
    spec = small_spec(num_examples=30, noise_snr_range_db=(10, 20))
    for ex in synthesize_corpus(spec):
        assert np.max(np.abs(ex.mixture - ex.sources.sum(0))) == 0
        assert np.all(ex.sources[ex.k_active : spec.k_max] == 0)
        assert ex.k_active >= 1
        assert len(set(ex.kinds)) == ex.k_active
        lo, hi = spec.rms_range_db
        for row in ex.sources[: ex.k_active]:
            rms_db = 20 * np.log10(np.sqrt(np.mean(row.astype(np.float64) ** 2)))
            assert lo - 0.01 <= rms_db <= hi + 0.01


def test_source_count_uniform():
    spec = CorpusSpec(num_examples=600, duration_s=0.05, k_min=1, k_max=3, seed=3)
    counts = np.bincount([synthesize_example(spec, i).k_active for i in range(spec.num_examples)])[1:]
    # each count ~ Binomial(600, 1/3): 200 +- 3 sd (sd ~ 11.5)
    assert np.all(np.abs(counts - 200) < 35)


def test_two_source_mixtures_overlap():
    spec = CorpusSpec(num_examples=100, duration_s=0.5, k_min=2, k_max=2, seed=11)
    vals = [sisdr(ex.sources[k], ex.mixture) for ex in synthesize_corpus(spec) for k in range(2)]
    assert np.mean(vals) < 5.0


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(k_min=0)
    with pytest.raises(ValueError):
        CorpusSpec(k_min=3, k_max=2)
    with pytest.raises(ValueError):
        CorpusSpec(k_max=5)


def test_write_and_read_layout(tmp_path):
    spec = small_spec(num_examples=4)
    write_corpus(spec, tmp_path / "train")
    assert (tmp_path / "train" / "mix" / "00003.wav").exists()
    assert (tmp_path / "train" / "src" / "00002_1.wav").exists()
    lines = (tmp_path / "train" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert set(rec) >= {"mix", "sources", "k", "snr_db", "seed"}
    back = read_corpus(tmp_path / "train")
    mem = Corpus.synthesize(spec)
    assert np.array_equal(back.mixtures, mem.mixtures)
    assert np.array_equal(back.sources, mem.sources)
    assert np.array_equal(back.k_active, mem.k_active)


def test_mom_examples():
    batch = torch.tensor([[1.0, 1.0], [2.0, 2.0]])
    mom, prov = make_mom(batch, 2, normalize=False)
    assert mom.tolist() == [[3.0, 3.0]] and prov == [(0, 1)]

    batch = torch.randn(5, 40, dtype=torch.float64)
    mom, prov = make_mom(batch, 5, normalize=False)
    assert torch.allclose(mom[0], batch.sum(0))

    batch = torch.randn(4, 64, dtype=torch.float64)
    norm, prov = make_mom(batch, 2)
    assert prov == [(0, 1), (2, 3)]
    for g, (i, j) in enumerate(prov):
        s = batch[i] + batch[j]
        expected = (s - s.mean()) / s.std(unbiased=False)
        assert torch.allclose(norm.wave[g], expected, atol=1e-12)


def test_mom_rejects_bad_groups():
    with pytest.raises(ValueError):
        make_mom(torch.zeros(3, 8), 2)
    with pytest.raises(ValueError):
        make_mom(torch.zeros(4, 8), 1)


@pytest.mark.parametrize("B,bp", [(4, 2), (6, 3), (8, 4), (6, 2)])
def test_mom_provenance_partition(B, bp):
    _, prov = make_mom(torch.zeros(B, 4), bp, normalize=False)
    flat = sorted(i for g in prov for i in g)
    assert flat == list(range(B))
