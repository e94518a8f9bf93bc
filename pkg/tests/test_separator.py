import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from remixsep.separator import (
    ParameterVector,
    SeparatorConfig,
    build_model,
    load_checkpoint,
    mixture_consistency,
    random_init,
    save_checkpoint,
    separate,
)


def test_mixture_consistency_examples():
    raw = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]])
    mix = torch.tensor([[3.0, 2.0]])
    out = mixture_consistency(raw, mix)
    assert torch.allclose(out, torch.tensor([[[2.0, 1.0], [1.0, 1.0]]]))

    raw = torch.zeros(2, 4, 5)
    mix = torch.randn(2, 5)
    assert torch.allclose(mixture_consistency(raw, mix), (mix / 4).unsqueeze(1).expand(2, 4, 5))

    with pytest.raises(ValueError):
        mixture_consistency(torch.zeros(2, 3, 5), torch.zeros(2, 6))


@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 6))
def test_mixture_consistency_sums_and_is_idempotent(seed, n):
    g = torch.Generator().manual_seed(seed)
    raw = torch.randn(3, n, 20, generator=g, dtype=torch.float64)
    mix = torch.randn(3, 20, generator=g, dtype=torch.float64)
    out = mixture_consistency(raw, mix)
    assert torch.allclose(out.sum(1), mix, atol=1e-12)
    assert torch.allclose(mixture_consistency(out, mix), out, atol=1e-12)


def test_output_shape_and_consistency(tiny_model_cfg):
    params = random_init(tiny_model_cfg, 0, torch.float64)
    x = torch.randn(4, 400, dtype=torch.float64)
    y = separate(params, x, tiny_model_cfg)
    assert y.shape == (4, tiny_model_cfg.n_out, 400)
    assert torch.allclose(y.sum(1), x, atol=1e-12)


@pytest.mark.parametrize("activation", ["sigmoid", "relu"])
def test_zero_init_outputs_mixture_over_n(tiny_model_cfg, activation):
    cfg = SeparatorConfig(**{**tiny_model_cfg.__dict__, "zero_init_output": True, "mask_activation": activation})
    params = random_init(cfg, 3, torch.float64)
    x = torch.randn(3, 300, dtype=torch.float64)
    y = separate(params, x, cfg)
    expected = (x / cfg.n_out).unsqueeze(1).expand_as(y)
    if activation == "relu":
        # all-zero masks: output is exactly the distributed residual
        assert torch.equal(y, expected)
    else:
        assert torch.allclose(y, expected, atol=1e-12)


def test_zero_input_gives_zero_output(tiny_model_cfg):
    params = random_init(tiny_model_cfg, 1, torch.float64)
    y = separate(params, torch.zeros(2, 256, dtype=torch.float64), tiny_model_cfg)
    assert torch.allclose(y, torch.zeros_like(y), atol=1e-12)


def test_random_init_deterministic_and_isolated(tiny_model_cfg):
    torch.manual_seed(123)
    before = torch.rand(1)
    a = random_init(tiny_model_cfg, 5)
    b = random_init(tiny_model_cfg, 5)
    torch.manual_seed(123)
    assert torch.equal(torch.rand(1), before)
    assert torch.equal(a.data, b.data)
    assert not torch.equal(a.data, random_init(tiny_model_cfg, 6).data)


def test_parameter_vector_round_trip(tiny_model_cfg):
    model = build_model(tiny_model_cfg)
    pv = ParameterVector.from_module(model)
    other = build_model(tiny_model_cfg)
    pv.load_into(other)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), other.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    with pytest.raises(ValueError):
        ParameterVector(pv.names, pv.shapes, pv.data[:-1])


def test_checkpoint_round_trip(tmp_path, tiny_model_cfg):
    for dtype in (torch.float32, torch.float64):
        pv = random_init(tiny_model_cfg, 2, dtype)
        path = tmp_path / f"c_{dtype}.bin"
        save_checkpoint(path, pv, {"epoch": 3})
        back, meta = load_checkpoint(path)
        assert meta == {"epoch": 3}
        assert back.index == pv.index
        assert back.data.dtype == dtype and torch.equal(back.data, pv.data)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_gradient_matches_finite_differences(tiny_model_cfg):
    params = random_init(tiny_model_cfg, 4, torch.float64)
    x = torch.randn(2, 200, dtype=torch.float64)
    w = torch.randn(2, tiny_model_cfg.n_out, 200, dtype=torch.float64)

    def f(data):
        return (separate(params.with_data(data), x, tiny_model_cfg) * w).sum()

    data = params.data.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(data), data)
    rng = np.random.default_rng(0)
    h = 1e-6
    for i in rng.choice(data.numel(), 30, replace=False):
        e = torch.zeros_like(params.data)
        e[i] = h
        with torch.no_grad():
            fd = (f(params.data + e) - f(params.data - e)) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-5 * max(1.0, abs(fd))


def test_config_validation():
    with pytest.raises(ValueError):
        SeparatorConfig(n_out=1)
    with pytest.raises(ValueError):
        SeparatorConfig(feature="mel")
    with pytest.raises(ValueError):
        SeparatorConfig(kernel_size=4)
    assert SeparatorConfig().digest() == SeparatorConfig().digest()
    assert SeparatorConfig().digest() != SeparatorConfig(n_out=4).digest()
