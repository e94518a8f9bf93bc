import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from remixsep.signals import (
    EPS,
    Spectrogram,
    Waveform,
    analysis_window,
    istft,
    normalize_mixture,
    read_wav,
    stft,
    write_wav,
)


def dft_oracle(x, fft_size, win_size, hop):
    """Frame-by-frame DFT with an explicit loop, same padding rule as stft()."""
    pad = fft_size // 2
    xp = np.pad(x, pad, mode="reflect" if len(x) > pad else "constant")
    n = np.arange(win_size)
    win = np.zeros(fft_size)
    left = (fft_size - win_size) // 2
    win[left : left + win_size] = 0.5 - 0.5 * np.cos(2 * np.pi * n / win_size)
    k = np.arange(fft_size // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(fft_size)[None, :] / fft_size)
    frames = []
    for start in range(0, len(xp) - fft_size + 1, hop):
        frames.append(basis @ (xp[start : start + fft_size] * win))
    return np.array(frames)


def ola_oracle(spec, fft_size, win_size, hop, length):
    win = analysis_window(fft_size, win_size, dtype=torch.float64).numpy()
    total = (len(spec) - 1) * hop + fft_size
    out, wsum = np.zeros(total), np.zeros(total)
    for i, frame in enumerate(spec):
        start = i * hop
        out[start : start + fft_size] += np.fft.irfft(frame, n=fft_size) * win
        wsum[start : start + fft_size] += win**2
    pad = fft_size // 2
    return out[pad : pad + length] / wsum[pad : pad + length]


def test_zero_waveform_gives_zero_spectrogram():
    s = stft(torch.zeros(1000, dtype=torch.float64))
    assert torch.count_nonzero(s.data) == 0
    assert torch.count_nonzero(istft(s, 1000)) == 0


def test_frame_count_and_bins():
    s = stft(torch.randn(4096), 256, 256, 64)
    assert s.data.shape == (4096 // 64 + 1, 129)
    s = stft(torch.randn(1000), 512, 400, 160)
    assert s.data.shape == ((1000 + 512 - 512) // 160 + 1, 257)


def test_matches_loop_dft(rng):
    x = rng.standard_normal(777)
    for fft, win, hop in [(256, 256, 64), (64, 48, 16), (512, 400, 160)]:
        ours = stft(torch.as_tensor(x), fft, win, hop).data.numpy()
        np.testing.assert_allclose(ours, dft_oracle(x, fft, win, hop), atol=1e-9)


def test_bin_centred_sinusoid_concentrates_energy():
    fft = 256
    n = np.arange(4096)
    x = np.cos(2 * np.pi * 16 * n / fft)
    spec = np.abs(dft_oracle(x, fft, fft, 64)) ** 2
    interior = spec[4:-4]  # away from reflection edges
    peak = interior[:, 16]
    # periodic Hann leaks into the two neighbouring bins; 'one bin' here is the main lobe
    lobe = interior[:, 15:18].sum(1)
    assert np.all(lobe / interior.sum(1) >= 0.99)
    ours = np.abs(stft(torch.as_tensor(x), fft, fft, 64).data.numpy()[4:-4]) ** 2
    assert np.all(ours.argmax(1) == 16)
    np.testing.assert_allclose(ours[:, 16], peak, rtol=1e-9)


def test_round_trip_t4096(rng):
    x = torch.as_tensor(rng.standard_normal((3, 4096)))
    y = istft(stft(x, 256, 256, 64), 4096)
    assert float((y - x).norm() / x.norm()) < 1e-5


def test_istft_matches_overlap_add_oracle(rng):
    x = rng.standard_normal(1500)
    s = stft(torch.as_tensor(x), 128, 96, 32)
    expected = ola_oracle(s.data.numpy(), 128, 96, 32, 1500)
    np.testing.assert_allclose(istft(s, 1500).numpy(), expected, atol=1e-12)
    np.testing.assert_allclose(expected, x, atol=1e-10)


def test_single_frame_closed_form(rng):
    # one frame at offset 0; after trimming fft//2 of padding the output is the
    # second half of the frame, divided back out of the window
    fft = win = 64
    g = rng.standard_normal(fft)
    w = analysis_window(fft, win, dtype=torch.float64).numpy()
    data = torch.as_tensor(np.fft.rfft(g * w))[None, :]
    y = istft(Spectrogram(data, fft, win, 16), fft // 2).numpy()
    np.testing.assert_allclose(y, g[fft // 2 :], rtol=1e-5, atol=1e-5)


def test_istft_length_padding_and_trim(rng):
    x = torch.as_tensor(rng.standard_normal(600))
    s = stft(x, 64, 64, 16)
    assert istft(s, 500).shape == (500,)
    y = istft(s, 700)
    assert y.shape == (700,)
    np.testing.assert_allclose(y[:600].numpy(), x.numpy(), atol=1e-10)


def test_rejects_short_signal_and_bad_params():
    with pytest.raises(ValueError):
        stft(torch.randn(100), 256, 256, 64)
    with pytest.raises(ValueError):
        stft(torch.randn(1000), 128, 256, 64)
    with pytest.raises(ValueError):
        stft(torch.randn(1000), 256, 128, 200)
    s = stft(torch.randn(1000), 256, 256, 64)
    bad = Spectrogram(s.data, 512, 256, 64)
    with pytest.raises(ValueError, match="bins"):
        istft(bad, 1000)


def test_batched_leading_dims(rng):
    x = torch.as_tensor(rng.standard_normal((2, 3, 800)))
    s = stft(x, 128, 128, 32)
    assert s.data.shape[:2] == (2, 3)
    np.testing.assert_allclose(istft(s, 800).numpy(), x.numpy(), atol=1e-10)


@given(
    T=st.integers(256, 3000),
    seed=st.integers(0, 2**31 - 1),
    params=st.sampled_from([(256, 256, 64), (256, 256, 128), (512, 400, 160), (128, 100, 25)]),
)
def test_perfect_reconstruction_property(T, seed, params):
    fft, win, hop = params
    if T < win:
        T = win
    x = torch.as_tensor(np.random.default_rng(seed).standard_normal(T))
    y = istft(stft(x, fft, win, hop), T)
    assert float((y - x).norm() / x.norm()) < 1e-5


@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_stft_linearity(seed, a, b):
    g = np.random.default_rng(seed)
    u, v = (torch.as_tensor(g.standard_normal(1024)) for _ in range(2))
    lhs = stft(a * u + b * v).data
    rhs = a * stft(u).data + b * stft(v).data
    assert float((lhs - rhs).abs().max()) < 1e-6


def test_normalize_examples():
    out = normalize_mixture(torch.tensor([5.0, 5.0, 5.0, 5.0], dtype=torch.float64))
    assert torch.all(out.wave == 0) and out.mean.item() == 5.0 and out.std.item() == EPS
    assert bool(out.degenerate)

    x = torch.tensor([1.0, -1.0, 1.0, -1.0], dtype=torch.float64)
    out = normalize_mixture(x)
    assert torch.equal(out.wave, x) and out.mean.item() == 0 and out.std.item() == 1
    assert not bool(out.degenerate)

    out = normalize_mixture(torch.tensor([0.0, 2.0, 0.0, 2.0], dtype=torch.float64))
    assert out.wave.tolist() == [-1.0, 1.0, -1.0, 1.0]
    assert out.mean.item() == 1.0 and out.std.item() == 1.0


@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-3, 1e3), offset=st.floats(-10, 10))
def test_normalize_property(seed, scale, offset):
    x = torch.as_tensor(np.random.default_rng(seed).standard_normal((2, 500)) * scale + offset)
    out = normalize_mixture(x)
    assert float(out.wave.mean(-1).abs().max()) < 1e-6
    assert float((out.wave.std(-1, unbiased=False) - 1).abs().max()) < 1e-6
    np.testing.assert_allclose((out.wave * out.std + out.mean).numpy(), x.numpy(), rtol=1e-9, atol=1e-9)


def test_wav_round_trip(tmp_path, rng):
    x = (0.1 * rng.standard_normal(800)).astype(np.float32)
    write_wav(tmp_path / "a.wav", x, 8000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 8000 and y.dtype == np.float32 and np.array_equal(x, y)

    write_wav(tmp_path / "b.wav", x, 16000, pcm16=True)
    y, sr = read_wav(tmp_path / "b.wav")
    assert sr == 16000 and np.all(np.abs(y - x) <= 1 / 32768) and y.min() >= -1 and y.max() < 1


def test_waveform_validation():
    Waveform(np.ones(4), 8000)
    with pytest.raises(ValueError):
        Waveform(np.array([1.0, np.nan]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.ones(4), 0)
