import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ecdm.edges import HighPassConfig, edge_condition, extract_edges, highpass_mask, normalize_edges

HARD = HighPassConfig(cutoff_fraction=0.05)


def test_mask_dc_and_nyquist():
    m = highpass_mask(8, 8, HighPassConfig(0.25))
    assert m[0, 0] == 0
    assert m[4, 4] == 1 and m[4, 0] == 1 and m[0, 4] == 1


def test_mask_tiny_cutoff_passes_everything_but_dc():
    m = highpass_mask(12, 10, HighPassConfig(1e-6))
    expected = torch.ones(12, 10, dtype=m.dtype)
    expected[0, 0] = 0
    torch.testing.assert_close(m, expected)


@pytest.mark.parametrize("cfg", [HighPassConfig(0.25), HighPassConfig(0.3, 0.2), HighPassConfig(0.05)])
def test_mask_symmetric_under_negation(cfg):
    m = highpass_mask(8, 8, cfg)
    for u in range(8):
        for v in range(8):
            assert m[u, v] == m[(-u) % 8, (-v) % 8]


def test_soft_mask_monotone_transition():
    cfg = HighPassConfig(0.2, 0.3)
    m = highpass_mask(64, 64, cfg)
    r = torch.sqrt((torch.fft.fftfreq(64).abs() * 2)[:, None] ** 2 + (torch.fft.fftfreq(64).abs() * 2)[None] ** 2)
    order = torch.argsort(r.flatten())
    vals = m.flatten()[order]
    assert torch.all(vals[1:] >= vals[:-1] - 1e-12)
    assert torch.all(m[r >= 0.5] == 1.0)
    assert torch.all(m[r <= 0.2] == 0.0)


@pytest.mark.parametrize("kwargs", [dict(cutoff_fraction=0.0), dict(cutoff_fraction=1.0), dict(soft_width=-0.1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        HighPassConfig(**kwargs)


def test_mask_rejects_tiny_grid():
    with pytest.raises(ValueError):
        highpass_mask(1, 8)


def test_constant_image_gives_zero_edges():
    out = extract_edges(torch.full((1, 16, 20), 0.3), HARD)
    assert out.abs().max() < 1e-6


def test_rejects_degenerate_image():
    with pytest.raises(ValueError):
        extract_edges(torch.zeros(1, 1, 5))


def test_luminance_weights():
    rgb = torch.rand(3, 8, 8)
    gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    torch.testing.assert_close(extract_edges(rgb), extract_edges(gray[None]))


def test_numpy_in_numpy_out():
    a = np.random.default_rng(0).normal(size=(8, 10))
    out = extract_edges(a)
    assert isinstance(out, np.ndarray) and out.shape == (8, 10)


def test_edges_differentiable():
    x = torch.randn(2, 1, 8, 8, requires_grad=True)
    extract_edges(x).pow(2).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_normalized_condition_has_unit_peak():
    x = torch.randn(3, 1, 16, 16)
    c = edge_condition(x)
    torch.testing.assert_close(c.abs().amax(dim=(1, 2, 3)), torch.ones(3))
    assert torch.all(normalize_edges(torch.zeros(1, 1, 4, 4)) == 0)


images = st.integers(0, 2**31 - 1).map(
    lambda s: torch.from_numpy(np.random.default_rng(s).normal(size=(1, 12, 16)) * np.random.default_rng(s + 1).uniform(0.1, 3))
)


@settings(max_examples=100, deadline=None)
@given(images, images)
def test_linearity(a, b):
    torch.testing.assert_close(extract_edges(a + b, HARD), extract_edges(a, HARD) + extract_edges(b, HARD), atol=1e-5, rtol=0)


@settings(max_examples=100, deadline=None)
@given(images)
def test_hard_mask_idempotent(x):
    e = extract_edges(x, HARD)
    torch.testing.assert_close(extract_edges(e, HARD), e, atol=1e-5, rtol=0)


@settings(max_examples=100, deadline=None)
@given(images)
def test_zero_mean_and_energy_bound(x):
    e = extract_edges(x, HARD)
    assert abs(e.mean().item()) < 1e-6 * max(1.0, (x.max() - x.min()).item())
    assert e.norm() <= (x - x.mean()).norm() + 1e-9


def test_imaginary_residue_small():
    x = torch.randn(1, 1, 17, 23, dtype=torch.float64)
    mask = highpass_mask(17, 23, HARD)
    full = torch.fft.ifft2(torch.fft.fft2(x) * mask)
    assert full.imag.abs().max() < 1e-6
