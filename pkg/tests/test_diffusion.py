import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stylemod.diffusion import (
    DiffusionError,
    LatentImage,
    build_schedule,
    ddim_reverse_step,
    ddim_step,
    decode,
    encode,
    noise_image,
)


def constant_denoiser(value: float):
    def denoiser(x, t, c):
        return torch.full_like(x, value)

    return denoiser


ZERO = constant_denoiser(0.0)


class TestBuildSchedule:
    def test_single_step(self):
        s = build_schedule(1, [0.5])
        assert s.alpha_bar.tolist() == [1.0, 0.5]

    def test_cumulative_product_by_hand(self):
        s = build_schedule(3, [0.1, 0.1, 0.1])
        # hand-computed cumulative product: 1, 0.9, 0.81, 0.729
        assert np.allclose(s.alpha_bar, [1.0, 0.9, 0.81, 0.729], atol=1e-12)

    def test_exact_recurrence(self):
        s = build_schedule(50, {"kind": "linear", "start": 1e-4, "end": 0.02})
        for t in range(1, s.T + 1):
            assert s.alpha_bar[t] == s.alpha_bar[t - 1] * (1.0 - s.beta[t - 1])

    @given(st.integers(min_value=1, max_value=200), st.floats(min_value=1e-4, max_value=0.99))
    @settings(max_examples=30, deadline=None)
    def test_strictly_decreasing(self, T, b):
        s = build_schedule(T, {"kind": "constant", "value": b})
        assert (np.diff(s.alpha_bar) < 0).all()
        assert s.alpha_bar[0] == 1.0
        assert ((s.alpha_bar > 0) & (s.alpha_bar <= 1)).all()

    def test_rejects_bad_inputs(self):
        with pytest.raises(DiffusionError):
            build_schedule(0, [0.1])
        with pytest.raises(DiffusionError):
            build_schedule(2, [0.1, 1.0])
        with pytest.raises(DiffusionError):
            build_schedule(2, [0.0, 0.1])
        with pytest.raises(DiffusionError):
            build_schedule(2, {"kind": "nope"})


class TestNoiseImage:
    def setup_method(self):
        self.s = build_schedule(3, [0.1, 0.1, 0.1])

    def test_t0_is_identity(self):
        x0 = LatentImage(torch.randn(3, 4, 4), 0)
        out = noise_image(x0, 0, torch.randn(3, 4, 4), self.s)
        assert torch.equal(out.values, x0.values)
        assert out.step == 0

    def test_alpha_to_zero_limit_returns_noise(self):
        s = build_schedule(8, {"kind": "constant", "value": 0.999})
        x0 = LatentImage(torch.randn(2, 4, 4), 0)
        eps = torch.randn(2, 4, 4)
        out = noise_image(x0, 8, eps, s)
        assert torch.allclose(out.values, eps, atol=1e-3)

    def test_scalar_closed_form(self):
        # alpha=0.25, x0=2, eps=1 -> 0.5*2 + sqrt(0.75)*1
        s = build_schedule(1, [0.75])
        x0 = LatentImage(torch.tensor([[[2.0]]]), 0)
        out = noise_image(x0, 1, torch.tensor([[[1.0]]]), s)
        expected = 0.5 * 2.0 + math.sqrt(0.75) * 1.0  # = 1.8660...
        assert out.values.item() == pytest.approx(expected, abs=1e-6)
        assert out.values.item() == pytest.approx(1.8660, abs=1e-4)

    def test_rejects_shape_mismatch_and_range(self):
        x0 = LatentImage(torch.zeros(1, 2, 2), 0)
        with pytest.raises(DiffusionError):
            noise_image(x0, 1, torch.zeros(1, 2, 3), self.s)
        with pytest.raises(DiffusionError):
            noise_image(x0, 4, torch.zeros(1, 2, 2), self.s)


def schedule_with_alphas(alphas):
    """Build a schedule whose alpha_bar matches the given sequence exactly."""
    alphas = np.asarray(alphas, dtype=np.float64)
    beta = 1.0 - alphas[1:] / alphas[:-1]
    return build_schedule(len(beta), beta)


class TestSteps:
    def test_step_with_zero_denoiser_rescales(self):
        s = schedule_with_alphas([1.0, 0.81, 0.25])
        x = LatentImage(torch.randn(3, 4, 4), 2)
        out = ddim_step(x, 2, None, s, ZERO)
        assert torch.allclose(out.values, math.sqrt(0.81 / 0.25) * x.values, atol=1e-5)

    def test_degenerate_constant_segment_is_identity(self):
        # alpha_{t-1} == alpha_t is unreachable via valid betas; check the
        # transport algebra directly instead.
        from stylemod.diffusion import _transport

        x = torch.randn(3, 4, 4)
        for eps_val in (0.0, 1.0, -0.7):
            out = _transport(x, 0.5, 0.5, torch.full_like(x, eps_val))
            assert torch.allclose(out, x, atol=1e-6)

    def test_step_scalar_closed_form(self):
        # alpha_t=0.25, alpha_{t-1}=0.81, x_t=1.8660, eps=1
        s = schedule_with_alphas([1.0, 0.81, 0.25])
        x = LatentImage(torch.tensor([[[1.8660]]]), 2)
        out = ddim_step(x, 2, None, s, constant_denoiser(1.0))
        expected = 0.9 * ((1.8660 - math.sqrt(0.75)) / 0.5) + math.sqrt(0.19) * 1.0
        assert out.values.item() == pytest.approx(expected, abs=1e-5)
        assert out.values.item() == pytest.approx(2.2359, abs=1e-3)

    def test_reverse_with_zero_denoiser_rescales(self):
        s = schedule_with_alphas([1.0, 0.81, 0.25])
        x = LatentImage(torch.randn(3, 4, 4), 1)
        out = ddim_reverse_step(x, 1, None, s, ZERO)
        assert torch.allclose(out.values, math.sqrt(0.25 / 0.81) * x.values, atol=1e-6)

    def test_reverse_scalar_closed_form(self):
        # alpha_t=0.81, alpha_{t+1}=0.25, x_t=1, eps=0.5
        s = schedule_with_alphas([1.0, 0.81, 0.25])
        x = LatentImage(torch.tensor([[[1.0]]]), 1)
        out = ddim_reverse_step(x, 1, None, s, constant_denoiser(0.5))
        expected = 0.5 * ((1.0 - math.sqrt(0.19) * 0.5) / 0.9) + math.sqrt(0.75) * 0.5
        assert out.values.item() == pytest.approx(expected, abs=1e-6)
        assert out.values.item() == pytest.approx(0.8674, abs=1e-4)

    @given(st.floats(min_value=-2.0, max_value=2.0))
    @settings(max_examples=25, deadline=None)
    def test_step_inverts_reverse_step(self, eps_val):
        s = build_schedule(5, {"kind": "linear", "start": 0.05, "end": 0.3})
        den = constant_denoiser(eps_val)
        x = LatentImage(torch.randn(2, 3, 3), 2)
        up = ddim_reverse_step(x, 2, None, s, den)
        back = ddim_step(up, 3, None, s, den)
        assert torch.allclose(back.values, x.values, atol=1e-5)

    def test_step_bounds(self):
        s = build_schedule(3, [0.1, 0.1, 0.1])
        with pytest.raises(DiffusionError):
            ddim_step(LatentImage(torch.zeros(1, 2, 2), 0), 0, None, s, ZERO)
        with pytest.raises(DiffusionError):
            ddim_reverse_step(LatentImage(torch.zeros(1, 2, 2), 3), 3, None, s, ZERO)
        with pytest.raises(DiffusionError):
            ddim_step(LatentImage(torch.zeros(1, 2, 2), 1), 2, None, s, ZERO)


class TestEncodeDecode:
    def test_round_trip_constant_denoiser(self):
        s = build_schedule(20, {"kind": "linear", "start": 1e-4, "end": 0.02})
        den = constant_denoiser(0.3)
        x = torch.rand(3, 8, 8) * 2 - 1
        lat = encode(x, None, s, den)
        assert lat.step == 20
        back = decode(lat, None, s, den)
        assert (back - x).abs().max().item() <= 1e-4

    def test_round_trip_with_substeps(self):
        s = build_schedule(100, {"kind": "linear", "start": 1e-4, "end": 0.02})
        steps = s.substeps(10)
        den = constant_denoiser(-0.5)
        x = torch.rand(3, 6, 6) * 2 - 1
        lat = encode(x, None, s, den, substeps=steps)
        assert lat.step == 100
        back = decode(lat, None, s, den, substeps=steps)
        assert (back - x).abs().max().item() <= 1e-4

    def test_shapes_preserved_and_deterministic(self):
        s = build_schedule(10, {"kind": "linear", "start": 0.01, "end": 0.1})
        den = constant_denoiser(0.1)
        x = torch.rand(4, 3, 6, 6) * 2 - 1
        lat1 = encode(x, None, s, den)
        lat2 = encode(x, None, s, den)
        assert lat1.values.shape == x.shape
        assert torch.equal(lat1.values, lat2.values)
        out1 = decode(lat1, None, s, den)
        out2 = decode(lat2, None, s, den)
        assert torch.equal(out1, out2)

    def test_decode_clamps_to_value_convention(self):
        s = build_schedule(5, {"kind": "constant", "value": 0.2})
        lat = LatentImage(torch.full((1, 2, 2), 4.0), 5)
        out = decode(lat, None, s, ZERO)
        assert out.max() <= 1.0 and out.min() >= -1.0

    def test_bad_substep_sequences(self):
        s = build_schedule(10, {"kind": "constant", "value": 0.05})
        x = torch.zeros(1, 2, 2)
        with pytest.raises(DiffusionError):
            encode(x, None, s, ZERO, substeps=[1, 5, 10])
        with pytest.raises(DiffusionError):
            encode(x, None, s, ZERO, substeps=[0, 5, 5, 10])
        with pytest.raises(DiffusionError):
            encode(x, None, s, ZERO, substeps=[0, 11])
