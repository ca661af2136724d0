import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stylemod.directions import (
    DirectionError,
    DirectionRejected,
    SemanticDirection,
    global_direction,
    load_direction_cache,
    mask_swap,
    raw_direction,
    rescale_direction,
    save_direction_cache,
)

identity = lambda x: x


def direction(values, kind="raw_swap"):
    return SemanticDirection(values=torch.as_tensor(values, dtype=torch.float32), kind=kind)


class TestGlobalDirection:
    def test_identical_sets_cancel(self):
        imgs = torch.randn(4, 2)
        d = global_direction(imgs, imgs, identity)
        assert torch.allclose(d.values, torch.zeros(2), atol=1e-6)

    def test_singleton_sets(self):
        a, b = torch.tensor([[1.0, 2.0]]), torch.tensor([[4.0, 0.0]])
        d = global_direction(a, b, identity)
        assert torch.allclose(d.values, torch.tensor([3.0, -2.0]))

    def test_mean_difference_by_hand(self):
        with_set = torch.tensor([[0.0, 0.0], [2.0, 0.0]])
        without_set = torch.tensor([[1.0, 1.0], [3.0, 1.0]])
        d = global_direction(with_set, without_set, identity)
        # mean(without) - mean(with) = (2,1) - (1,0) = (1,1)
        assert torch.allclose(d.values, torch.tensor([1.0, 1.0]))

    def test_empty_set_rejected(self):
        with pytest.raises(DirectionError):
            global_direction(torch.zeros(0, 2), torch.zeros(3, 2), identity)


class TestMaskSwap:
    def test_all_zero_mask_rejected(self):
        x, r = torch.zeros(3, 4, 4), torch.ones(3, 4, 4)
        with pytest.raises(DirectionError):
            mask_swap(x, r, torch.zeros(4, 4))

    def test_all_one_mask_returns_donor(self):
        x, r = torch.zeros(3, 4, 4), torch.rand(3, 4, 4)
        out = mask_swap(x, r, torch.ones(4, 4))
        assert torch.equal(out, r)

    def test_pixel_exact_composite(self):
        x, r = torch.rand(3, 6, 6), torch.rand(3, 6, 6)
        mask = torch.zeros(6, 6)
        mask[2:4, 1:5] = 1.0
        out = mask_swap(x, r, mask)
        inside = mask.bool().expand(3, -1, -1)
        assert torch.equal(out[inside], r[inside])
        assert torch.equal(out[~inside], x[~inside])

    def test_rejects_mismatch_and_nonbinary(self):
        with pytest.raises(DirectionError):
            mask_swap(torch.zeros(3, 4, 4), torch.zeros(3, 5, 5), torch.ones(4, 4))
        with pytest.raises(DirectionError):
            mask_swap(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4), torch.full((4, 4), 0.5))


class TestRawDirection:
    def test_no_change_gives_zero(self):
        x = torch.rand(3, 4, 4)
        d = raw_direction(x, x.clone(), identity)
        assert torch.allclose(d.values, torch.zeros_like(x))

    def test_antisymmetry(self):
        a, b = torch.rand(3, 4, 4), torch.rand(3, 4, 4)
        d_ab = raw_direction(a, b, identity)
        d_ba = raw_direction(b, a, identity)
        assert torch.allclose(d_ab.values, -d_ba.values, atol=1e-6)


class TestRescaleDirection:
    def test_collinear_identity(self):
        d = rescale_direction(direction([1.0, 0.0]), direction([1.0, 0.0], "global"))
        assert torch.allclose(d.values, torch.tensor([1.0, 0.0]))
        assert d.kind == "image_specific"

    def test_positive_scaling_invariance(self):
        d = rescale_direction(direction([2.0, 0.0]), direction([1.0, 0.0], "global"))
        assert torch.allclose(d.values, torch.tensor([1.0, 0.0]))

    def test_projection_oracle(self):
        d_t = rescale_direction(direction([1.0, 1.0]), direction([1.0, 0.0], "global"))
        assert torch.allclose(d_t.values, torch.tensor([1.0, 1.0]))
        # orthogonal projection of d_t onto d_s recovers d_s exactly
        s = torch.tensor([1.0, 0.0])
        proj = (d_t.values @ s / (s @ s)) * s
        assert torch.allclose(proj, s)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=60, deadline=None)
    def test_projection_identity_random(self, seed):
        g = torch.Generator().manual_seed(seed)
        d_m = torch.randn(16, generator=g)
        d_s = torch.randn(16, generator=g)
        try:
            d_t = rescale_direction(direction(d_m), direction(d_s, "global"))
        except DirectionRejected:
            return
        s = d_s.double()
        proj = (d_t.values.double() @ s / (s @ s)) * s
        assert torch.allclose(proj, s, rtol=1e-6, atol=1e-9)

    @given(st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=40, deadline=None)
    def test_scale_invariance_random(self, lam):
        g = torch.Generator().manual_seed(7)
        d_m = torch.randn(8, generator=g)
        d_s = torch.randn(8, generator=g)
        a = rescale_direction(direction(d_m), direction(d_s, "global"))
        b = rescale_direction(direction(lam * d_m), direction(d_s, "global"))
        assert torch.allclose(a.values, b.values, rtol=1e-4, atol=1e-6)

    def test_degenerate_collapse(self):
        d_m = torch.tensor([0.5, -1.0, 2.0])
        d_t = rescale_direction(direction(3.0 * d_m), direction(d_m, "global"))
        assert torch.allclose(d_t.values, d_m, rtol=1e-6)

    def test_near_orthogonal_rejected(self):
        with pytest.raises(DirectionRejected):
            rescale_direction(direction([0.0, 1.0]), direction([1.0, 0.0], "global"))
        with pytest.raises(DirectionRejected):
            rescale_direction(direction([1e-9, 1.0]), direction([1.0, 0.0], "global"))

    def test_zero_global_rejected(self):
        with pytest.raises(DirectionError):
            rescale_direction(direction([1.0, 1.0]), direction([0.0, 0.0], "global"))

    def test_zero_swap_rejected(self):
        with pytest.raises(DirectionRejected):
            rescale_direction(direction([0.0, 0.0]), direction([1.0, 0.0], "global"))


class TestDirectionCache:
    def test_round_trip(self, tmp_path):
        d1 = SemanticDirection(values=torch.randn(4, 3, 3), kind="global",
                               tag="glasses", from_attribute="with", to_attribute="without")
        d2 = SemanticDirection(values=torch.randn(4, 3, 3), kind="global",
                               tag="glasses", from_attribute="without", to_attribute="with")
        path = tmp_path / "cache.npz"
        save_direction_cache(path, {("glasses", "with", "without"): d1,
                                    ("glasses", "without", "with"): d2})
        loaded = load_direction_cache(path)
        assert set(loaded) == {("glasses", "with", "without"), ("glasses", "without", "with")}
        assert torch.equal(loaded[("glasses", "with", "without")].values, d1.values)
        assert loaded[("glasses", "without", "with")].values.shape == (4, 3, 3)
