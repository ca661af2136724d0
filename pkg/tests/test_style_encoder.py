import pytest
import torch

from stylemod.catalog import CatalogError, TagAttributeCatalog, TagSpec
from stylemod.style_encoder import (
    SHARED,
    AblationFlags,
    ModulationUnit,
    StyleModulationEncoder,
    adain,
    apply_direction,
)


@pytest.fixture
def catalog():
    return TagAttributeCatalog(tags=(
        TagSpec("glasses", ("with", "without"), mask_region="glasses"),
        TagSpec("bangs", ("with", "without"), mask_region="bangs"),
    ))


@pytest.fixture
def encoder(catalog):
    torch.manual_seed(0)
    return StyleModulationEncoder(catalog, feature_width=16, style_width=24,
                                  semantic_width=32, vector_width=8,
                                  n_tokens=4, attn_dim=8)


class TestAdain:
    def test_identity_modulation(self):
        f = torch.randn(4, 8, 8)
        f = (f - f.mean(dim=(-2, -1), keepdim=True)) / f.std(dim=(-2, -1), unbiased=False, keepdim=True)
        out = adain(f, torch.ones(4), torch.zeros(4))
        assert torch.allclose(out, f, atol=1e-5)

    def test_constant_channel_collapses_to_beta(self):
        f = torch.full((2, 4, 4), 3.0)
        out = adain(f, torch.tensor([2.0, 5.0]), torch.tensor([-1.0, 0.5]))
        assert torch.allclose(out[0], torch.full((4, 4), -1.0))
        assert torch.allclose(out[1], torch.full((4, 4), 0.5))

    def test_two_value_channel_oracle(self):
        # channel {1, 3}: mu=2, sigma=1, normalized {-1, +1}; gamma=2, beta=5 -> {3, 7}
        f = torch.tensor([[[1.0, 3.0]]])
        out = adain(f, torch.tensor([2.0]), torch.tensor([5.0]))
        assert torch.allclose(out, torch.tensor([[[3.0, 7.0]]]), atol=1e-6)

    def test_output_statistics_match_targets(self):
        torch.manual_seed(1)
        f = torch.randn(3, 6, 16, 16) * 2.5 + 1.0
        gamma = torch.rand(3, 6) * 3.0 + 0.1
        beta = torch.randn(3, 6)
        out = adain(f, gamma, beta)
        assert torch.allclose(out.mean(dim=(-2, -1)), beta, atol=1e-5)
        assert torch.allclose(out.var(dim=(-2, -1), unbiased=False).sqrt(), gamma, atol=1e-5)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            adain(torch.randn(4, 8, 8), torch.ones(3), torch.zeros(4))
        with pytest.raises(ValueError):
            adain(torch.randn(4, 0, 8), torch.ones(4), torch.zeros(4))


class TestApplyDirection:
    def test_zero_direction_is_identity(self):
        f = torch.randn(4, 6, 6)
        assert torch.equal(apply_direction(f, torch.zeros_like(f)), f)

    def test_additive_inverse(self):
        f, d = torch.randn(4, 6, 6), torch.randn(4, 6, 6)
        assert torch.allclose(apply_direction(apply_direction(f, d), -d), f, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_direction(torch.randn(4, 6, 6), torch.randn(4, 5, 6))


class TestModulate:
    def test_zero_init_attention_reduces_to_adain(self, encoder):
        f = torch.randn(16, 6, 6)
        s = torch.randn(24)
        out = encoder.modulate(f, s, "glasses", "with")
        unit = encoder.units["glasses"]
        cond = unit.conditioning(s[None], "with")
        dgamma, beta = unit.gb_proj(cond).chunk(2, dim=-1)
        pure = adain(f[None], 1.0 + dgamma, beta)[0]
        assert torch.allclose(out, pure, atol=1e-6)

    def test_nonselected_vector_is_inert(self, encoder):
        f, s = torch.randn(16, 6, 6), torch.randn(24)
        before = encoder.modulate(f, s, "glasses", "with")
        with torch.no_grad():
            encoder.units["glasses"].vectors["without"].add_(5.0)
            encoder.units["bangs"].vectors["with"].add_(5.0)
        after = encoder.modulate(f, s, "glasses", "with")
        assert torch.equal(before, after)

    def test_selected_vector_matters(self, encoder):
        # randomize the gb projection so the conditioning actually reaches AdaIN
        torch.manual_seed(3)
        with torch.no_grad():
            encoder.units["glasses"].gb_proj.weight.normal_()
        f, s = torch.randn(16, 6, 6), torch.randn(24)
        before = encoder.modulate(f, s, "glasses", "with")
        with torch.no_grad():
            encoder.units["glasses"].vectors["with"].add_(1.0)
        after = encoder.modulate(f, s, "glasses", "with")
        assert not torch.allclose(before, after)

    def test_style_code_matters(self, encoder):
        torch.manual_seed(4)
        with torch.no_grad():
            encoder.units["glasses"].gb_proj.weight.normal_()
        f = torch.randn(16, 6, 6)
        a = encoder.modulate(f, torch.randn(24), "glasses", "with")
        b = encoder.modulate(f, torch.randn(24), "glasses", "with")
        assert not torch.allclose(a, b)

    def test_unknown_index_rejected(self, encoder):
        f, s = torch.randn(16, 6, 6), torch.randn(24)
        with pytest.raises(CatalogError):
            encoder.modulate(f, s, "hat", "with")
        with pytest.raises(CatalogError):
            encoder.modulate(f, s, "glasses", "purple")


class TestEncodeSemantic:
    def test_deterministic(self, encoder):
        x, s = torch.randn(3, 48, 48), torch.randn(24)
        c1 = encoder.encode_semantic(x, s, "bangs", "without")
        c2 = encoder.encode_semantic(x, s, "bangs", "without")
        assert torch.equal(c1, c2)
        assert c1.shape == (32,)

    def test_bypass_ignores_modulation_state(self, encoder):
        x = torch.randn(3, 48, 48)
        c1 = encoder.encode_bypass(x)
        with torch.no_grad():
            for p in encoder.units.parameters():
                p.add_(1.0)
        c2 = encoder.encode_bypass(x)
        assert torch.equal(c1, c2)

    def test_batched_matches_shape(self, encoder):
        x, s = torch.randn(5, 3, 48, 48), torch.randn(5, 24)
        c = encoder.encode_semantic(x, s, "glasses", "with", )
        assert c.shape == (5, 32)


class TestAblations:
    def test_no_lv_conditions_on_style_alone(self, catalog):
        torch.manual_seed(0)
        enc = StyleModulationEncoder(catalog, feature_width=16, style_width=24,
                                     semantic_width=32, vector_width=8,
                                     flags=AblationFlags(no_lv=True))
        assert not hasattr(enc.units["glasses"], "vectors")
        assert enc.units["glasses"].gb_proj.in_features == 24
        # attribute choice no longer affects the unit's output
        f, s = torch.randn(16, 6, 6), torch.randn(24)
        a = enc.modulate(f, s, "glasses", "with")
        b = enc.modulate(f, s, "glasses", "without")
        assert torch.equal(a, b)

    def test_no_cam_skips_attention(self, catalog):
        torch.manual_seed(0)
        enc = StyleModulationEncoder(catalog, feature_width=16, style_width=24,
                                     semantic_width=32, vector_width=8,
                                     flags=AblationFlags(no_cam=True))
        assert not hasattr(enc.units["glasses"], "q_proj")
        f, s = torch.randn(16, 6, 6), torch.randn(24)
        out = enc.modulate(f, s, "glasses", "with")
        assert out.shape == f.shape

    def test_no_hd_shares_a_single_unit_and_vector(self, catalog):
        torch.manual_seed(0)
        enc = StyleModulationEncoder(catalog, feature_width=16, style_width=24,
                                     semantic_width=32, vector_width=8,
                                     flags=AblationFlags(no_hd=True))
        assert list(enc.units.keys()) == [SHARED]
        assert list(enc.units[SHARED].vectors.keys()) == [SHARED]
        f, s = torch.randn(16, 6, 6), torch.randn(24)
        a = enc.modulate(f, s, "glasses", "with")
        b = enc.modulate(f, s, "bangs", "without")
        assert torch.equal(a, b)


class TestGradientIsolation:
    def test_nonselected_parameters_get_no_gradient(self, encoder):
        f = torch.randn(2, 16, 6, 6)
        s = torch.randn(2, 24, requires_grad=True)
        out = encoder.encode_semantic(torch.randn(2, 3, 48, 48), s, "glasses", "with")
        out.sum().backward()
        u = encoder.units["glasses"]
        assert u.vectors["with"].grad is not None
        assert u.vectors["without"].grad is None
        for p in encoder.units["bangs"].parameters():
            assert p.grad is None
