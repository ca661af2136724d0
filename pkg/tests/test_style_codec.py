import pytest
import torch

from stylemod.catalog import CatalogError, TagAttributeCatalog, TagSpec
from stylemod.style_codec import LatentStyleMapper, ReferenceStyleExtractor, StyleCode


@pytest.fixture
def catalog():
    return TagAttributeCatalog(tags=(
        TagSpec("glasses", ("with", "without")),
        TagSpec("bangs", ("with", "without")),
    ))


@pytest.fixture
def mapper(catalog):
    torch.manual_seed(0)
    return LatentStyleMapper(catalog, noise_width=16, style_width=24)


@pytest.fixture
def extractor(catalog):
    torch.manual_seed(0)
    return ReferenceStyleExtractor(catalog, style_width=24, trunk_width=16)


class TestMapper:
    def test_deterministic(self, mapper):
        z = torch.randn(16)
        a = mapper.map_latent(z, "glasses", "with")
        b = mapper.map_latent(z, "glasses", "with")
        assert torch.equal(a.values, b.values)
        assert a.origin == "latent" and a.tag == "glasses" and a.attribute == "with"

    def test_other_attribute_branch_is_inert(self, mapper):
        z = torch.randn(16)
        before = mapper.map_latent(z, "glasses", "with")
        with torch.no_grad():
            for p in mapper.attr_layers["glasses@without"].parameters():
                p.add_(3.0)
        after = mapper.map_latent(z, "glasses", "with")
        assert torch.equal(before.values, after.values)

    def test_other_tag_branch_is_inert(self, mapper):
        z = torch.randn(16)
        before = mapper.map_latent(z, "glasses", "with")
        with torch.no_grad():
            for p in mapper.tag_layers["bangs"].parameters():
                p.add_(3.0)
            for p in mapper.attr_layers["bangs@with"].parameters():
                p.add_(3.0)
        after = mapper.map_latent(z, "glasses", "with")
        assert torch.equal(before.values, after.values)

    def test_rejects_unknown_index_and_bad_width(self, mapper):
        with pytest.raises(CatalogError):
            mapper.map_latent(torch.randn(16), "hat", "with")
        with pytest.raises(CatalogError):
            mapper.map_latent(torch.randn(16), "glasses", "blue")
        with pytest.raises(ValueError):
            mapper.map_latent(torch.randn(8), "glasses", "with")


class TestExtractor:
    def test_deterministic(self, extractor):
        y = torch.randn(3, 48, 48)
        a = extractor.extract_style(y, "bangs")
        b = extractor.extract_style(y, "bangs")
        assert torch.equal(a.values, b.values)
        assert a.origin == "reference" and a.attribute is None

    def test_other_head_is_inert(self, extractor):
        y = torch.randn(3, 48, 48)
        before = extractor.extract_style(y, "glasses")
        with torch.no_grad():
            for p in extractor.heads["bangs"].parameters():
                p.add_(2.0)
        after = extractor.extract_style(y, "glasses")
        assert torch.equal(before.values, after.values)

    def test_unknown_tag_rejected(self, extractor):
        with pytest.raises(CatalogError):
            extractor.extract_style(torch.randn(3, 48, 48), "hat")


class TestWidthAgreement:
    def test_mapper_and_extractor_interchangeable(self, mapper, extractor):
        s_latent = mapper.map_latent(torch.randn(16), "glasses", "with")
        s_ref = extractor.extract_style(torch.randn(3, 48, 48), "glasses")
        assert s_latent.width == s_ref.width == 24


class TestSerialization:
    def test_round_trip(self, tmp_path, mapper):
        code = mapper.map_latent(torch.randn(16), "glasses", "without")
        path = tmp_path / "code.stylecode"
        code.save(path)
        loaded = StyleCode.load(path)
        assert torch.equal(loaded.values, code.values)
        assert loaded.origin == "latent"
        assert loaded.tag == "glasses" and loaded.attribute == "without"

    def test_width_prefix_layout(self, tmp_path):
        code = StyleCode(values=torch.tensor([1.0, -2.0, 0.5]), origin="reference", tag="bangs")
        blob = code.to_bytes()
        assert blob[:4] == (3).to_bytes(4, "little")
        assert len(blob) == 4 + 3 * 4

    def test_truncated_payload_rejected(self):
        code = StyleCode(values=torch.randn(4), origin="reference", tag="bangs")
        blob = code.to_bytes()[:-4]
        with pytest.raises(ValueError):
            StyleCode.from_bytes(blob, code.metadata())
