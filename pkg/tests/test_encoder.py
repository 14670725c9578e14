"""
Tests for the acoustic encoder and its parameter tags.
"""

import pytest
import torch

from takws.core.errors import MissingConditioningError, ShapeError
from takws.models.schemas import ALL_GROUPS, LayerGroupId, ParamKind
from takws.networks.encoder import build_encoder

G = LayerGroupId


@pytest.fixture(scope="module")
def default_encoder():
    return build_encoder()


def test_default_total_parameters(default_encoder):
    """Verify the default encoder lands on ~2.21 M parameters."""
    total = default_encoder.count_parameters()

    assert total == 2_193_760
    assert abs(total - 2_210_000) / 2_210_000 < 0.05


@pytest.mark.parametrize(
    "group, expected",
    [(G.G0, 512), (G.G1, 1472), (G.G2, 1472), (G.G3, 1472), (G.G4, 0), (G.G5, 3072), (G.G6, 1024)],
)
def test_bn_counts_per_group(default_encoder, group, expected):
    """Verify BN parameter counts per layer group."""
    assert default_encoder.count_parameters(groups=[group], kinds=[ParamKind.BN]) == expected


def test_all_bn_and_se_counts(default_encoder):
    """Verify aggregate BN and per-block SE counts."""
    assert default_encoder.count_parameters(kinds=[ParamKind.BN]) == 9024
    for group in (G.G1, G.G2, G.G3):
        assert default_encoder.count_parameters(groups=[group], kinds=[ParamKind.SE]) == 32_768


def test_tags_partition_parameters(tiny_config):
    """Verify every parameter is tagged exactly once and groups sum to the total."""
    encoder = build_encoder(tiny_config)
    encoder.set_activation_sites([G.G1, G.G4])

    names = [t.name for t in encoder.list_parameters()]
    assert sorted(names) == sorted(n for n, _ in encoder.named_parameters())
    by_group = sum(encoder.count_parameters(groups=[g]) for g in ALL_GROUPS)
    assert by_group == sum(p.numel() for p in encoder.parameters())


def test_site_counts(default_encoder):
    """Verify activation sites per group: scale + 1 per block, one elsewhere."""
    assert default_encoder.site_count(G.G0) == 1
    assert default_encoder.site_count(G.G1) == 9
    assert default_encoder.site_count(G.G4) == 1
    assert default_encoder.site_count(G.G5) == 1
    assert default_encoder.site_count(G.G6) == 0


def test_laf_site_parameter_count(tiny_config):
    """Verify one installed site adds d*a + a parameters tagged LAF."""
    encoder = build_encoder(tiny_config)
    before = encoder.count_parameters()
    encoder.set_activation_sites([G.G4])

    assert encoder.count_parameters() - before == 8 * 6 + 6
    assert encoder.count_parameters(groups=[G.G4], kinds=[ParamKind.LAF]) == 54

    encoder.clear_activation_sites()
    assert encoder.count_parameters() == before


def test_output_is_unit_norm(tiny_config, fixed_batch):
    """Verify embeddings are L2-normalized with shape (B, d)."""
    encoder = build_encoder(tiny_config).eval()
    with torch.no_grad():
        ae = encoder(fixed_batch)

    assert ae.shape == (3, 8)
    assert torch.allclose(ae.norm(dim=-1), torch.ones(3), atol=1e-5)


def test_single_utterance_and_any_length(tiny_config):
    """Verify (T, F) input returns (d,) and the length only changes values, not shapes."""
    encoder = build_encoder(tiny_config).eval()
    with torch.no_grad():
        short = encoder(torch.randn(5, tiny_config.n_mels))
        long = encoder(torch.randn(200, tiny_config.n_mels))

    assert short.shape == (8,)
    assert long.shape == (8,)


def test_eval_forward_is_deterministic(tiny_config, fixed_batch):
    """Verify two evaluation passes give bitwise equal outputs."""
    encoder = build_encoder(tiny_config).eval()
    with torch.no_grad():
        assert torch.equal(encoder(fixed_batch), encoder(fixed_batch))


def test_rejects_bad_features(tiny_config):
    """Verify wrong bin counts, empty sequences and NaNs raise ShapeError."""
    encoder = build_encoder(tiny_config).eval()

    with pytest.raises(ShapeError):
        encoder(torch.randn(2, 10, tiny_config.n_mels + 1))
    with pytest.raises(ShapeError):
        encoder(torch.randn(2, 0, tiny_config.n_mels))
    bad = torch.randn(2, 10, tiny_config.n_mels)
    bad[0, 3, 1] = float("nan")
    with pytest.raises(ShapeError):
        encoder(bad)


def test_sites_need_conditioning(tiny_config, fixed_batch):
    """Verify a forward without TE fails once a learnable activation is installed."""
    encoder = build_encoder(tiny_config).eval()
    encoder.set_activation_sites([G.G4])

    with pytest.raises(MissingConditioningError):
        encoder(fixed_batch)
    with pytest.raises(ShapeError):
        encoder(fixed_batch, torch.randn(5))


def test_clearing_sites_restores_relu(tiny_config, fixed_batch):
    """Verify clear_activation_sites returns the encoder to its original function."""
    encoder = build_encoder(tiny_config).eval()
    with torch.no_grad():
        before = encoder(fixed_batch)
        encoder.set_activation_sites([G.G0, G.G2, G.G5])
        conditioned = encoder(fixed_batch, torch.nn.functional.normalize(torch.randn(8), dim=0))
        encoder.clear_activation_sites()
        after = encoder(fixed_batch)

    assert not torch.equal(before, conditioned)
    assert torch.equal(before, after)


def test_frames_then_pool_matches_forward(tiny_config, fixed_batch):
    """Verify embed_frames + pool_embed composes to the full forward."""
    encoder = build_encoder(tiny_config).eval()
    with torch.no_grad():
        frames = encoder.embed_frames(fixed_batch)
        assert frames.shape == (3, 3 * 16, fixed_batch.shape[1])
        assert torch.allclose(encoder.pool_embed(frames), encoder(fixed_batch), atol=1e-6)
