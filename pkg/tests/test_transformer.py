import numpy as np
import pytest
import torch

from objcompose.errors import ParameterError, ShapeError
from objcompose.transformer import ModelConfig, build_denoiser, count_params, mask_tokens

from oracles import enumerate_params, gradient_check

SMALL = ModelConfig(latent_size=8, width=32, heads=4, encoder_depth=2, decoder_depth=1, freq_dim=32)


def _inputs(cfg, b=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    y = torch.randn(b, cfg.in_channels, cfg.latent_size, cfg.latent_size, generator=g, dtype=dtype)
    t = torch.randint(0, 1001, (b,), generator=g)
    c = torch.randn(b, cfg.width, generator=g, dtype=dtype)
    return y, t, c


def _perturbed(cfg, seed=0):
    net = build_denoiser(cfg, seed).double()
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return net


def test_output_shape():
    net = build_denoiser(SMALL)
    y, t, c = _inputs(SMALL)
    assert net.forward_full(y, t, c).shape == (2, 4, 8, 8)
    assert net.forward_masked(y, t, c, 0.3).shape == (2, 4, 8, 8)


def test_zero_at_init():
    net = build_denoiser(SMALL).double()
    y, t, c = _inputs(SMALL, dtype=torch.float64)
    assert net.forward_full(y, t, c).abs().max() == 0
    assert net.forward_masked(y, t, c, 0.5).abs().max() == 0


def test_ratio_zero_matches_full_after_training_like_perturbation():
    # exact equality needs the zero-init interpolator; other weights are arbitrary
    net = _perturbed(SMALL)
    with torch.no_grad():
        net.side_interpolator.attn.proj.weight.zero_()
        net.side_interpolator.attn.proj.bias.zero_()
    y, t, c = _inputs(SMALL, dtype=torch.float64)
    assert torch.equal(net.forward_masked(y, t, c, 0.0), net.forward_full(y, t, c))


def test_encoder_sees_only_kept_tokens():
    net = build_denoiser(SMALL)
    y, t, c = _inputs(SMALL)
    net.forward_masked(y, t, c, 0.3)
    assert net.last_encoder_length == 16 - int(0.3 * 16)


def test_masked_tokens_do_not_reach_encoder():
    # the encoder output at kept positions ignores the content of masked patches
    net = _perturbed(SMALL)
    y, t, c = _inputs(SMALL, b=1, dtype=torch.float64)
    tokens = net.embed(y)
    kept, spec = mask_tokens(tokens, 0.5, torch.Generator().manual_seed(3))
    y2 = y.clone()
    m = spec.masked[0, 0].item()
    i, j = divmod(m, SMALL.latent_size // SMALL.patch)
    y2[..., 2 * i:2 * i + 2, 2 * j:2 * j + 2] += 5.0
    kept2, _ = mask_tokens(net.embed(y2), 0.5, torch.Generator().manual_seed(3))
    assert torch.equal(kept, kept2)


def test_restore_length_places_tokens():
    net = build_denoiser(SMALL)
    tokens = torch.randn(2, 16, 32)
    kept, spec = mask_tokens(tokens, 0.25, torch.Generator().manual_seed(0))
    full = net.restore_length(kept, spec)
    for b in range(2):
        assert torch.equal(full[b, spec.kept[b]], tokens[b, spec.kept[b]])
        fill = (net.mask_token + net.pos_embed)[0]
        assert torch.allclose(full[b, spec.masked[b]], fill[spec.masked[b]])


def test_side_interpolator_identity_at_init_and_attends_to_all():
    net = build_denoiser(SMALL)
    z = torch.randn(2, 16, 32)
    out, w = net.side_interpolator(z, return_weights=True)
    assert torch.equal(out, z)
    assert w.shape == (2, 4, 16, 16)
    assert torch.allclose(w.sum(-1), torch.ones(2, 4, 16))


def test_mask_tokens_properties():
    x = torch.randn(3, 20, 4)
    kept, spec = mask_tokens(x, 0.3, torch.Generator().manual_seed(1))
    assert spec.num_masked == 6 and kept.shape == (3, 14, 4)
    for b in range(3):
        both = torch.cat([spec.kept[b], spec.masked[b]]).sort().values
        assert torch.equal(both, torch.arange(20))
        assert torch.all(spec.kept[b][1:] > spec.kept[b][:-1])
    with pytest.raises(ParameterError):
        mask_tokens(x, 1.0)


def test_shape_errors():
    net = build_denoiser(SMALL)
    y, t, c = _inputs(SMALL)
    with pytest.raises(ShapeError):
        net.forward_full(y[:, :4], t, c)
    with pytest.raises(ShapeError):
        net.forward_full(y, t, c[:, :8])


def test_config_errors():
    with pytest.raises(ParameterError):
        ModelConfig(width=30, heads=4).validate()
    with pytest.raises(ParameterError):
        ModelConfig(latent_size=7).validate()


def test_count_params_matches_enumeration():
    for cfg in (SMALL, ModelConfig(), ModelConfig(latent_size=4, width=16, heads=2, encoder_depth=1,
                                                 decoder_depth=1, freq_dim=16)):
        assert count_params(cfg)["total"] == enumerate_params(build_denoiser(cfg))


def test_count_params_paper_scale():
    total = count_params(ModelConfig.paper_scale())["total"]
    assert abs(total - 458.0e6) / 458.0e6 < 0.05


def test_conditioning_changes_output():
    net = _perturbed(SMALL)
    y, t, c = _inputs(SMALL, dtype=torch.float64)
    a = net.forward_full(y, t, c)
    assert not torch.allclose(a, net.forward_full(y, t, torch.zeros_like(c)))
    assert not torch.allclose(a, net.forward_full(y, t + 1, c))


def test_gradient_check_small():
    assert gradient_check(n_params=20, seed=3).max() < 1e-4
