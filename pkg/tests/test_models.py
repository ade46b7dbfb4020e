import numpy as np
import pytest
import torch
import torch.nn as nn

from glomseg.models import (
    ModelConfig,
    ModelError,
    build_model,
    channel_dropout,
    count_parameters,
    forward,
    forward_feature_perturbed,
    load_checkpoint,
    save_checkpoint,
)
from conftest import TINY_MODEL


@pytest.fixture(scope="module")
def tiny_model():
    return build_model(TINY_MODEL, seed=0).eval()


def test_toy_config_builds_and_runs():
    cfg = ModelConfig(arch="segformer", variant=None,
                      embed_dims=(8, 16, 32, 64), depths=(1, 1, 1, 1),
                      num_heads=(1, 2, 4, 8), decoder_dim=32)
    model = build_model(cfg, seed=0)
    out = model(torch.randn(1, 3, 64, 64))
    assert out.shape == (1, 2, 64, 64)


def test_forward_shape_contract(tiny_model):
    out = forward(tiny_model, torch.randn(2, 3, 64, 64))
    assert out.shape == (2, 2, 64, 64)
    assert torch.isfinite(out).all()


def test_identical_inputs_identical_logits(tiny_model):
    x = torch.randn(1, 3, 64, 64)
    batch = torch.cat([x, x], dim=0)
    with torch.no_grad():
        out = tiny_model(batch)
    torch.testing.assert_close(out[0], out[1], rtol=0, atol=0)


def test_different_inputs_differ(tiny_model):
    with torch.no_grad():
        a = tiny_model(torch.zeros(1, 3, 64, 64))
        b = tiny_model(torch.ones(1, 3, 64, 64))
    assert not torch.allclose(a, b)


def test_batch_permutation_permutes_logits(tiny_model):
    x = torch.randn(3, 3, 64, 64)
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        out = tiny_model(x)
        out_perm = tiny_model(x[perm])
    torch.testing.assert_close(out[perm], out_perm, rtol=0, atol=0)


def test_full_resolution_output_for_valid_sizes(tiny_model):
    for hw in (32, 64, 96):
        out = tiny_model(torch.randn(1, 3, hw, hw))
        assert out.shape[2:] == (hw, hw)


def test_indivisible_dims_error_states_multiple(tiny_model):
    with pytest.raises(ModelError, match="32"):
        tiny_model(torch.randn(1, 3, 60, 60))


def test_att_unet_toy_forward():
    cfg = ModelConfig(arch="att_unet", unet_base_channels=4)
    model = build_model(cfg, seed=0).eval()
    out = model(torch.randn(1, 3, 32, 32))
    assert out.shape == (1, 2, 32, 32)
    with pytest.raises(ModelError, match="16"):
        model(torch.randn(1, 3, 24, 24))


def test_unknown_variant_errors():
    with pytest.raises(ModelError, match="unknown variant"):
        build_model(ModelConfig(variant="b9"))


def test_build_deterministic_per_seed():
    a = build_model(TINY_MODEL, seed=5)
    b = build_model(TINY_MODEL, seed=5)
    c = build_model(TINY_MODEL, seed=6)
    for (pa, pb) in zip(a.parameters(), b.parameters()):
        torch.testing.assert_close(pa, pb, rtol=0, atol=0)
    assert any(not torch.equal(pa, pc)
               for pa, pc in zip(a.parameters(), c.parameters()))


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def test_count_single_dense_layer():
    assert count_parameters(nn.Linear(4, 3)) == 15  # 4*3 weights + 3 biases


def test_count_ignores_frozen():
    layer = nn.Linear(4, 3)
    layer.bias.requires_grad_(False)
    assert count_parameters(layer) == 12


def test_toy_variants_ordered():
    tiny = count_parameters(build_model(ModelConfig(variant="tiny"), seed=0))
    small = count_parameters(build_model(ModelConfig(variant="small"), seed=0))
    assert tiny < small


# ---------------------------------------------------------------------------
# feature perturbation
# ---------------------------------------------------------------------------

def test_fp_vanishing_drop_rate_matches_forward(tiny_model):
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        base = tiny_model(x)
        perturbed = forward_feature_perturbed(tiny_model, x, drop_rate=1e-9, seed=0)
    torch.testing.assert_close(perturbed, base, atol=1e-3, rtol=0)


def test_fp_same_seed_identical(tiny_model):
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        a = forward_feature_perturbed(tiny_model, x, drop_rate=0.5, seed=3)
        b = forward_feature_perturbed(tiny_model, x, drop_rate=0.5, seed=3)
        c = forward_feature_perturbed(tiny_model, x, drop_rate=0.5, seed=4)
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    assert not torch.allclose(a, c)


def test_fp_drop_rate_range(tiny_model):
    x = torch.randn(1, 3, 64, 64)
    for bad in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(ModelError, match="drop_rate"):
            forward_feature_perturbed(tiny_model, x, drop_rate=bad, seed=0)


def test_channel_dropout_unbiased_monte_carlo():
    # over many draws the rescaled dropout is mean-preserving per channel
    rng = torch.Generator().manual_seed(3)
    feats = torch.rand(1, 16, 4, 4) + 0.5
    acc = torch.zeros_like(feats)
    n = 1000
    for _ in range(n):
        acc += channel_dropout(feats, 0.3, rng)
    mc_mean = (acc / n).mean(dim=(0, 2, 3))
    true_mean = feats.mean(dim=(0, 2, 3))
    rel = ((mc_mean - true_mean).abs() / true_mean).max()
    assert rel < 0.05


def test_channel_dropout_zeroes_whole_channels():
    gen = torch.Generator().manual_seed(1)
    feats = torch.ones(2, 32, 3, 3)
    out = channel_dropout(feats, 0.5, gen)
    per_channel = out.flatten(2)
    # every channel is either all zero or uniformly rescaled by 2x
    for b in range(2):
        for c in range(32):
            vals = per_channel[b, c].unique()
            assert len(vals) == 1 and float(vals[0]) in (0.0, 2.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, tiny_model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_model, path)
    loaded = load_checkpoint(path)
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        torch.testing.assert_close(loaded(x), tiny_model(x), rtol=0, atol=0)
    assert loaded.config == TINY_MODEL


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    torch.save({"weights": torch.zeros(3)}, path)
    with pytest.raises(ModelError, match="not a recognized"):
        load_checkpoint(path)


def test_init_weights_loaded_from_local_file(tmp_path, tiny_model):
    path = tmp_path / "warm.ckpt"
    save_checkpoint(tiny_model, path)
    cfg = ModelConfig(arch="segformer", variant="tiny", init_weights=str(path))
    warm = build_model(cfg, seed=99)
    for (name, p), q in zip(warm.state_dict().items(), tiny_model.state_dict().values()):
        torch.testing.assert_close(p, q, rtol=0, atol=0)
