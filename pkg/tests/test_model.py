"""Model assembly: variant axis, config validation, shapes, determinism."""

import numpy as np
import pytest

from tunet import tensor as T
from tunet.errors import ConfigError
from tunet.model import PRESETS, Model, ModelConfig
from tunet.tensor import Tensor


@pytest.mark.parametrize("variant", ["vit_none", "vit_cup", "hybrid_cup", "transunet"])
def test_variant_forward_shapes(variant):
    cfg = ModelConfig.variant(variant, height=64, width=64, num_classes=4)
    model = Model(cfg, seed=1)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 64, 64)).astype(np.float32))
    with T.no_grad():
        logits = model.forward(x)
    assert logits.shape == (4, 64, 64)
    labelmap = np.argmax(logits.data, axis=0)
    assert labelmap.shape == (64, 64)


def test_preset_dimensions():
    assert PRESETS["base"] == (768, 12, 12, 3072)
    assert PRESETS["large"] == (1024, 24, 16, 4096)
    cfg = ModelConfig.preset("base", encoder="vit", decoder="none", skip_count=0,
                             height=224, width=224)
    assert (cfg.dim, cfg.depth, cfg.heads, cfg.mlp_dim) == (768, 12, 12, 3072)
    assert cfg.seq_length == 196


def test_skips_require_hybrid_encoder():
    cfg = ModelConfig(encoder="vit", decoder="cup", skip_count=3)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_skips_require_cup_decoder():
    cfg = ModelConfig(encoder="hybrid", decoder="none", skip_count=1)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_resolution_divisibility_checked():
    with pytest.raises(ConfigError):
        ModelConfig(encoder="hybrid", height=60, width=64).validate()
    with pytest.raises(ConfigError):
        ModelConfig(encoder="vit", decoder="none", skip_count=0, height=66, width=66,
                    patch_size=16).validate()


def test_invalid_skip_count():
    with pytest.raises(ConfigError):
        ModelConfig(skip_count=2).validate()


def test_token_grid_arithmetic():
    cfg = ModelConfig.variant("transunet", height=64, width=64)
    assert cfg.token_grid() == (4, 4)
    assert cfg.seq_length == 16
    vit = ModelConfig.variant("vit_cup", height=224, width=224, patch_size=32)
    assert vit.seq_length == 49
    assert vit.num_cup_blocks() == 5


def test_decoder_width_chain():
    tiny = ModelConfig.variant("transunet", height=64, width=64)
    assert tiny.resolved_decoder_widths() == (64, 32, 16, 16)
    base = ModelConfig.variant("transunet", scale="base", height=224, width=224)
    assert base.resolved_decoder_widths() == (256, 128, 64, 16)


def test_parameters_are_prefixed_and_counted():
    model = Model(ModelConfig.variant("transunet", height=32, width=32), seed=0)
    params = model.parameters()
    assert all(k.startswith(("encoder.", "decoder.")) for k in params)
    assert model.parameter_count() == sum(p.size for p in params.values())
    assert model.parameter_count() > 0


def test_same_seed_same_parameters():
    cfg = ModelConfig.variant("transunet", height=32, width=32)
    a = Model(cfg, seed=7)
    b = Model(cfg, seed=7)
    c = Model(cfg, seed=8)
    pa, pb, pc = a.parameters(), b.parameters(), c.parameters()
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    assert any(not np.array_equal(pa[k].data, pc[k].data) for k in pa)


def test_predict_slice_shape():
    model = Model(ModelConfig.variant("transunet", height=32, width=32, num_classes=3), seed=0)
    logits = model.predict_slice(np.random.default_rng(3).standard_normal((32, 32)))
    assert logits.shape == (3, 32, 32)
    assert np.all(np.isfinite(logits))


def test_config_flat_roundtrip():
    cfg = ModelConfig.variant("vit_cup", height=64, width=64, patch_size=8, num_classes=5)
    flat = cfg.to_flat()
    back = ModelConfig.from_flat(flat)
    assert back == cfg
