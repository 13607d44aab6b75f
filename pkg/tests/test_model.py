"""Front-end, transformer blocks, full-model composition, and serialization."""

import numpy as np
import pytest

from lganet import attention as A
from lganet.errors import ConfigError
from lganet.gradcheck import MINI_CONFIG, model_check
from lganet.model import Model, ModelConfig, ResBlock, ResBlockSpec, count_parameters
from lganet.ops import layer_norm, linear_params, max_pool1d, relu
from lganet.tensor import Tensor, concatenate, read_weights, transpose

TINY = dict(leads=2, input_len=128, embed_dim=8, heads=2, num_stages=2,
            num_classes=3, window_len=4, stride=2, precision="f64")


def tiny_model(seed=0, **overrides):
    cfg = ModelConfig.create(**{**TINY, **overrides})
    return Model(cfg, seed=seed)


def rand_input(model, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    shape = (batch, model.config.leads, model.config.input_len)
    return Tensor(rng.uniform(-1, 1, shape), dtype=model.dtype)


def test_front_end_reduces_by_sixteen():
    cfg = ModelConfig.create()  # defaults: 12 leads, 4096 samples, D=128
    model = Model(cfg, seed=0)
    x = Tensor(np.zeros((1, 12, 4096), dtype=np.float32))
    out = model.front_end(x)
    assert out.shape == (1, 256, 128)


def test_resblock_zero_weights_identity_skip():
    spec = ResBlockSpec(3, 3)
    rng = np.random.default_rng(0)
    blk = ResBlock(spec, rng, np.float64)
    for conv in (blk.conv1, blk.conv2):
        conv.weight.data[:] = 0.0
        conv.bias.data[:] = 0.0
    assert blk.skip is None  # channel counts match: identity skip
    x = Tensor(rng.uniform(-1, 1, (2, 3, 8)), dtype="f64")
    expected = max_pool1d(relu(x), 2, 2).data
    assert np.array_equal(blk.forward(x).data, expected)


def test_block_halves_and_rejects_odd_length():
    model = tiny_model()
    block = model.blocks[0]
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-1, 1, (2, 8, 8)), dtype="f64")
    assert block.forward(x).shape == (2, 4, 8)
    with pytest.raises(ConfigError):
        block.forward(Tensor(rng.uniform(-1, 1, (2, 7, 8)), dtype="f64"))


def test_block_dead_path_reduces_to_pooled_norm():
    model = tiny_model(seed=3)
    block = model.blocks[0]
    for conv in (block.attn.conv_q, block.attn.conv_k, block.attn.conv_v):
        conv.weight.data[:] = 0.0
        conv.bias.data[:] = 0.0
    for t in (block.w1, block.b1, block.w2, block.b2):
        t.data[:] = 0.0
    d = model.config.embed_dim
    block.res_conv.weight.data = np.eye(d)[:, :, None].astype(np.float64)
    block.res_conv.bias.data[:] = 0.0
    x = Tensor(np.random.default_rng(2).uniform(-1, 1, (2, 8, d)), dtype="f64")
    x_norm = layer_norm(x, block.attn.norm)
    expected = transpose(max_pool1d(transpose(x_norm, (0, 2, 1)), 2, 2), (0, 2, 1)).data
    assert np.abs(block.forward(x).data - expected).max() <= 1e-15


def test_mlp_width_schedule():
    cfg = ModelConfig.create(embed_dim=128)
    assert [b.mlp_hidden for b in cfg.blocks] == [64, 128, 192, 256]
    assert cfg.blocks[2].mlp_hidden == 32 * 2 * 3  # d_base=32, stage 3 -> 192


def test_forward_shape_trace_default_model():
    cfg = ModelConfig.create()
    model = Model(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).uniform(-0.1, 0.1, (1, 12, 4096)).astype(np.float32))
    h = model.front_end(x)
    lengths = [h.shape[1]]
    for blk in model.blocks:
        h = blk.forward(h)
        lengths.append(h.shape[1])
    assert lengths == [256, 128, 64, 32, 16]
    logits = model.forward(x)
    assert logits.shape == (1, 6)


def test_batch_independence():
    model = tiny_model(seed=4)
    a, b = rand_input(model, 1, seed=5), rand_input(model, 1, seed=6)
    both = model.forward(concatenate([a, b], axis=0)).data
    separate = np.concatenate([model.forward(a).data, model.forward(b).data])
    assert np.abs(both - separate).max() <= 1e-6


def test_zero_input_zero_bias_gives_zero_logits():
    model = tiny_model(seed=7)
    for name, p in model.parameters().items():
        if "bias" in name or name.endswith((".b1", ".b2", ".beta")):
            p.data[:] = 0.0
    x = Tensor(np.zeros((2, 2, 128)), dtype="f64")
    assert not model.forward(x).data.any()


def test_count_parameters_examples():
    assert count_parameters({}) == 0
    w, b = linear_params(2, 3)
    assert count_parameters({"w": w, "b": b}) == 9


def test_count_parameters_matches_serialized_file(tmp_path):
    model = tiny_model(seed=8)
    path = tmp_path / "m.lgaw"
    model.save(path)
    stored = read_weights(path)
    assert sum(arr.size for arr in stored.values()) == model.count_parameters()


def test_save_load_roundtrip_preserves_outputs(tmp_path):
    model = tiny_model(seed=9, precision="f32")
    x = rand_input(model, 2, seed=10)
    before = model.forward(x).data
    path = tmp_path / "m.lgaw"
    model.save(path)
    loaded = Model.load(path)
    assert loaded.config == model.config
    after = loaded.forward(x).data
    assert np.array_equal(before, after)


def test_forward_deterministic_for_fixed_weights():
    model = tiny_model(seed=11)
    x = rand_input(model, 2, seed=12)
    assert np.array_equal(model.forward(x).data, model.forward(x).data)


def test_same_seed_same_model():
    a, b = tiny_model(seed=13), tiny_model(seed=13)
    pa, pb = a.parameters(), b.parameters()
    assert set(pa) == set(pb)
    for name in pa:
        assert np.array_equal(pa[name].data, pb[name].data)


@pytest.mark.parametrize("variant", A.VARIANTS)
def test_halving_law_every_stage_every_variant(variant):
    model = tiny_model(seed=14, variant=variant)
    h = model.front_end(rand_input(model, 1, seed=15))
    n = h.shape[1]
    for blk in model.blocks:
        h = blk.forward(h)
        n //= 2
        assert h.shape[1] == n


def test_divisibility_validation():
    with pytest.raises(ConfigError):
        ModelConfig.create(input_len=100)
    with pytest.raises(ConfigError):
        ModelConfig.create(input_len=64, num_stages=4)  # 64 / 2^8 < 1


def test_unknown_model_field_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.create(bogus=1)


def test_miniature_end_to_end_gradient_check():
    cfg = ModelConfig.create(**MINI_CONFIG)
    assert (cfg.leads, cfg.input_len, cfg.embed_dim, cfg.heads, cfg.num_stages) == (2, 64, 8, 2, 2)
    err = model_check(cfg, seed=0)
    assert err <= 1e-3
