import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coiba import autodiff as ad
from coiba import vit
from coiba.bottleneck import BottleneckHooks, DampingParams, LayerStats
from coiba.errors import ConfigError, DimensionError, ParseError, TrainingError

SMALL = vit.ModelConfig(image_size=16, patch_size=8, depth=2, embed_dim=16, heads=2, seed=3)


@pytest.fixture(scope="module")
def small_model():
    return vit.init_model(SMALL)


def test_init_is_deterministic():
    a, b = vit.init_model(SMALL), vit.init_model(SMALL)
    assert vit.checkpoint_bytes(a) == vit.checkpoint_bytes(b)


def test_init_differs_across_seeds():
    a = vit.init_model(SMALL)
    b = vit.init_model(dataclasses.replace(SMALL, seed=4))
    assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_default_config_token_count():
    cfg = vit.ModelConfig()
    assert cfg.num_patches == 16
    model = vit.init_model(cfg)
    x = vit.embed(model, np.zeros((1, 32, 32, 1)))
    assert x.shape == (1, 17, 64)


def test_init_biases_zero_and_norms_identity(small_model):
    for name, arr in small_model.params.items():
        if name.endswith("bias"):
            assert not np.any(arr), name
        if "norm" in name and name.endswith("weight"):
            assert np.all(arr == 1.0), name


@pytest.mark.parametrize("field_name,value", [("image_size", 30), ("heads", 3), ("depth", 0)])
def test_invalid_config_rejected(field_name, value):
    with pytest.raises(ConfigError):
        vit.init_model(dataclasses.replace(SMALL, **{field_name: value}))


def test_forward_shapes_and_finiteness(small_model):
    img = np.random.default_rng(0).random((16, 16, 1))
    logits, _ = vit.forward(small_model, img)
    assert logits.shape == (SMALL.num_classes,)
    assert np.all(np.isfinite(logits.data))
    batch, _ = vit.forward(small_model, np.stack([img, img]))
    assert batch.shape == (2, SMALL.num_classes)


def test_forward_shape_mismatch(small_model):
    with pytest.raises(DimensionError):
        vit.forward(small_model, np.zeros((8, 8, 1)))


def _hooks(model, lam, gauss_value=None, layers=(1, 2), stats=None, seed=0):
    cfg = model.config
    rng = np.random.default_rng(seed)
    stats = stats or {l: LayerStats(rng.standard_normal(cfg.embed_dim), rng.random(cfg.embed_dim) + 0.5)
                      for l in layers}
    shape = (1, cfg.num_patches, cfg.embed_dim)
    gauss = {l: (np.full(shape, gauss_value) if gauss_value is not None else rng.standard_normal(shape))
             for l in layers}
    return BottleneckHooks(layers, DampingParams.from_lambda(np.full(cfg.num_patches, lam)), stats, gauss)


def test_unit_lambda_hooks_are_transparent(small_model):
    img = np.random.default_rng(1).random((1, 16, 16, 1))
    clean, _ = vit.forward(small_model, img)
    hooked, trace = vit.forward(small_model, img, hooks=_hooks(small_model, 1.0))
    assert np.array_equal(clean.data, hooked.data)
    assert trace.layers == [1, 2]
    for l in trace.layers:
        assert trace.z[l].shape == trace.r_prime[l].shape


def test_zero_lambda_with_mean_noise_ignores_image(small_model):
    rng = np.random.default_rng(2)
    a, b = rng.random((1, 16, 16, 1)), rng.random((1, 16, 16, 1))
    hooks = _hooks(small_model, 0.0, gauss_value=0.0, layers=(1,))
    la, _ = vit.forward(small_model, a, hooks=hooks)
    lb, _ = vit.forward(small_model, b, hooks=hooks)
    assert np.max(np.abs(la.data - lb.data)) < 1e-9


def test_head_reads_class_token_only(small_model):
    rng = np.random.default_rng(3)
    x = ad.Tensor(rng.standard_normal((1, 1 + SMALL.num_patches, SMALL.embed_dim)))
    p = vit._frozen_params(small_model)
    zeroed = x.data.copy()
    zeroed[:, 1:, :] = 0.0
    assert np.array_equal(vit.head(x, p).data, vit.head(ad.Tensor(zeroed), p).data)


def test_gradient_reaches_every_token_through_each_layer(small_model):
    img = np.random.default_rng(4).random((1, 16, 16, 1))
    for layers in [(1,), (2,), (1, 2)]:
        damping = DampingParams.init(SMALL.num_patches)
        hooks = _hooks(small_model, 0.5, layers=layers)
        hooks.damping = damping
        logits, _ = vit.forward(small_model, img, hooks=hooks)
        ad.cross_entropy(logits, np.array([1])).backward()
        assert np.all(damping.alpha.grad != 0), layers


def test_randomize_cumulative_from_zero_changes_every_block(small_model):
    out = vit.randomize_parameters(small_model, "cumulative", 0)
    for i in range(SMALL.depth):
        names = small_model.block_names(i)
        assert any(not np.array_equal(out.params[n], small_model.params[n]) for n in names)
    assert np.array_equal(out.params["patch_embed.weight"], small_model.params["patch_embed.weight"])


def test_randomize_independent_touches_one_block(small_model):
    out = vit.randomize_parameters(small_model, "independent", 1)
    changed = {k for k in out.params if not np.array_equal(out.params[k], small_model.params[k])}
    assert changed and all(k.startswith("blocks.1.") for k in changed)


def test_randomize_head_only(small_model):
    out = vit.randomize_parameters(small_model, "cumulative", SMALL.depth)
    img = np.random.default_rng(5).random((16, 16, 1))
    assert not np.array_equal(vit.forward(out, img)[0].data, vit.forward(small_model, img)[0].data)
    for i in range(SMALL.depth):
        for n in small_model.block_names(i):
            assert np.array_equal(out.params[n], small_model.params[n])


@pytest.mark.parametrize("mode,index", [("cumulative", SMALL.depth + 1), ("independent", SMALL.depth),
                                        ("cumulative", -1)])
def test_randomize_index_out_of_range(small_model, mode, index):
    with pytest.raises(IndexError):
        vit.randomize_parameters(small_model, mode, index)


def _toy_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 16, 16, 1))
    y = (x[:, :8, :8, 0].mean(axis=(1, 2)) > 0.5).astype(int)
    return x, y


def test_train_zero_epochs_returns_copy(small_model):
    out = vit.train_toy(small_model, _toy_data(), 0)
    assert vit.checkpoint_bytes(out) == vit.checkpoint_bytes(small_model)
    assert out.params is not small_model.params


def test_train_is_deterministic_and_reduces_loss(small_model):
    logs_a, logs_b = [], []
    a = vit.train_toy(small_model, _toy_data(), 3, lr=3e-3, batch_size=16, seed=1, log=logs_a.append)
    b = vit.train_toy(small_model, _toy_data(), 3, lr=3e-3, batch_size=16, seed=1, log=logs_b.append)
    assert a.digest() == b.digest()
    assert logs_a[-1]["loss"] < logs_a[0]["loss"]


def test_train_divergence_reports_epoch(small_model):
    with pytest.raises(TrainingError) as info, np.errstate(all="ignore"):
        vit.train_toy(small_model, _toy_data(), 2, lr=1e308)
    assert info.value.epoch == 0


def test_checkpoint_round_trip(tmp_path, small_model):
    path = tmp_path / "m.cibt"
    vit.save_checkpoint(small_model, str(path))
    loaded = vit.load_checkpoint(str(path))
    assert loaded.config == small_model.config
    assert vit.checkpoint_bytes(loaded) == path.read_bytes()


@pytest.mark.parametrize("cut", [0, 3, 10, 60, -1])
def test_truncated_checkpoint_is_parse_error(small_model, cut):
    raw = vit.checkpoint_bytes(small_model)
    with pytest.raises(ParseError):
        vit.parse_checkpoint(raw[:cut] if cut >= 0 else raw[:-5])


def test_bad_magic_is_parse_error(small_model):
    raw = vit.checkpoint_bytes(small_model)
    with pytest.raises(ParseError) as info:
        vit.parse_checkpoint(b"XXXX" + raw[4:])
    assert info.value.offset == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_unit_lambda_transparency_property(seed):
    model = vit.init_model(dataclasses.replace(SMALL, seed=seed % 7))
    img = np.random.default_rng(seed).random((1, 16, 16, 1))
    clean, _ = vit.forward(model, img)
    hooked, _ = vit.forward(model, img, hooks=_hooks(model, 1.0, seed=seed))
    assert np.array_equal(clean.data, hooked.data)
