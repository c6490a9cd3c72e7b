import numpy as np
import pytest

from fslpn import numerics as nx
from fslpn.errors import DimensionError
from fslpn.model import ClassifierConfig, ExtractorConfig, FSLPN, HeadConfig, ModelConfig

import gradcases


@pytest.fixture(scope="module")
def model():
    return FSLPN(ModelConfig.default(13))


def test_extractor_shapes(model):
    params = model.init_params(0)
    x = np.random.default_rng(0).standard_normal((2, 1, 13)).astype(np.float32)
    fmap, pooled, _ = model.extractor.forward(params, x)
    assert fmap.shape == (2, 64, 13) and pooled.shape == (2, 64)
    emb = model.embed(params, x)
    assert emb.shape == (2, 32)
    z, _ = model.head.forward(params, pooled)
    assert z.shape == (2, 128)


def test_extractor_rejects_wrong_length(model):
    with pytest.raises(DimensionError, match="13"):
        model.extractor.forward(model.init_params(0), np.zeros((1, 1, 12), np.float32))


def test_zero_input_propagates_zero(model):
    params = model.init_params(0, dtype=np.float64)
    fmap, pooled, _ = model.extractor.forward(params, np.zeros((3, 1, 13)), train=False)
    assert not fmap.any() and not pooled.any()


def test_layer_count_and_no_pool_in_blocks():
    for layers in (1, 3, 5, 9, 13):
        cfg = ExtractorConfig(conv_layers=layers, channels=4)
        p = FSLPN(ModelConfig(cfg, HeadConfig(), ClassifierConfig())).init_params(0)
        convs = [n for n in p.names("extractor") if n.endswith(".w")]
        assert len(convs) == layers == 1 + 2 * cfg.blocks
    with pytest.raises(ValueError):
        ExtractorConfig(conv_layers=8)


@pytest.mark.parametrize("channels,layers,kernel", [(64, 9, 3), (8, 5, 5), (3, 1, 1), (16, 13, 3)])
def test_parameter_count_closed_form(channels, layers, kernel):
    cfg = ExtractorConfig(channels=channels, conv_layers=layers, kernel_size=kernel)
    p = FSLPN(ModelConfig(cfg, HeadConfig(), ClassifierConfig())).init_params(0)
    blocks = (layers - 1) // 2
    closed = (channels * kernel + 2 * channels) + blocks * 2 * (channels * channels * kernel + 2 * channels)
    assert p.count("extractor") == closed == cfg.parameter_count()


def test_residual_block_with_zero_main_path_is_identity_then_relu():
    cfg = ModelConfig.default(13, channels=6, conv_layers=5)
    m = FSLPN(cfg)
    params = m.init_params(3, dtype=np.float64)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 1, 13))
    for name in ("extractor.block1.conv1.w", "extractor.block1.conv2.w"):
        params[name] = np.zeros_like(params[name])
    # the map entering block1 = output of block0, computed on a one-block net sharing weights
    one = FSLPN(ModelConfig.default(13, channels=6, conv_layers=3))
    sub = nx.ParameterSet({k: v.copy() for k, v in params.entries.items() if "block1" not in k})
    for train in (False, True):
        h_in, _, _ = one.extractor.forward(sub.copy(), x, train=train)
        h_out, _, _ = m.extractor.forward(params.copy(), x, train=train)
        np.testing.assert_allclose(h_out, np.maximum(h_in, 0), atol=1e-12)


def test_head_unit_norm_identical_rows_and_equivariance(model):
    params = model.init_params(1)
    rng = np.random.default_rng(2)
    pooled = rng.standard_normal((6, 64)).astype(np.float32)
    pooled[3] = pooled[1]
    z, _ = model.head.forward(params, pooled)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1, atol=1e-6)
    assert np.array_equal(z[1], z[3])
    assert float(z[1] @ z[3]) == pytest.approx(1.0, abs=1e-6)
    perm = rng.permutation(6)
    zp, _ = model.head.forward(params, pooled[perm])
    np.testing.assert_array_equal(zp, z[perm])


def test_classifier_identity_projection_returns_pooled_features():
    m = FSLPN(ModelConfig.default(13, channels=8, conv_layers=3, out_dim=8))
    params = m.init_params(0, dtype=np.float64)
    params["classifier.proj.w"] = np.eye(8)[:, :, None]
    params["classifier.proj.b"] = np.zeros(8)
    x = np.random.default_rng(0).standard_normal((3, 1, 13))
    _, pooled, _ = m.extractor.forward(params, x, train=False)
    np.testing.assert_allclose(m.embed(params, x), pooled, atol=1e-15)


def test_classifier_grad_check_phi_only():
    rep = gradcases.case_classifier_embed(np.random.default_rng(9))
    assert rep.passed, str(rep)


def test_linear_baseline_zero_weights_uniform():
    m = FSLPN(ModelConfig.default(13, channels=4, conv_layers=3))
    p = m.init_params(0, dtype=np.float64, linear=True)
    p["classifier.linear.w"][:] = 0
    logits, _ = m.linear.forward(p, np.random.default_rng(0).standard_normal((5, 4)))
    assert logits.shape == (5, 2)
    e = np.exp(logits)
    np.testing.assert_allclose(e / e.sum(axis=1, keepdims=True), 0.5)


def test_eval_forward_bit_exact_and_does_not_touch_buffers(model):
    params = model.init_params(4)
    params.freeze("extractor")
    before = params.checksum()
    x = np.random.default_rng(5).standard_normal((4, 1, 13)).astype(np.float32)
    a = model.embed(params, x)
    b = model.embed(params, x)
    assert a.tobytes() == b.tobytes() and params.checksum() == before


def test_init_is_seeded():
    m = FSLPN(ModelConfig.default(13, channels=8, conv_layers=3))
    assert m.init_params(5).checksum() == m.init_params(5).checksum()
    assert m.init_params(5).checksum() != m.init_params(6).checksum()


def test_config_dict_round_trip():
    cfg = ModelConfig.default(15, channels=16, conv_layers=5, out_dim=8)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
