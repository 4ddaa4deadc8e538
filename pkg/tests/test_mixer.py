import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modelmix import mixer, nets
from modelmix.diffcore import Tensor
from modelmix.mixer import BetaParams, MixPlan
from modelmix.nets import ConvParams, LayerAddress, UNetConfig


def pair(seed=0, k_i=3, k_j=2):
    rng = np.random.default_rng(seed)
    a = nets.build_model(UNetConfig(num_classes=k_i), "a", rng)
    b = nets.build_model(UNetConfig(num_classes=k_j), "b", rng)
    return a, b


def conv_params(rng, oc, ic, dtype=np.float64):
    return ConvParams(Tensor(rng.standard_normal((oc, ic, 3, 3)).astype(dtype), requires_grad=True),
                      Tensor(rng.standard_normal(oc).astype(dtype), requires_grad=True))


def test_mix_conv_endpoints_are_identity():
    rng = np.random.default_rng(0)
    p, q = conv_params(rng, 4, 3), conv_params(rng, 4, 3)
    assert mixer.mix_conv(p, q, 1.0) is p
    assert mixer.mix_conv(p, q, 0.0) is q


def test_mix_conv_convex_combination():
    rng = np.random.default_rng(1)
    p, q = conv_params(rng, 4, 3), conv_params(rng, 4, 3)
    m = mixer.mix_conv(p, q, 0.25)
    np.testing.assert_allclose(m.kernel.data, 0.25 * p.kernel.data + 0.75 * q.kernel.data, atol=1e-15)
    np.testing.assert_allclose(m.bias.data, 0.25 * p.bias.data + 0.75 * q.bias.data, atol=1e-15)


def test_mix_conv_gradient_reaches_both_sources():
    rng = np.random.default_rng(2)
    p, q = conv_params(rng, 2, 2), conv_params(rng, 2, 2)
    m = mixer.mix_conv(p, q, 0.3)
    m.kernel.backward(np.ones(m.kernel.shape))
    np.testing.assert_allclose(p.kernel.grad, 0.3)
    np.testing.assert_allclose(q.kernel.grad, 0.7)


def test_mix_conv_shape_mismatch_names_shapes():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match=r"\(4, 3, 3, 3\).*\(4, 2, 3, 3\)"):
        mixer.mix_conv(conv_params(rng, 4, 3), conv_params(rng, 4, 2), 0.5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0, 1), ic=st.integers(1, 6), oc=st.integers(1, 6))
def test_feature_linearity_double(seed, lam, ic, oc):
    rng = np.random.default_rng(seed)
    p, q = conv_params(rng, oc, ic), conv_params(rng, oc, ic)
    x = Tensor(rng.standard_normal((2, ic, 6, 5)))
    assert mixer.verify_feature_linearity(p, q, lam, x) < 1e-9


def test_relu_negative_control():
    # one channel, identity-ish kernels of opposite sign: relu(mix) = 0, mix(relu) > 0
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    p = ConvParams(Tensor(k), Tensor(np.zeros(1)))
    q = ConvParams(Tensor(-k), Tensor(np.zeros(1)))
    x = Tensor(np.ones((1, 1, 4, 4)))
    assert mixer.verify_feature_linearity(p, q, 0.5, x, with_nonlinearity=False) < 1e-12
    assert mixer.verify_feature_linearity(p, q, 0.5, x, with_nonlinearity=True) > 1e-3


def test_virtual_encoder_mixes_only_planned_layer():
    a, b = pair()
    addr = LayerAddress(1, 1)
    view = mixer.build_virtual_encoder(a, b, MixPlan("a", "b", addr, 0.4))
    for s, stage in enumerate(view):
        for k, p in enumerate(stage):
            if (s, k) == (1, 1):
                expect = 0.4 * a.encoder[s][k].kernel.data + 0.6 * b.encoder[s][k].kernel.data
                np.testing.assert_allclose(p.kernel.data, expect, rtol=1e-6)
            else:
                assert p is a.encoder[s][k]


def test_virtual_encoder_leaves_models_untouched():
    a, b = pair()
    before = {k: v.copy() for k, v in a.state_dict().items()}
    before_b = {k: v.copy() for k, v in b.state_dict().items()}
    plan = MixPlan("a", "b", LayerAddress(0, 0), 0.5, (LayerAddress(2, 1),))
    view = mixer.build_virtual_encoder(a, b, plan)
    nets.forward(a, Tensor(np.ones((1, 1, 16, 16), dtype=np.float32)), encoder=view)
    for k, v in a.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    for k, v in b.state_dict().items():
        assert v.tobytes() == before_b[k].tobytes()


def test_virtual_model_at_lambda_one_equals_individual():
    a, b = pair()
    x = Tensor(np.random.default_rng(5).random((2, 1, 16, 16)).astype(np.float32))
    plan = MixPlan("a", "b", LayerAddress(2, 0), 1.0)
    out_v = nets.forward(a, x, encoder=mixer.build_virtual_encoder(a, b, plan)).data
    assert out_v.tobytes() == nets.forward(a, x).data.tobytes()


def test_virtual_encoder_requires_same_architecture():
    a = nets.build_model(UNetConfig(base_channels=8), "a", np.random.default_rng(0))
    b = nets.build_model(UNetConfig(base_channels=4), "b", np.random.default_rng(0))
    with pytest.raises(ValueError, match="architecture"):
        mixer.build_virtual_encoder(a, b, MixPlan("a", "b", LayerAddress(0, 0), 0.5))


def test_invalid_plan_layer():
    a, b = pair()
    with pytest.raises(IndexError):
        mixer.build_virtual_encoder(a, b, MixPlan("a", "b", LayerAddress(5, 0), 0.5))


def test_mix_plan_validates_lambda():
    with pytest.raises(ValueError):
        MixPlan("a", "b", LayerAddress(0, 0), 1.5)
    with pytest.raises(ValueError):
        BetaParams(0.0, 1.0)


def test_sample_plan_uniform_over_layers_and_lambda_range():
    a, b = pair()
    rng = np.random.default_rng(7)
    plans = [mixer.sample_plan(a, b, BetaParams(), rng) for _ in range(3000)]
    counts = {}
    for p in plans:
        counts[p.layer] = counts.get(p.layer, 0) + 1
        assert 0.0 <= p.lam <= 1.0
    assert len(counts) == 6
    assert all(abs(c / 3000 - 1 / 6) < 0.03 for c in counts.values())
    lams = np.array([p.lam for p in plans])
    assert abs(lams.mean() - 0.5) < 0.03  # Beta(1, 1) is uniform


def test_sample_plan_multi_layer_distinct():
    a, b = pair()
    p = mixer.sample_plan(a, b, BetaParams(), np.random.default_rng(0), num_layers=3)
    assert len(set(p.layers)) == 3


def test_sample_plan_reproducible():
    a, b = pair()
    p1 = mixer.sample_plan(a, b, BetaParams(2, 5), np.random.default_rng(11))
    p2 = mixer.sample_plan(a, b, BetaParams(2, 5), np.random.default_rng(11))
    assert p1 == p2
