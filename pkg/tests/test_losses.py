import math

import numpy as np
import pytest

from modelmix import diffcore as dc
from modelmix import losses as L
from modelmix.diffcore import Tensor
from modelmix.losses import ScribbleMap


def random_probs(rng, shape):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def random_scribble(rng, n, k, h, w, frac=0.3):
    lab = rng.integers(0, k, size=(n, h, w))
    lab[rng.random((n, h, w)) > frac] = k
    return ScribbleMap(lab, k)


def pce_oracle(probs, labels, k):
    vals = [-math.log(probs[i, labels[i, y, x], y, x])
            for i in range(labels.shape[0]) for y in range(labels.shape[1]) for x in range(labels.shape[2])
            if labels[i, y, x] != k]
    return sum(vals) / len(vals)


def test_partial_ce_half_probability():
    probs = np.full((1, 2, 3, 3), 0.5)
    sc = ScribbleMap(np.array([[[0, 2, 1], [2, 2, 2], [1, 0, 2]]]), 2)
    assert abs(float(L.partial_ce(Tensor(probs), sc).data) - 0.6931) < 1e-4


def test_partial_ce_matches_loop_oracle():
    rng = np.random.default_rng(0)
    probs = random_probs(rng, (2, 3, 5, 4))
    sc = random_scribble(rng, 2, 3, 5, 4)
    got = float(L.partial_ce(Tensor(probs), sc).data)
    assert abs(got - pce_oracle(probs, sc.labels, 3)) < 1e-12


def test_sup_loss_perfect_prediction():
    lab = np.array([[[0, 1], [3, 2]]])
    probs = np.zeros((1, 3, 2, 2))
    for y in range(2):
        for x in range(2):
            probs[0, lab[0, y, x] % 3, y, x] = 1.0
    assert abs(float(L.sup_loss(Tensor(probs), ScribbleMap(lab, 3)).data) + 1.0) < 1e-9


def test_sup_loss_matches_pixel_oracle():
    rng = np.random.default_rng(1)
    probs = random_probs(rng, (2, 3, 4, 4))
    sc = random_scribble(rng, 2, 3, 4, 4)
    terms = []
    for i, y, x in zip(*np.nonzero(sc.annotated)):
        f = probs[i, sc.labels[i, y, x], y, x]
        terms.append(-(math.log(f) + 2 * f / (1 + f)))
    assert abs(float(L.sup_loss(Tensor(probs), sc).data) - np.mean(terms)) < 1e-12


@pytest.mark.parametrize("fn", [L.partial_ce, L.sup_loss])
def test_scribble_losses_ignore_unlabeled_pixels(fn):
    rng = np.random.default_rng(2)
    probs = random_probs(rng, (2, 3, 6, 6))
    sc = random_scribble(rng, 2, 3, 6, 6)
    base = fn(Tensor(probs), sc).data.tobytes()
    other = random_probs(rng, probs.shape)
    mask = np.broadcast_to(sc.annotated[:, None], probs.shape)
    perturbed = np.where(mask, probs, other)
    assert fn(Tensor(perturbed), sc).data.tobytes() == base


@pytest.mark.parametrize("fn", [L.partial_ce, L.sup_loss])
def test_scribble_losses_zero_when_nothing_annotated(fn):
    probs = Tensor(np.full((1, 2, 4, 4), 0.5), requires_grad=True)
    out = fn(probs, ScribbleMap(np.full((1, 4, 4), 2), 2))
    assert float(out.data) == 0.0
    assert not out.requires_grad


@pytest.mark.parametrize("fn", [L.partial_ce, L.sup_loss])
def test_scribble_losses_finite_at_zero_probability(fn):
    probs = np.zeros((1, 2, 1, 2))
    probs[:, 1] = 1.0
    t = Tensor(probs, requires_grad=True)
    out = fn(t, ScribbleMap(np.zeros((1, 1, 2), dtype=int), 2))
    assert math.isfinite(float(out.data))
    out.backward()
    assert np.all(np.isfinite(t.grad))


def test_scribble_shape_errors():
    with pytest.raises(dc.ShapeError):
        L.partial_ce(Tensor(np.full((1, 2, 4, 4), 0.5)), ScribbleMap(np.zeros((1, 3, 4), dtype=int), 2))
    with pytest.raises(dc.ShapeError):
        L.partial_ce(Tensor(np.full((1, 3, 4, 4), 1 / 3)), ScribbleMap(np.zeros((1, 4, 4), dtype=int), 2))


def test_cosine_loss_self_is_minus_one():
    a = np.random.default_rng(3).standard_normal((4, 3, 5, 5))
    assert abs(float(L.cosine_loss(Tensor(a), Tensor(a)).data) + 1.0) < 1e-9


def test_cosine_loss_oracle_and_scale_invariance():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2))
    cos = [float(np.dot(a[i].ravel(), b[i].ravel()) / np.linalg.norm(a[i]) / np.linalg.norm(b[i])) for i in range(2)]
    got = float(L.cosine_loss(Tensor(a), Tensor(b)).data)
    assert abs(got + np.mean(cos)) < 1e-12
    assert abs(float(L.cosine_loss(Tensor(3 * a), Tensor(0.5 * b)).data) - got) < 1e-12


def test_cosine_loss_zero_norm_raises():
    with pytest.raises(ValueError, match="zero-norm"):
        L.cosine_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))))


def test_cosine_stop_grad_target():
    rng = np.random.default_rng(5)
    a = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    L.cosine_loss(a, b, stop_grad_b=True).backward()
    assert a.grad is not None and b.grad is None


def loss_cases(rng):
    sc = random_scribble(rng, 2, 3, 4, 4, frac=0.5)
    return {
        "partial_ce": (lambda z: L.partial_ce(dc.channel_softmax(z), sc), [rng.standard_normal((2, 3, 4, 4))]),
        "sup_loss": (lambda z: L.sup_loss(dc.channel_softmax(z), sc), [rng.standard_normal((2, 3, 4, 4))]),
        "cosine_loss": (L.cosine_loss, [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))]),
        "mix_outputs": (lambda a, b: L.mix_outputs(a, b, 0.35),
                        [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))]),
        "vicinal_reg": (lambda v, i: L.vicinal_reg_loss([(v, i), (i, v)]),
                        [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))]),
        "vicinal_sup": (lambda v, i: L.vicinal_sup_loss([(dc.channel_softmax(v), dc.channel_softmax(i), sc)]),
                        [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))]),
    }


@pytest.mark.parametrize("name", ["partial_ce", "sup_loss", "cosine_loss", "mix_outputs", "vicinal_reg", "vicinal_sup"])
def test_loss_gradcheck(name):
    fn, ins = loss_cases(np.random.default_rng(6))[name]
    rep = dc.finite_difference_check(fn, ins, eps=1e-5, op_name=name)
    assert rep.max_rel_err < 1e-4, rep


def test_mix_invariant_loss_model_level():
    from modelmix import nets

    m = nets.build_model(nets.UNetConfig(depth=2, base_channels=4, num_classes=2, dropout_rate=0.0), "t",
                         np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x1, x2 = rng.random((2, 1, 1, 8, 8)).astype(np.float32)
    # a model that sees the same image on both sides and alpha = 1 is trivially invariant
    out = L.mix_invariant_loss(m, Tensor(x1), Tensor(x2), Tensor(x1), 1.0, training=False)
    assert abs(float(out.data) + 1.0) < 1e-6


def test_vicinal_reg_identical_outputs():
    a = Tensor(random_probs(np.random.default_rng(7), (2, 3, 4, 4)))
    assert abs(float(L.vicinal_reg_loss([(a, a), (a, a)]).data) + 2.0) < 1e-9


def test_total_loss_breakdown_and_disabled_parts():
    parts = {"pce": None, "inv": Tensor(np.array(-0.5)), "vicinal_sup": 1.25, "vicinal_reg": Tensor(np.array(-2.0))}
    total, bd = L.total_loss(parts)
    assert bd.pce == 0.0 and bd.inv == -0.5 and bd.vicinal_sup == 1.25 and bd.vicinal_reg == -2.0
    assert abs(bd.total - float(total.data)) < 1e-12
    assert abs(bd.total - (-1.25)) < 1e-12


def test_total_loss_weights():
    total, bd = L.total_loss({"inv": Tensor(np.array(2.0))}, {"inv": 0.5})
    assert float(total.data) == 1.0 and bd.inv == 1.0


def test_total_loss_rejects_nonfinite():
    with pytest.raises(L.NonFiniteLoss) as exc:
        L.total_loss({"inv": Tensor(np.array(np.nan))})
    assert exc.value.part == "inv"


def test_sup_loss_half_probability_value():
    probs = np.full((1, 2, 1, 1), 0.5)
    val = float(L.sup_loss(Tensor(probs), ScribbleMap(np.zeros((1, 1, 1), dtype=int), 2)).data)
    assert abs(val - 0.0265) < 1e-4
    assert abs(val - (math.log(2) - 2 / 3)) < 1e-12


def test_cosine_small_cases():
    def cos(a, b):
        return float(L.cosine_loss(Tensor(np.array(a, float).reshape(1, 2, 1, 1)),
                                   Tensor(np.array(b, float).reshape(1, 2, 1, 1))).data)

    assert cos([1, 0], [0, 1]) == 0.0
    assert abs(cos([1, 0], [1, 1]) + math.sqrt(2) / 2) < 1e-12


def test_vicinal_sup_examples():
    lab = np.array([[[0, 1], [2, 2]]])
    sc = ScribbleMap(lab, 2)
    perfect = np.zeros((1, 2, 2, 2))
    perfect[0, 0, 0, 0] = perfect[0, 1, 0, 1] = 1.0
    perfect[0, :, 1, :] = 0.5
    p = Tensor(perfect)
    assert abs(float(L.vicinal_sup_loss([(p, p, sc)]).data) + 2.0) < 1e-9
    rnd = Tensor(random_probs(np.random.default_rng(9), (1, 2, 2, 2)))
    assert abs(float(L.vicinal_sup_loss([(rnd, rnd, sc)]).data) - 2 * float(L.sup_loss(rnd, sc).data)) < 1e-12


def test_total_loss_simple_sum():
    _, bd = L.total_loss({"inv": 0.1, "vicinal_sup": 0.2, "vicinal_reg": 0.3})
    assert abs(bd.total - 0.6) < 1e-12


def test_losses_gradcheck_against_model_parameters_single_precision():
    from modelmix import nets

    cfg = nets.UNetConfig(depth=2, base_channels=4, num_classes=2, dropout_rate=0.0)
    m = nets.build_model(cfg, "t", np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = Tensor(rng.random((2, 1, 4, 4)).astype(np.float32))
    sc = random_scribble(rng, 2, 2, 4, 4, frac=0.6)
    head = m.head

    def make(loss):
        def fn(k, b):
            m.head = nets.ConvParams(Tensor(k.data.astype(np.float32), requires_grad=True),
                                     Tensor(b.data.astype(np.float32), requires_grad=True))
            out = nets.forward(m, x)
            val = loss(out)
            # route the float32 graph back to the float64 probes
            return dc.custom_op(val.data.astype(np.float64), (k, b), lambda g: _grads(val, g))
        return fn

    def _grads(val, g):
        val.backward(np.asarray(g, dtype=np.float32))
        return m.head.kernel.grad.astype(np.float64), m.head.bias.grad.astype(np.float64)

    ins = [head.kernel.data.astype(np.float64), head.bias.data.astype(np.float64)]
    for loss in (lambda o: L.partial_ce(o, sc), lambda o: L.sup_loss(o, sc),
                 lambda o: L.cosine_loss(o, dc.batch_take(o, [1, 0]))):
        rep = dc.finite_difference_check(make(loss), ins, eps=1e-2)
        assert rep.max_rel_err < 1e-3, rep
    m.head = head
