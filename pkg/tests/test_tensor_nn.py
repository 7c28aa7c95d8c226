import math

import numpy as np
import pytest

from cmprior.errors import DimensionError, InvalidParameterError, TrainingError
from cmprior.grid_codec import HashGridParams
from cmprior.prior_store import PriorModel
from cmprior.tensor_nn import (
    AdamW,
    AttentionWeights,
    MlpWeights,
    attention_backward,
    attention_forward,
    conv3x3_apply,
    conv3x3_backward,
    conv3x3_forward,
    cross_attention_apply,
    grad_check,
    lr_at,
    mlp_apply,
    mlp_backward,
    mlp_forward,
    softmax,
    weighted_cross_entropy,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- MLP


def test_mlp_default_widths(rng):
    mlp = MlpWeights.init([32, 32, 32, 128], rng)
    assert mlp.widths == [32, 32, 32, 128]
    out = mlp_apply(rng.normal(size=(4, 5, 32)), mlp)
    assert out.shape == (4, 5, 128)
    with pytest.raises(DimensionError):
        mlp_apply(np.zeros((3, 31)), mlp)


def test_mlp_zero_weights(rng):
    mlp = MlpWeights.init([32, 32, 32, 128], rng)
    zero = MlpWeights([np.zeros_like(w) for w in mlp.weights], [np.zeros_like(b) for b in mlp.biases])
    np.testing.assert_array_equal(mlp_apply(rng.normal(size=(3, 32)), zero), 0)


def test_mlp_identity_first_layer_then_zero():
    mlp = MlpWeights(
        [np.eye(4), np.zeros((4, 4)), np.zeros((4, 2))],
        [np.zeros(4), np.zeros(4), np.zeros(2)],
    )
    np.testing.assert_array_equal(mlp_apply(np.array([[1.0, 2.0, 3.0, 4.0]]), mlp), [[0.0, 0.0]])


def test_mlp_scalar_hand_evaluation():
    # 1 -> 1 -> 1 -> 1 with ReLU after the first two layers
    mlp = MlpWeights(
        [np.array([[2.0]]), np.array([[-3.0]]), np.array([[0.5]])],
        [np.array([0.1]), np.array([4.0]), np.array([-1.0])],
    )
    h1 = max(0.0, 2.0 * 0.5 + 0.1)
    h2 = max(0.0, -3.0 * h1 + 4.0)
    expect = 0.5 * h2 - 1.0
    assert mlp_apply(np.array([[0.5]]), mlp)[0, 0] == pytest.approx(expect, abs=1e-12)


def test_mlp_ce_grad_check(rng):
    mlp = MlpWeights.init([6, 5, 4, 3], rng)
    # non-zero biases keep pre-activations away from the ReLU kink
    for b in mlp.biases:
        b[:] = rng.uniform(0.1, 0.5, size=b.shape)
    x = rng.normal(size=(8, 6))
    labels = rng.integers(0, 3, size=8)
    cw = np.array([0.5, 2.0, 1.3])
    params = mlp.named("mlp")

    def f(p):
        out, cache = mlp_forward(x, mlp)
        loss, g = weighted_cross_entropy(out, labels, cw)
        _, grads = mlp_backward(mlp, cache, g, "mlp")
        return loss, grads

    assert grad_check(f, params, h=1e-4) <= 1e-4


def test_mlp_input_gradient(rng):
    mlp = MlpWeights.init([4, 6, 2], rng)
    up = rng.normal(size=(5, 2))
    params = {"x": rng.normal(size=(5, 4))}

    def f(p):
        out, cache = mlp_forward(p["x"], mlp)
        gx, _ = mlp_backward(mlp, cache, up)
        return float((out * up).sum()), {"x": gx}

    assert grad_check(f, params) <= 1e-6


# --------------------------------------------------------------- conv


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(5, 6, 3))
    k = np.zeros((3, 3, 3, 3))
    k[1, 1] = np.eye(3)
    np.testing.assert_array_equal(conv3x3_apply(x, k, np.zeros(3)), x)


def test_conv_all_ones_interior():
    x = np.ones((5, 5, 1))
    out = conv3x3_apply(x, np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out[2, 2, 0] == 9
    assert out[0, 0, 0] == 4  # zero padding at the corner
    assert out.shape == (5, 5, 1)


def test_conv_zero_kernel_gives_bias(rng):
    out = conv3x3_apply(rng.normal(size=(4, 3, 2)), np.zeros((3, 3, 2, 5)), np.arange(5.0))
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(5.0), (4, 3, 5)))


def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(4, 5, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    want = np.zeros((4, 5, 3))
    for i in range(4):
        for j in range(5):
            want[i, j] = np.einsum("abc,abcd->d", xp[i:i + 3, j:j + 3], k) + b
    np.testing.assert_allclose(conv3x3_apply(x, k, b), want, rtol=1e-12)


def test_conv_grad_check_linear(rng):
    x = rng.normal(size=(4, 3, 2))
    k = rng.normal(size=(3, 3, 2, 2))
    b = rng.normal(size=2)
    up = rng.normal(size=(4, 3, 2))
    params = {"x": x, "k": k, "b": b}

    def f(p):
        out, cache = conv3x3_forward(p["x"], p["k"], p["b"])
        gx, gk, gb = conv3x3_backward(cache, up)
        return float((out * up).sum()), {"x": gx, "k": gk, "b": gb}

    assert grad_check(f, params) <= 1e-6


def test_conv_shape_errors(rng):
    with pytest.raises(DimensionError):
        conv3x3_apply(np.zeros((3, 3, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


# ---------------------------------------------------------- attention


def test_attention_zero_value_projection_is_residual(rng):
    aw = AttentionWeights.init(4, rng)
    aw.wv[:] = 0
    q = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(cross_attention_apply(q, rng.normal(size=(5, 4)), aw), q)


def test_attention_single_key(rng):
    aw = AttentionWeights.init(4, rng)
    q = rng.normal(size=(3, 4))
    kv = rng.normal(size=(1, 4))
    out = cross_attention_apply(q, kv, aw)
    np.testing.assert_allclose(out, q + (kv @ aw.wv) @ aw.wo, rtol=1e-12)


def test_attention_hand_computed():
    one = np.array([[1.0]])
    aw = AttentionWeights(one, one, one, one)
    q = np.array([[1.0]])
    kv = np.array([[0.0], [1.0]])
    # scores (0, 1); softmax weight on the second token is e / (1 + e)
    expect = 1.0 + math.e / (1.0 + math.e)
    assert cross_attention_apply(q, kv, aw)[0, 0] == pytest.approx(expect, abs=1e-14)


def test_attention_rows_sum_to_one(rng):
    aw = AttentionWeights.init(6, rng)
    _, cache = attention_forward(rng.normal(size=(7, 6)), rng.normal(size=(9, 6)) * 5, aw)
    attn = cache[5]
    assert np.abs(attn.sum(axis=1) - 1).max() <= 1e-12


def test_attention_errors(rng):
    aw = AttentionWeights.init(4, rng)
    with pytest.raises(InvalidParameterError):
        cross_attention_apply(np.zeros((2, 4)), np.zeros((0, 4)), aw)
    with pytest.raises(DimensionError):
        cross_attention_apply(np.zeros((2, 3)), np.zeros((2, 4)), aw)


def test_attention_grad_check(rng):
    aw = AttentionWeights.init(4, rng)
    q = rng.normal(size=(3, 4))
    kv = rng.normal(size=(5, 4))
    up = rng.normal(size=(3, 4))
    params = {"q": q, "kv": kv, **aw.named("attn")}

    def f(p):
        out, cache = attention_forward(p["q"], p["kv"], aw)
        gq, gkv, grads = attention_backward(aw, cache, up, "attn")
        return float((out * up).sum()), {"q": gq, "kv": gkv, **grads}

    assert grad_check(f, params) <= 1e-4


# --------------------------------------------------------------- loss


def test_ce_examples():
    loss, _ = weighted_cross_entropy(np.zeros((4, 2)), np.array([0, 1, 1, 0]), np.ones(2))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    loss, _ = weighted_cross_entropy(np.array([[1.0, 0.0]]), np.array([0]), np.array([2.0, 1.0]))
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-15)
    assert loss == pytest.approx(0.3133, abs=5e-5)
    loss, _ = weighted_cross_entropy(np.array([[60.0, -60.0]]), np.array([0]), np.ones(2))
    assert 0 <= loss < 1e-50


def test_ce_weighted_normalization():
    logits = np.array([[1.0, 0.0], [0.0, 2.0]])
    labels = np.array([0, 0])
    w = np.array([3.0, 1.0])
    nll = [math.log(1 + math.exp(-1)), math.log(1 + math.exp(2))]
    loss, _ = weighted_cross_entropy(logits, labels, w)
    # both samples carry weight 3, so this is the plain mean
    assert loss == pytest.approx(sum(nll) / 2, abs=1e-14)


def test_ce_nonnegative_and_errors(rng):
    for _ in range(20):
        loss, _ = weighted_cross_entropy(rng.normal(size=(10, 4)) * 3, rng.integers(0, 4, 10), rng.uniform(0.1, 5, 4))
        assert loss > 0
    with pytest.raises(InvalidParameterError):
        weighted_cross_entropy(np.zeros((1, 2)), np.array([2]), np.ones(2))
    with pytest.raises(InvalidParameterError):
        weighted_cross_entropy(np.zeros((1, 2)), np.array([0]), np.array([1.0, 0.0]))


# ---------------------------------------------------------- optimizer


def test_adamw_zero_grad_no_decay_is_noop(rng):
    p = {"w": rng.normal(size=5)}
    before = p["w"].copy()
    AdamW(p, lr=1e-2, weight_decay=0.0).step({"w": np.zeros(5)})
    np.testing.assert_array_equal(p["w"], before)


def test_adamw_first_step_is_signed_lr(rng):
    p = {"w": rng.normal(size=6)}
    before = p["w"].copy()
    g = rng.normal(size=6)
    AdamW(p, lr=1e-3, weight_decay=0.0).step({"w": g})
    np.testing.assert_allclose(p["w"] - before, -1e-3 * np.sign(g), rtol=1e-6)


def test_adamw_pure_decay(rng):
    p = {"w": rng.normal(size=4)}
    before = p["w"].copy()
    AdamW(p, lr=2e-4, weight_decay=0.01).step({"w": np.zeros(4)})
    np.testing.assert_allclose(p["w"], before * (1 - 2e-4 * 0.01), rtol=1e-15)


def test_adamw_matches_reference_recursion(rng):
    p = {"w": rng.normal(size=3)}
    w = p["w"].copy()
    opt = AdamW(p, lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    m = v = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        opt.step({"w": g})
        w = w * (1 - 1e-2 * 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_adamw_rejects_nonfinite():
    with pytest.raises(TrainingError):
        AdamW({"w": np.zeros(2)}).step({"w": np.array([np.inf, 0.0])})


def test_lr_schedule():
    assert lr_at(500, 10_000, 500, 2e-4) == pytest.approx(2e-4)
    assert lr_at(10_000, 10_000, 500, 2e-4) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(5250, 10_000, 500, 2e-4) == pytest.approx(1e-4)
    assert lr_at(0, 10_000, 500, 2e-4) == 0.0
    assert lr_at(250, 10_000, 500, 2e-4) == pytest.approx(1e-4)
    lrs = [lr_at(s, 1000, 100, 1.0) for s in range(100, 1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------- grad check


def test_grad_check_linear_function():
    a = np.array([1.5, -2.0, 0.25])
    params = {"x": np.array([0.3, 0.1, -0.7])}
    err = grad_check(lambda p: (float(a @ p["x"]), {"x": a}), params)
    assert err <= 1e-10


def test_grad_check_detects_wrong_gradient():
    params = {"x": np.array([1.0, 2.0])}
    err = grad_check(lambda p: (float((p["x"] ** 2).sum()), {"x": p["x"]}), params)
    assert err > 0.1


def test_full_chain_grad_check():
    rng = np.random.default_rng(11)
    model = PriorModel.create((0, 0, 60, 60), table_size=2**8, mlp_widths=(6, 5), binarized=False,
                              rng=rng, init_scale=0.5)
    probe = MlpWeights.init([5, 4, 3], rng)
    pts = rng.uniform(0, 60, size=(8, 2))
    labels = rng.integers(0, 3, size=8)
    cw = np.array([1.0, 2.0, 0.5])
    params = {**model.named(), **probe.named("probe")}

    def f(p):
        feats, cache = model.forward(pts)
        logits, pc = mlp_forward(feats, probe)
        loss, g = weighted_cross_entropy(logits, labels, cw)
        gf, grads = mlp_backward(probe, pc, g, "probe")
        grads.update(model.backward(cache, gf))
        return loss, grads

    assert grad_check(f, params, h=1e-4, max_entries=40, rng=rng) <= 1e-4


def test_softmax_stability():
    s = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(s, [[0.5, 0.5, 0.0]])
