# test_tensor_autograd.py
"""
Tensor kernel tests - operation values, backward rules, tape discipline and
the finite-difference harness.
Run with pytest, or directly: python test_tensor_autograd.py
"""

import gc
import math
import sys
import weakref
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

# Add project root to path
project_root = Path(__file__).parent
sys.path.append(str(project_root))

from core.errors import ConfigError, NumericError, ShapeError, TapeError
from core.tensor_autograd import (Tape, Tensor, add, channel_norm, conv_temporal, global_avg_pool, grad_check,
                                  linear, matmul, mul, relu, scale, softmax_cross_entropy, tensor_sum)


def conv_oracle(x, w, b, stride, pad):
    """Literal nested-loop temporal convolution over C_in×T×N"""
    c_in, t, n = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, t + 2 * pad, n))
    xp[:, pad:pad + t, :] = x
    t_out = (t + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, t_out, n))
    for o in range(c_out):
        for s in range(t_out):
            for j in range(n):
                acc = b[o]
                for c in range(c_in):
                    for q in range(k):
                        acc += w[o, c, q] * xp[c, s * stride + q, j]
                out[o, s, j] = acc
    return out


def weighted_sum(out: Tensor, rng) -> Tensor:
    """Scalar reduction Σ R⊙out with a fixed random R, so every output entry matters"""
    return tensor_sum(mul(out, Tensor(rng.standard_normal(out.shape))))


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------

def test_matmul_values():
    assert_array_equal(matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]]).data, [[1, 2], [3, 4]])
    assert_array_equal(matmul([[1.0, 2.0]], [[3.0], [4.0]]).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match="3×4.*5×2"):
        matmul(np.zeros((3, 4)), np.zeros((5, 2)))


def test_conv_temporal_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1)
    ones = np.ones((1, 1, 3))
    assert_array_equal(conv_temporal(x, ones, pad=1).data.ravel(), [3, 6, 9, 7])
    assert_array_equal(conv_temporal(x, ones, stride=2, pad=1).data.ravel(), [3, 9])
    delta = np.array([0.0, 1.0, 0.0]).reshape(1, 1, 3)
    assert_array_equal(conv_temporal(x, delta, pad=1).data, x)


def test_conv_temporal_matches_nested_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.choice([3, 5, 7, 9, 11]))
        pad = int(rng.integers(0, k // 2 + 1))
        t = int(rng.integers(max(1, k - 2 * pad), 17))
        c_in, c_out, n = (int(v) for v in rng.integers(1, [5, 5, 6]))
        stride = int(rng.integers(1, 3))
        x, w, b = rng.standard_normal((c_in, t, n)), rng.standard_normal((c_out, c_in, k)), rng.standard_normal(c_out)
        got = conv_temporal(x, w, b, stride, pad).data
        assert_allclose(got, conv_oracle(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_temporal_batched_matches_per_clip():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((3, 2, 10, 4)), rng.standard_normal((5, 2, 3))
    batched = conv_temporal(x, w, stride=2, pad=1).data
    for i in range(3):
        assert_allclose(batched[i], conv_temporal(x[i], w, stride=2, pad=1).data, rtol=0, atol=1e-12)


def test_conv_temporal_errors():
    x, w = np.zeros((1, 4, 1)), np.ones((1, 1, 3))
    with pytest.raises(ShapeError, match="stride"):
        conv_temporal(x, w, stride=0)
    with pytest.raises(ShapeError, match="exceeds padded length"):
        conv_temporal(np.zeros((1, 1, 1)), np.ones((1, 1, 5)), pad=1)
    with pytest.raises(ShapeError):
        conv_temporal(x, np.ones((1, 2, 3)))


def test_pointwise_values():
    assert_array_equal(add([1.0, -1.0], [2.0, 2.0]).data, [3, 1])
    assert_array_equal(relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])
    assert_allclose(scale([1.0, 2.0], 0.3).data, [0.3, 0.6], rtol=0, atol=1e-15)
    with pytest.raises(ShapeError):
        add([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ConfigError):
        from core.tensor_autograd import ewise
        ewise([1.0], [1.0], "max")


def test_channel_norm_values():
    assert_array_equal(channel_norm(np.array([1.0, 3.0]).reshape(1, 2, 1), eps=0.0).data.ravel(), [-1, 1])
    assert_array_equal(channel_norm(np.array([5.0, 5.0]).reshape(1, 2, 1), eps=1e-5).data.ravel(), [0, 0])


def test_channel_norm_moments():
    rng = np.random.default_rng(2)
    out = channel_norm(rng.standard_normal((4, 8, 6)), eps=0.0).data
    assert np.all(np.abs(out.mean(axis=(1, 2))) < 1e-9)
    assert np.all(np.abs(out.std(axis=(1, 2)) - 1.0) < 1e-6)
    # with the default eps the deviation from unit std is eps/σ
    wide = channel_norm(100.0 * rng.standard_normal((4, 8, 6))).data
    assert np.all(np.abs(wide.std(axis=(1, 2)) - 1.0) < 1e-6)


def test_global_avg_pool_values_and_gradient():
    assert_array_equal(global_avg_pool(np.ones((3, 2, 2))).data, [1, 1, 1])
    assert global_avg_pool(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2)).data[0] == 2.5

    x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        out = tensor_sum(global_avg_pool(x))
    tape.backward(out)
    assert_allclose(x.grad, np.full((2, 3, 4), 1.0 / 12), rtol=0, atol=1e-15)


def test_softmax_cross_entropy_values():
    loss, probs = softmax_cross_entropy([[0.0, 0.0]], [0])
    assert abs(loss.item() - math.log(2.0)) < 1e-15
    assert_allclose(probs, [[0.5, 0.5]])

    loss, probs = softmax_cross_entropy([[1000.0, 0.0]], [0])
    assert math.isfinite(loss.item()) and loss.item() < 1e-12

    rng = np.random.default_rng(4)
    logits, labels = rng.standard_normal((5, 7)), rng.integers(0, 7, size=5)
    loss, probs = softmax_cross_entropy(logits, labels)
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-12)
    shifted, _ = softmax_cross_entropy(logits + 123.4, labels)
    assert abs(shifted.item() - loss.item()) < 1e-9

    with pytest.raises(ConfigError, match="label 7"):
        softmax_cross_entropy(logits, [0, 1, 2, 3, 7])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 2])
    with Tape() as tape:
        loss, probs = softmax_cross_entropy(logits, labels)
    tape.backward(loss)
    expected = (probs - np.eye(3)[labels]) / 4
    assert_allclose(logits.grad, expected, rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

def test_tape_visits_in_reverse_order():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        b = scale(a, 2.0)
        c = mul(b, a)
        d = tensor_sum(c)
    assert [e.op for e in tape.entries] == ["scale", "mul", "sum"]
    tape.backward(d)
    assert tape.visited == [2, 1, 0]
    assert_array_equal(a.grad, [4.0, 8.0])


def test_tape_rejects_second_backward_and_vector_root():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = tensor_sum(scale(a, 3.0))
    tape.backward(out)
    with pytest.raises(TapeError):
        tape.backward(out)

    with Tape() as tape:
        vec = scale(a, 3.0)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(vec)


def test_zero_grad_is_exact():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        out = tensor_sum(mul(a, a))
    tape.backward(out)
    assert np.any(a.grad != 0)
    a.zero_grad()
    assert np.all(a.grad == 0.0)


def test_intermediate_gradients_are_lazy_and_released():
    a = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        hidden = relu(scale(a, 2.0))
        unused = mul(a, a)
        out = tensor_sum(hidden)
    assert hidden.requires_grad and hidden.grad is None
    assert unused.grad is None and out.grad is None

    tape.backward(out)
    assert_array_equal(a.grad, [2.0, 0.0, 2.0])
    # only leaves keep a gradient; off-path outputs never get one
    assert hidden.grad is None and unused.grad is None and out.grad is None
    assert all(e.backward is None and e.inputs == () and e.output is None for e in tape.entries)
    assert [e.op for e in tape.entries] == ["scale", "relu", "mul", "sum"]


def test_backward_frees_saved_activations():
    a = Tensor(np.ones((4, 5)), requires_grad=True)
    with Tape() as tape:
        hidden = relu(scale(a, 3.0))
        out = tensor_sum(hidden)
    ref = weakref.ref(hidden)
    del hidden
    gc.collect()
    assert ref() is not None
    tape.backward(out)
    gc.collect()
    assert ref() is None


def test_operations_outside_tape_do_not_record():
    a = Tensor([1.0], requires_grad=True)
    out = scale(a, 2.0)
    assert not out.requires_grad


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def test_grad_check_matmul():
    rng = np.random.default_rng(6)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="a")
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True, name="b")
    result = grad_check(lambda: tensor_sum(matmul(a, b)), [a, b])
    assert result.passed(1e-4)
    # d sum(a·b)/da = 1·bᵀ
    assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-14)


def test_grad_check_conv_temporal():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((2, 2, 9, 3)), requires_grad=True, name="x")
    w = Tensor(rng.standard_normal((3, 2, 5)), requires_grad=True, name="w")
    b = Tensor(rng.standard_normal(3), requires_grad=True, name="b")
    weights_rng = np.random.default_rng(70)
    r = Tensor(weights_rng.standard_normal((2, 3, 5, 3)))
    result = grad_check(lambda: tensor_sum(mul(conv_temporal(x, w, b, stride=2, pad=2), r)), [x, w, b])
    assert result.passed(1e-4), result


def test_grad_check_channel_norm_and_pool():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True, name="x")
    r = Tensor(rng.standard_normal((3, 5, 4)))
    result = grad_check(lambda: tensor_sum(mul(channel_norm(x), r)), [x])
    assert result.passed(1e-4), result

    batch = Tensor(rng.standard_normal((2, 3, 5, 4)), requires_grad=True, name="batch")
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True, name="w")
    result = grad_check(lambda: softmax_cross_entropy(linear(global_avg_pool(batch), w), [1, 0])[0], [batch, w])
    assert result.passed(1e-4), result


def test_grad_check_relu_away_from_kink():
    rng = np.random.default_rng(9)
    raw = rng.standard_normal((4, 6))
    x = Tensor(np.sign(raw) * (np.abs(raw) + 0.1), requires_grad=True, name="x")
    r = Tensor(rng.standard_normal((4, 6)))
    result = grad_check(lambda: tensor_sum(mul(relu(x), r)), [x])
    assert result.kinks_skipped == 0
    assert result.max_rel_error < 1e-6


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(10)
    w = Tensor(rng.standard_normal((1, 4)), requires_grad=True, name="w")
    x = np.sign(rng.standard_normal(4)) * rng.uniform(0.5, 1.5, size=4)
    # a linear map has no truncation error, so a wide step only shrinks round-off
    result = grad_check(lambda: tensor_sum(linear(x, w)), [w], h=1e-3)
    assert result.max_rel_error < 1e-10


def test_grad_check_scalar_factor_tensor():
    rng = np.random.default_rng(11)
    a = Tensor(rng.standard_normal(5), requires_grad=True, name="a")
    s = Tensor(0.3, requires_grad=True, name="s")
    r = Tensor(rng.standard_normal(5))
    result = grad_check(lambda: tensor_sum(mul(scale(a, s), r)), {"a": a, "s": s})
    assert result.passed(1e-4)
    assert_allclose(s.grad, np.sum(a.data * r.data), rtol=1e-12)


def test_grad_check_skips_relu_kink_crossings():
    x = Tensor([1e-7, -1e-7, 0.5], requires_grad=True, name="x")
    result = grad_check(lambda: tensor_sum(relu(x)), [x])
    assert result.kinks_skipped == 2
    assert result.checked == 1


def test_grad_check_reports_non_finite_values():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    with pytest.raises(NumericError):
        grad_check(lambda: tensor_sum(scale(x, float("inf"))), [x])


def run_all() -> bool:
    tests = [obj for name, obj in list(globals().items()) if name.startswith("test_") and callable(obj)]
    passed = 0
    for test in tests:
        try:
            test()
            print(f"✅ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"❌ {test.__name__}: {type(e).__name__}: {e}")
    print(f"\n📊 {passed}/{len(tests)} tensor kernel tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    sys.exit(0 if run_all() else 1)
