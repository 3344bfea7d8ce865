import math

import numpy as np
import pytest
import torch

from errors import NumericsError
from services.numerics import (
    AttentiveStatsPool, RngState, asp_pool, conv2d_same, cosine_sim, derive_seed, grad_check, softmax,
)


def test_softmax_uniform_and_known_values():
    """
    Test softmax on symmetric and hand-evaluated logits
    """
    assert torch.allclose(softmax([0.0, 0.0, 0.0, 0.0]), torch.full((4,), 0.25, dtype=torch.float64))

    probs = softmax([1.0, 2.0, 3.0])
    expected = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    assert np.allclose(probs.numpy(), expected, atol=1e-12)
    assert abs(float(probs[0]) - 0.0900) < 1e-4
    assert abs(float(probs[2]) - 0.6652) < 1e-4


def test_softmax_large_logits_do_not_overflow():
    """
    Test softmax stability for very large logits
    """
    probs = softmax([1000.0, 0.0])

    assert torch.isfinite(probs).all() == True
    assert abs(float(probs[0]) - 1.0) < 1e-12
    assert float(probs[1]) < 1e-300 or float(probs[1]) == 0.0


def test_softmax_sums_to_one_and_is_shift_invariant():
    """
    Test softmax normalisation and invariance to adding a constant
    """
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = torch.as_tensor(rng.normal(0, 5, size=7))
        probs = softmax(v)
        assert abs(float(probs.sum()) - 1.0) < 1e-9
        assert torch.allclose(softmax(v + 123.4), probs, atol=1e-12)


def test_softmax_invalid_input():
    """
    Test softmax errors on empty and non-finite input
    """
    with pytest.raises(NumericsError, match="empty input"):
        softmax([])
    with pytest.raises(NumericsError, match="non-finite"):
        softmax([1.0, float("nan")])
    with pytest.raises(NumericsError, match="non-finite"):
        softmax([1.0, float("inf")])


def test_asp_pool_constant_sequence():
    """
    Test pooling a constant sequence gives the frame and a zero deviation
    """
    c = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64)
    x = c.repeat(5, 1)
    weight = torch.tensor([0.3, -0.1, 0.7], dtype=torch.float64)

    out = asp_pool(x, weight)

    assert torch.allclose(out[:3], c, atol=1e-12)
    assert torch.allclose(out[3:], torch.zeros(3, dtype=torch.float64), atol=1e-4)


def test_asp_pool_uniform_attention_is_mean_and_std():
    """
    Test zero attention projection degenerates to plain mean and std
    """
    x = torch.tensor([[1.0], [3.0]], dtype=torch.float64)
    out = asp_pool(x, torch.zeros(1, dtype=torch.float64))

    assert abs(float(out[0]) - 2.0) < 1e-12
    assert abs(float(out[1]) - 1.0) < 1e-8

    rng = np.random.default_rng(1)
    frames = torch.as_tensor(rng.normal(size=(6, 4)))
    out = asp_pool(frames, torch.zeros(4, dtype=torch.float64))
    mean = frames.mean(dim=0)
    std = torch.sqrt(((frames - mean) ** 2).mean(dim=0) + 1e-9)
    assert torch.allclose(out, torch.cat([mean, std]), atol=1e-12)


def test_asp_pool_std_non_negative_and_batched():
    """
    Test the deviation half is non-negative and a batch pools each item separately
    """
    rng = np.random.default_rng(2)
    x = torch.as_tensor(rng.normal(size=(3, 5, 4)))
    weight = torch.as_tensor(rng.normal(size=4))

    out = asp_pool(x, weight)

    assert out.shape == (3, 8)
    assert (out[:, 4:] >= 0).all() == True
    for b in range(3):
        assert torch.allclose(out[b], asp_pool(x[b], weight), atol=1e-12)


def test_asp_pool_empty_sequence():
    """
    Test pooling zero frames
    """
    with pytest.raises(NumericsError, match="empty sequence"):
        asp_pool(torch.zeros(0, 3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))


def test_attentive_stats_pool_module(double_precision):
    """
    Test the module wrapper matches the functional form
    """
    pool = AttentiveStatsPool(3)
    x = torch.randn(4, 3)

    assert torch.allclose(pool(x), asp_pool(x, pool.attention.weight, pool.attention.bias))


def _naive_conv(x, kernels):
    c_out, c_in = kernels.shape[:2]
    _, h, w = x.shape
    padded = np.zeros((c_in, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(padded[:, i:i + 3, j:j + 3] * kernels[o])
    return out


def test_conv2d_same_identity_zero_and_ones():
    """
    Test identity, zero and all-ones kernels
    """
    x = torch.arange(12, dtype=torch.float64).reshape(1, 3, 4)
    identity = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    identity[0, 0, 1, 1] = 1.0

    assert torch.equal(conv2d_same(x, identity), x)
    assert torch.equal(conv2d_same(x, torch.zeros_like(identity)), torch.zeros_like(x))

    ones = conv2d_same(torch.ones(1, 3, 3, dtype=torch.float64), torch.ones(1, 1, 3, 3, dtype=torch.float64))
    assert float(ones[0, 1, 1]) == 9.0
    assert float(ones[0, 0, 0]) == 4.0


def test_conv2d_same_matches_naive_oracle():
    """
    Test random convolutions against a sliding-window loop
    """
    rng = np.random.default_rng(3)
    for _ in range(10):
        c_in, c_out = rng.integers(1, 4, size=2)
        h, w = rng.integers(1, 9, size=2)
        x = rng.normal(size=(c_in, h, w))
        kernels = rng.normal(size=(c_out, c_in, 3, 3))

        out = conv2d_same(torch.as_tensor(x), torch.as_tensor(kernels))

        assert out.shape == (c_out, h, w)
        assert np.allclose(out.numpy(), _naive_conv(x, kernels), atol=1e-12)


def test_conv2d_same_unsupported_kernel():
    """
    Test a 5x5 kernel is rejected
    """
    with pytest.raises(NumericsError, match="unsupported kernel"):
        conv2d_same(torch.zeros(1, 4, 4, dtype=torch.float64), torch.zeros(1, 1, 5, 5, dtype=torch.float64))


def test_cosine_sim_values():
    """
    Test cosine similarity of equal, orthogonal and 45 degree vectors
    """
    a = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)

    assert abs(float(cosine_sim(a, a)) - 1.0) < 1e-12
    assert abs(float(cosine_sim([1.0, 0.0], [0.0, 1.0]))) < 1e-12
    assert abs(float(cosine_sim([1.0, 0.0], [1.0, 1.0])) - 1 / math.sqrt(2)) < 1e-12


def test_cosine_sim_zero_vector():
    """
    Test a zero-norm input
    """
    with pytest.raises(NumericsError, match="zero vector"):
        cosine_sim([0.0, 0.0], [1.0, 1.0])


def test_grad_check_linear_constant_and_quadratic():
    """
    Test the gradient check on losses with known gradients
    """
    x = torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64)
    w = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (w * x).sum(), [w]) < 1e-10

    c = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: torch.tensor(3.0, dtype=torch.float64), [c]) == 0.0

    q = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (q ** 2).sum(), [q], eps=1e-5) < 1e-9


def test_grad_check_errors():
    """
    Test non-finite losses, bad steps and single precision parameters
    """
    w = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NumericsError, match="non-finite loss"):
        grad_check(lambda: w.sum() / 0.0, [w])
    with pytest.raises(NumericsError, match="eps"):
        grad_check(lambda: w.sum(), [w], eps=1e-2)
    with pytest.raises(NumericsError, match="float64"):
        grad_check(lambda: w.sum(), [torch.ones(1, requires_grad=True)])


def test_rng_state_is_deterministic():
    """
    Test identical seeds and keys give identical streams
    """
    a = RngState(7).child("mask", 3)
    b = RngState(7).child("mask", 3)

    assert a == b
    assert np.array_equal(a.numpy().random(5), b.numpy().random(5))
    assert torch.equal(torch.rand(4, generator=a.torch()), torch.rand(4, generator=b.torch()))
    assert derive_seed(7, "mask", 3) != derive_seed(7, "mask", 4)
    assert 0 <= derive_seed(7) < 2 ** 63


def test_rng_state_unknown_algorithm():
    """
    Test only the pcg64 algorithm is accepted
    """
    with pytest.raises(NumericsError, match="unknown rng algorithm"):
        RngState(1, algorithm="xorshift")
