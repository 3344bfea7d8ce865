import copy
import math

import pytest
import torch

from errors import HamoeError
from services.hamoe import (
    Expert, GateUsage, HamoeConfig, HierarchicalMoE, excite, expert_forward, gate, layer_contribution, moe_mix,
    weight_and_flatten,
)
from services.numerics import asp_pool, grad_check, softmax


def test_hamoe_config_validation():
    """
    Test invalid expert pool settings
    """
    with pytest.raises(HamoeError, match="top_k"):
        HamoeConfig(num_experts=4, top_k=5)
    with pytest.raises(HamoeError, match="top_k"):
        HamoeConfig(top_k=0)
    with pytest.raises(HamoeError, match="routing"):
        HamoeConfig(routing="layer")


def test_layer_contribution_symmetry_and_zero_score(double_precision):
    """
    Test identical layers score equally and a zero score projection gives zeros
    """
    torch.manual_seed(0)
    layer = torch.randn(5, 4)
    hidden = torch.stack([layer, layer, layer])
    proj = torch.randn(4, 2)
    pool_weight = torch.randn(2)
    score = torch.randn(4, 1)

    v_l = layer_contribution(hidden, proj, pool_weight, None, score)
    assert v_l.shape == (3,)
    assert torch.allclose(v_l, v_l[0].expand(3), atol=1e-12)

    assert torch.equal(layer_contribution(hidden, proj, pool_weight, None, torch.zeros(4, 1)), torch.zeros(3))


def test_layer_contribution_matches_composition():
    """
    Test a hand-set L=2, T=2, D=2, D_h=1 case against project, pool, project
    """
    hidden = torch.tensor([[[1.0, 2.0], [3.0, -1.0]], [[0.5, 0.5], [-2.0, 1.0]]], dtype=torch.float64)
    proj = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
    pool_weight = torch.tensor([0.5], dtype=torch.float64)
    score = torch.tensor([[2.0], [1.0]], dtype=torch.float64)

    v_l = layer_contribution(hidden, proj, pool_weight, None, score)

    for layer in range(2):
        compressed = hidden[layer] @ proj
        alpha = torch.softmax(compressed[:, 0] * 0.5, dim=0)
        mu = float((alpha * compressed[:, 0]).sum())
        sigma = math.sqrt(float((alpha * (compressed[:, 0] - mu) ** 2).sum()) + 1e-9)
        assert abs(float(v_l[layer]) - (2.0 * mu + sigma)) < 1e-12


def test_excite_values_and_odd_layers():
    """
    Test excitation on zero weights, zero input and a hand-evaluated case
    """
    v_l = torch.tensor([0.3, -1.0, 2.0, 0.1], dtype=torch.float64)
    w1 = torch.randn(4, 2, dtype=torch.float64)

    assert torch.allclose(excite(v_l, w1, torch.zeros(2, 4, dtype=torch.float64)), torch.full((4,), 0.5, dtype=torch.float64))
    assert torch.allclose(excite(torch.zeros(4, dtype=torch.float64), w1, torch.randn(2, 4, dtype=torch.float64)),
                          torch.full((4,), 0.5, dtype=torch.float64))

    v_h = excite(
        torch.tensor([1.0, 0.0], dtype=torch.float64),
        torch.tensor([[1.0], [1.0]], dtype=torch.float64),
        torch.tensor([[1.0, -1.0]], dtype=torch.float64),
    )
    assert abs(float(v_h[0]) - 0.7311) < 1e-4
    assert abs(float(v_h[1]) - 0.2689) < 1e-4

    with pytest.raises(HamoeError, match="L must be even"):
        excite(torch.zeros(3, dtype=torch.float64), torch.zeros(3, 1), torch.zeros(1, 3))


def test_weight_and_flatten():
    """
    Test layer weighting and per-frame concatenation
    """
    hidden = torch.tensor([[[1.0, 2.0]], [[3.0, 4.0]]], dtype=torch.float64)

    flat = weight_and_flatten(hidden, torch.tensor([0.5, 2.0], dtype=torch.float64))
    assert flat.tolist() == [[0.5, 1.0, 6.0, 8.0]]

    plain = weight_and_flatten(hidden, torch.ones(2, dtype=torch.float64))
    assert plain.tolist() == [[1.0, 2.0, 3.0, 4.0]]

    one_hot = weight_and_flatten(hidden, torch.tensor([0.0, 1.0], dtype=torch.float64))
    assert one_hot.tolist() == [[0.0, 0.0, 3.0, 4.0]]


def test_gate_values():
    """
    Test zero gate weights, duplicate frames and a hand-evaluated gate
    """
    features = torch.tensor([[1.0, 2.0], [1.0, 2.0], [0.0, -1.0]], dtype=torch.float64)

    uniform = gate(features, torch.zeros(2, 4, dtype=torch.float64))
    assert torch.allclose(uniform, torch.full((3, 4), 0.25, dtype=torch.float64))

    w_g = torch.tensor([[1.0, -1.0], [0.5, 0.0]], dtype=torch.float64)
    probs = gate(features, w_g)
    assert torch.equal(probs[0], probs[1])
    expected = math.exp(2.0) / (math.exp(2.0) + math.exp(-1.0))
    assert abs(float(probs[0, 0]) - expected) < 1e-12


def test_expert_forward_cases(double_precision):
    """
    Test zero experts, negative pre-activations and a hand composition
    """
    expert = Expert(3, 2, 2)
    for param in expert.parameters():
        torch.nn.init.zeros_(param)
    assert torch.equal(expert_forward(torch.randn(3), expert), torch.zeros(2))

    with torch.no_grad():
        expert.fc1.weight.copy_(torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        expert.fc1.bias.copy_(torch.tensor([-10.0, -10.0]))
        expert.fc2.weight.copy_(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
        expert.fc2.bias.copy_(torch.tensor([0.5, -0.5]))
    assert torch.equal(expert_forward(torch.tensor([1.0, 2.0, 3.0]), expert), torch.tensor([0.5, -0.5]))

    with torch.no_grad():
        expert.fc1.bias.zero_()
    out = expert_forward(torch.tensor([1.0, -2.0, 3.0]), expert)
    assert torch.allclose(out, torch.tensor([1.5, 2.5]))


def test_moe_mix_renormalises_top_k():
    """
    Test top-2 renormalisation of a known distribution
    """
    probs = torch.tensor([0.5, 0.3, 0.15, 0.05], dtype=torch.float64)
    outs = torch.eye(4, dtype=torch.float64)

    mixed, decision = moe_mix(probs, outs, 2)

    assert torch.allclose(decision.weights, torch.tensor([0.625, 0.375, 0.0, 0.0], dtype=torch.float64))
    assert decision.selected.tolist() == [0, 1]
    assert torch.allclose(mixed, decision.weights)


def test_moe_mix_full_k_identical_outputs_and_ties():
    """
    Test K = N mixing, identical expert outputs and lowest-index tie-breaking
    """
    probs = softmax(torch.tensor([[0.2, -1.0, 0.7]], dtype=torch.float64))
    outs = torch.randn(1, 3, 2, dtype=torch.float64)

    mixed, _ = moe_mix(probs, outs, 3)
    assert torch.allclose(mixed, (probs.unsqueeze(-1) * outs).sum(dim=-2), atol=1e-12)

    v = torch.tensor([1.0, -3.0], dtype=torch.float64)
    same, _ = moe_mix(probs, v.expand(1, 3, 2), 2)
    assert torch.allclose(same[0], v, atol=1e-12)

    _, decision = moe_mix(torch.tensor([0.25, 0.25, 0.25, 0.25], dtype=torch.float64), torch.zeros(4, 1), 2)
    assert decision.selected.tolist() == [0, 1]

    with pytest.raises(HamoeError, match="top_k"):
        moe_mix(probs, outs, 4)


def test_routing_invariants_on_many_frames():
    """
    Test weight sums, zero counts and shift invariance on 10^4 random frames
    """
    g = torch.Generator().manual_seed(7)
    logits = torch.randn(10000, 4, generator=g, dtype=torch.float64)
    outs = torch.randn(10000, 4, 3, generator=g, dtype=torch.float64)

    _, decision = moe_mix(softmax(logits), outs, 2)
    _, shifted = moe_mix(softmax(logits + 5.0), outs, 2)

    assert torch.allclose(decision.weights.sum(dim=-1), torch.ones(10000, dtype=torch.float64), atol=1e-9)
    assert ((decision.weights == 0).sum(dim=-1) == 2).all() == True
    assert torch.equal(decision.selected, shifted.selected)
    assert torch.allclose(decision.weights, shifted.weights, atol=1e-12)


def _tiny_moe(**overrides):
    values = dict(compress_dim=2, num_experts=4, top_k=2, expert_hidden=3)
    values.update(overrides)
    return HierarchicalMoE(2, 4, HamoeConfig(**values))


def test_hierarchical_moe_shapes_and_usage(double_precision):
    """
    Test output shapes, decisions and the gate usage table
    """
    torch.manual_seed(1)
    moe = _tiny_moe()
    hidden = torch.randn(3, 2, 5, 4)

    out = moe(hidden)

    assert out.output.shape == (3, 5, 4)
    assert out.layer_weights.shape == (3, 2)
    assert ((out.layer_weights > 0) & (out.layer_weights < 1)).all() == True
    assert out.decision.selected.shape == (3, 5, 2)

    usage = GateUsage(4)
    usage.add(out.decision)
    table = usage.table()
    assert sum(row[1] for row in table) == 3 * 5 * 2
    assert abs(sum(row[2] for row in table) - 2.0) < 1e-12
    assert usage.decisions == 15


def test_utterance_routing_shares_one_decision(double_precision):
    """
    Test utterance routing selects the same experts for every frame
    """
    torch.manual_seed(2)
    moe = _tiny_moe(routing="utterance")

    out = moe(torch.randn(2, 6, 4))

    assert (out.decision.selected == out.decision.selected[0]).all() == True


def test_hierarchical_moe_odd_layers():
    """
    Test an odd layer count
    """
    with pytest.raises(HamoeError, match="L must be even"):
        HierarchicalMoE(3, 4, HamoeConfig())


def test_expert_permutation_is_unobservable(double_precision):
    """
    Test permuting experts together with their gate columns leaves the output unchanged
    """
    torch.manual_seed(3)
    moe = _tiny_moe()
    permuted = copy.deepcopy(moe)
    order = [2, 0, 3, 1]
    with torch.no_grad():
        permuted.gate_weight.copy_(moe.gate_weight[:, order])
    permuted.experts = torch.nn.ModuleList(copy.deepcopy(moe.experts[i]) for i in order)
    hidden = torch.randn(2, 4, 4)

    assert torch.allclose(permuted(hidden).output, moe(hidden).output, atol=1e-12)


def test_unselected_experts_receive_zero_gradient(double_precision):
    """
    Test gradients only reach the experts chosen for the single frame
    """
    torch.manual_seed(4)
    moe = _tiny_moe()
    out = moe(torch.randn(2, 1, 4))
    out.output.sum().backward()

    selected = set(out.decision.selected[0].tolist())
    for index, expert in enumerate(moe.experts):
        grads = [p.grad for p in expert.parameters()]
        if index in selected:
            continue
        assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)


def test_hierarchical_moe_grad_check(double_precision):
    """
    Test gradients through the whole block at L=2, T=3, D=4, N=4, K=2
    """
    torch.manual_seed(5)
    moe = _tiny_moe()
    hidden = torch.randn(2, 3, 4)
    r = torch.randn(3, 4)
    # a bias on the pooling scores moves every frame equally and has no gradient
    params = [p for name, p in moe.named_parameters() if name != "pool.attention.bias"]

    assert grad_check(lambda: (moe(hidden).output * r).sum(), params) < 1e-4


def test_asp_pool_in_layer_contribution_is_shared():
    """
    Test the pooling used for layer scores is the shared attentive statistics pooling
    """
    hidden = torch.randn(2, 4, 3, dtype=torch.float64)
    proj = torch.eye(3, dtype=torch.float64)
    pool_weight = torch.zeros(3, dtype=torch.float64)
    score = torch.ones(6, 1, dtype=torch.float64)

    v_l = layer_contribution(hidden, proj, pool_weight, None, score)

    assert torch.allclose(v_l, asp_pool(hidden, pool_weight).sum(dim=-1), atol=1e-12)
