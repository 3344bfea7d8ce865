import math

import pytest
import torch

from errors import ClassifierError
from services.classifier import ClassWeights, HeadConfig, StandInHead, classify, score, weighted_ce
from services.detector import build_detector
from services.hamoe import HamoeConfig
from services.labels import Label
from services.numerics import grad_check


def test_class_weights_defaults_and_validation():
    """
    Test default class weights and rejection of non-positive weights
    """
    weights = ClassWeights()

    assert weights.bonafide == 0.9
    assert weights.spoof == 0.1
    assert weights.as_tensor().tolist() == [0.9, 0.1]

    with pytest.raises(ClassifierError, match="positive"):
        ClassWeights(bonafide=0.0)


def test_classify_zero_mlp_gives_final_bias(double_precision):
    """
    Test zero MLP weights leave the final bias as logits
    """
    head = StandInHead(3, HeadConfig(hidden=4))
    torch.nn.init.zeros_(head.fc1.weight)
    torch.nn.init.zeros_(head.fc2.weight)

    logits = classify(torch.randn(5, 3), head)

    assert logits.shape == (2,)
    assert torch.equal(logits, head.fc2.bias.detach())


def test_classify_duplicate_frames_match_single_frame(double_precision):
    """
    Test repeated frames pool like a single frame
    """
    head = StandInHead(3, HeadConfig(hidden=4))
    frame = torch.randn(1, 3)

    assert torch.allclose(classify(frame.repeat(6, 1), head), classify(frame, head), atol=1e-12)


def test_classify_hand_set_single_frame(double_precision):
    """
    Test a one-frame input against the affine composition
    """
    head = StandInHead(2, HeadConfig(hidden=2))
    with torch.no_grad():
        head.fc1.weight.copy_(torch.tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]))
        head.fc1.bias.copy_(torch.tensor([0.0, -5.0]))
        head.fc2.weight.copy_(torch.tensor([[2.0, 1.0], [-1.0, 0.0]]))
        head.fc2.bias.copy_(torch.tensor([0.5, 0.25]))
    frame = torch.tensor([[3.0, 1.0]])

    logits = classify(frame, head)

    # the pooled vector is [3, 1, ~0, ~0]; the second hidden unit is cut by ReLU
    assert torch.allclose(logits, torch.tensor([6.5, -2.75]), atol=1e-6)


def test_classify_empty_sequence(double_precision):
    """
    Test classifying zero frames
    """
    with pytest.raises(ClassifierError, match="empty sequence"):
        classify(torch.zeros(0, 3), StandInHead(3))


def test_weighted_ce_values():
    """
    Test equal logits, a large margin and the unweighted case
    """
    equal = torch.zeros(2, dtype=torch.float64)
    assert abs(float(weighted_ce(equal, Label.BONAFIDE)) - 0.9 * math.log(2)) < 1e-12
    assert abs(float(weighted_ce(equal, Label.BONAFIDE)) - 0.6238) < 1e-4
    assert abs(float(weighted_ce(equal, Label.SPOOF)) - 0.1 * math.log(2)) < 1e-12

    confident = torch.tensor([60.0, 0.0], dtype=torch.float64)
    assert float(weighted_ce(confident, Label.BONAFIDE)) < 1e-20

    logits = torch.tensor([[0.3, -1.2], [2.0, 0.5], [-0.4, 0.1]], dtype=torch.float64)
    labels = torch.tensor([0, 1, 1])
    plain = torch.nn.functional.cross_entropy(logits, labels)
    assert torch.allclose(weighted_ce(logits, labels, ClassWeights(1.0, 1.0)), plain, atol=1e-12)


def test_weighted_ce_batch_is_weighted_mean():
    """
    Test the batch loss divides weighted losses by the sum of weights and ignores order
    """
    logits = torch.tensor([[0.3, -1.2], [2.0, 0.5], [-0.4, 0.1]], dtype=torch.float64)
    labels = [Label.BONAFIDE, Label.SPOOF, Label.SPOOF]
    per_sample = torch.stack([weighted_ce(row, label) for row, label in zip(logits, labels)])

    loss = weighted_ce(logits, labels)

    assert abs(float(loss) - float(per_sample.sum() / (0.9 + 0.1 + 0.1))) < 1e-12
    assert abs(float(weighted_ce(logits[[2, 0, 1]], [labels[2], labels[0], labels[1]])) - float(loss)) < 1e-12
    assert float(loss) >= 0


def test_weighted_ce_bad_width():
    """
    Test logits that are not two-way
    """
    with pytest.raises(ClassifierError, match="expected 2 logits"):
        weighted_ce(torch.zeros(3), Label.SPOOF)


def test_score_is_bonafide_margin():
    """
    Test score is logit(bonafide) - logit(spoof)
    """
    logits = torch.tensor([[2.0, 0.5], [-1.0, 1.0]], dtype=torch.float64)

    assert score(logits).tolist() == [1.5, -2.0]


def test_head_and_loss_grad_check(double_precision):
    """
    Test head and weighted loss gradients together
    """
    torch.manual_seed(0)
    head = StandInHead(3, HeadConfig(hidden=4))
    frames = torch.randn(2, 5, 3)
    labels = torch.tensor([0, 1])
    # the pooling score bias shifts every frame equally and has no gradient
    params = [p for name, p in head.named_parameters() if name != "pool.attention.bias"]

    assert grad_check(lambda: weighted_ce(classify(frames, head), labels), params) < 1e-4


def test_detector_with_and_without_hamoe(double_precision, tiny_encoder_cfg):
    """
    Test both detector layouts produce two logits and a pooled embedding
    """
    fused = build_detector(tiny_encoder_cfg, HamoeConfig(compress_dim=4, expert_hidden=8), HeadConfig(hidden=8), seed=1)
    plain = build_detector(tiny_encoder_cfg, HamoeConfig(enabled=False), HeadConfig(hidden=8), seed=1)
    waves = torch.randn(3, 40)

    out = fused(waves)
    assert out.logits.shape == (3, 2)
    assert out.embedding.shape == (3, 16)
    assert out.decision is not None
    assert out.layer_weights.shape == (3, 2)

    out = plain(waves)
    assert plain.hamoe is None
    assert out.logits.shape == (3, 2)
    assert out.decision is None


def test_build_detector_is_seeded(tiny_encoder_cfg):
    """
    Test the same seed gives the same detector
    """
    hamoe = HamoeConfig(compress_dim=4, expert_hidden=8)
    a = build_detector(tiny_encoder_cfg, hamoe, HeadConfig(hidden=8), seed=5)
    b = build_detector(tiny_encoder_cfg, hamoe, HeadConfig(hidden=8), seed=5)

    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name
