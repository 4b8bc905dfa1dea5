import math

import numpy as np
import pytest

from dualpt import numerics
from dualpt.alignment import (AlignmentMode, Batch, ClassDescriptors,
                              ContextBank, DistillMode, LossBreakdown,
                              ObjectiveConfig, attention_plan, class_prompts,
                              distill_loss_ce, distill_loss_cosine,
                              distill_loss_wd, global_predict, image_loss,
                              loss_and_gradient, loss_gradient, ot_predict,
                              predict_batch, solve_plans, total_loss)
from dualpt.errors import (InvalidClass, InvalidLabel, InvalidTemperature,
                           InvalidWeight, MissingDescriptors, ShapeMismatch)
from dualpt.transport import SinkhornConfig


def make_bank(rng, K, M, d, scale=0.3):
    anchors = numerics.normalize_rows(rng.standard_normal((K, d)))
    return ContextBank(scale * rng.standard_normal((M, d)), anchors)


def make_batch(rng, B, N, d, K):
    tokens = numerics.normalize_rows(rng.standard_normal((B, N, d)))
    return Batch(tokens, numerics.normalize_rows(tokens.mean(axis=1)), rng.integers(0, K, B))


def make_descriptors(rng, K, d):
    return ClassDescriptors(tuple(rng.standard_normal((int(e), d)) for e in rng.integers(1, 4, K)))


def single_token_bank():
    # one prompt per class, cosine 0.9 and 0.1 with the token (1, 0)
    anchors = np.array([[0.9, math.sqrt(0.19)], [0.1, math.sqrt(0.99)]])
    return ContextBank(np.zeros((1, 2)), anchors)


# %% prompts

def test_class_prompts_with_zero_context_are_anchors():
    anchors = numerics.normalize_rows(np.array([[1.0, 2.0, 2.0], [0.0, 3.0, 4.0]]))
    bank = ContextBank(np.zeros((3, 3)), anchors)
    for k in range(2):
        assert np.allclose(class_prompts(bank, k).data, anchors[k], atol=1e-15)


def test_class_prompts_contract():
    rng = np.random.default_rng(0)
    anchor = numerics.l2_normalize(rng.standard_normal(4))
    bank = ContextBank(rng.standard_normal((3, 4)), np.stack([anchor, anchor]))
    first, second = class_prompts(bank, 0), class_prompts(bank, 1)
    assert np.array_equal(first.data, second.data)
    assert np.allclose(np.linalg.norm(first.data, axis=1), 1.0, atol=1e-12)
    with pytest.raises(InvalidClass):
        class_prompts(bank, 2)
    with pytest.raises(InvalidClass):
        class_prompts(bank, -1)


def test_context_bank_shapes():
    bank = ContextBank(np.zeros((4, 3)), np.eye(3)[:2])
    assert (bank.num_prompts, bank.num_classes, bank.dim) == (4, 2, 3)
    assert bank.prompts().shape == (2, 4, 3)
    with pytest.raises(ShapeMismatch):
        ContextBank(np.zeros((4, 3)), np.eye(2))


# %% distillation losses

def test_cosine_distillation_fixtures():
    h = numerics.l2_normalize([1.0, 2.0, 3.0])
    matched = ContextBank(np.zeros((2, 3)), h[None])
    assert distill_loss_cosine(matched, ClassDescriptors((np.stack([h, h]),))) == pytest.approx(0.0, abs=1e-12)

    bank = ContextBank(np.zeros((1, 2)), np.array([[1.0, 0.0]]))
    assert distill_loss_cosine(bank, ClassDescriptors((np.eye(2),))) == pytest.approx(0.5, abs=1e-12)
    antipodal = ClassDescriptors((np.array([[-1.0, 0.0], [-2.0, 0.0]]),))
    assert distill_loss_cosine(bank, antipodal) == pytest.approx(2.0, abs=1e-12)


def test_cosine_distillation_is_order_free():
    rng = np.random.default_rng(1)
    bank = make_bank(rng, 2, 3, 5)
    blocks = [rng.standard_normal((4, 5)), rng.standard_normal((2, 5))]
    base = distill_loss_cosine(bank, ClassDescriptors(tuple(blocks)))
    shuffled = ClassDescriptors((blocks[0][[2, 0, 3, 1]], blocks[1][::-1]))
    assert distill_loss_cosine(bank, shuffled) == pytest.approx(base, abs=1e-15)
    reordered = ContextBank(bank.context[[2, 0, 1]], bank.anchors)
    assert distill_loss_cosine(reordered, ClassDescriptors(tuple(blocks))) == pytest.approx(base, abs=1e-15)


def test_descriptor_errors():
    with pytest.raises(MissingDescriptors):
        ClassDescriptors((np.zeros((0, 3)),))
    with pytest.raises(MissingDescriptors):
        ClassDescriptors(())
    bank = ContextBank(np.zeros((1, 3)), np.eye(3)[:2])
    with pytest.raises(ShapeMismatch):
        distill_loss_cosine(bank, ClassDescriptors((np.eye(3),)))


def test_wd_distillation_single_pair_is_cosine():
    rng = np.random.default_rng(2)
    bank = make_bank(rng, 3, 1, 4)
    descriptors = ClassDescriptors(tuple(rng.standard_normal((1, 4)) for _ in range(3)))
    assert distill_loss_wd(bank, descriptors) == pytest.approx(
        distill_loss_cosine(bank, descriptors), abs=1e-3)


def test_wd_distillation_matched_prompts():
    rng = np.random.default_rng(3)
    bank = make_bank(rng, 2, 2, 6, scale=1.0)
    prompts = bank.prompts()
    # descriptors are the prompts themselves, listed in the other order
    descriptors = ClassDescriptors(tuple(block[::-1] for block in prompts))
    loss = distill_loss_wd(bank, descriptors, SinkhornConfig(lam=0.001, inner_max=500))
    assert 0.0 <= loss <= 1e-3


def test_wd_distillation_is_nonnegative():
    rng = np.random.default_rng(4)
    for _ in range(5):
        bank = make_bank(rng, 3, 2, 5)
        assert distill_loss_wd(bank, make_descriptors(rng, 3, 5)) >= 0.0


def test_ce_distillation_uniform_target():
    rng = np.random.default_rng(5)
    anchor = numerics.l2_normalize(rng.standard_normal(4))
    block = rng.standard_normal((3, 4))
    descriptors = ClassDescriptors((block, block, block))
    batch = make_batch(rng, 4, 3, 4, 3)
    uniform = ContextBank(rng.standard_normal((2, 4)), np.stack([anchor] * 3))
    assert distill_loss_ce(batch, uniform, descriptors, tau=0.5) == pytest.approx(math.log(3), abs=1e-12)
    skewed = make_bank(rng, 3, 2, 4)
    assert distill_loss_ce(batch, skewed, descriptors, tau=0.5) > math.log(3)


def test_ce_distillation_student_equals_target():
    rng = np.random.default_rng(6)
    bank = make_bank(rng, 3, 2, 5)
    descriptors = ClassDescriptors(tuple(bank.prompts()))
    batch = make_batch(rng, 5, 3, 5, 3)
    target = numerics.softmax_rows(batch.global_features @ descriptors.centroids().T, 0.2)
    entropy = -np.mean(np.sum(target * np.log(target), axis=1))
    assert distill_loss_ce(batch, bank, descriptors, tau=0.2) == pytest.approx(entropy, abs=1e-10)


def test_ce_distillation_two_class_fixture():
    z = np.array([[1.0, 0.0]])
    batch = Batch(z[:, None, :], z, np.array([0]))
    descriptors = ClassDescriptors((np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])))
    bank = ContextBank(np.zeros((1, 2)), np.array([[0.6, 0.8], [0.8, 0.6]]))
    t0 = math.exp(1.0) / (math.exp(1.0) + 1.0)
    s0 = math.exp(0.6) / (math.exp(0.6) + math.exp(0.8))
    expected = -(t0 * math.log(s0) + (1.0 - t0) * math.log(1.0 - s0))
    assert distill_loss_ce(batch, bank, descriptors, tau=1.0) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(InvalidTemperature):
        distill_loss_ce(batch, bank, descriptors, tau=0.0)


# %% plans and predictions

def test_attention_plan():
    Z = np.array([[1.0, 0.0], [0.0, 1.0]])
    plan = attention_plan(Z, Z, attn_tau=1.0)
    high = math.exp(1.0) / (math.exp(1.0) + 1.0) / 2
    assert np.allclose(plan.T, [[high, 0.5 - high], [0.5 - high, high]], atol=1e-15)
    assert not plan.column_constrained
    assert plan.marginal_error == pytest.approx(0.0, abs=1e-15)

    flat = attention_plan(np.ones((3, 2)), np.ones((4, 2)), attn_tau=0.1)
    assert np.allclose(flat.T, 1 / 12, atol=1e-15)
    assert np.allclose(flat.T.sum(axis=1), 1 / 3, atol=1e-15)
    with pytest.raises(InvalidTemperature):
        attention_plan(Z, Z, attn_tau=0.0)


@pytest.mark.parametrize('mode', list(AlignmentMode))
def test_ot_predict_single_cell_fixture(mode):
    probs = ot_predict(np.array([[1.0, 0.0]]), single_token_bank(), mode=mode, tau=1.0)
    assert probs.weights == pytest.approx([0.6900, 0.3100], abs=1e-4)


def test_ot_predict_identical_prompt_sets_is_uniform():
    rng = np.random.default_rng(7)
    anchor = numerics.l2_normalize(rng.standard_normal(6))
    bank = ContextBank(rng.standard_normal((3, 6)), np.stack([anchor] * 4))
    probs = ot_predict(numerics.normalize_rows(rng.standard_normal((5, 6))), bank)
    assert np.allclose(probs.weights, 0.25, atol=1e-12)


@pytest.mark.parametrize('mode', list(AlignmentMode))
def test_ot_predict_ignores_token_order(mode):
    rng = np.random.default_rng(8)
    bank = make_bank(rng, 3, 2, 5)
    Z = numerics.normalize_rows(rng.standard_normal((4, 5)))
    probs = ot_predict(Z, bank, mode=mode, tau=0.1).weights
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(ot_predict(Z[[3, 1, 0, 2]], bank, mode=mode, tau=0.1).weights, probs, atol=1e-9)


@pytest.mark.parametrize('mode, alpha', [(AlignmentMode.NODE, 0.0), (AlignmentMode.EDGE, 1.0)])
def test_node_and_edge_modes_are_graph_endpoints(mode, alpha):
    rng = np.random.default_rng(9)
    bank = make_bank(rng, 3, 2, 6)
    tokens = numerics.normalize_rows(rng.standard_normal((4, 5, 6)))
    cfg = SinkhornConfig(alpha=0.2)
    reduced = predict_batch(tokens, bank, cfg, mode, tau=0.1)
    graph = predict_batch(tokens, bank, SinkhornConfig(alpha=alpha), AlignmentMode.GRAPH, tau=0.1)
    assert np.allclose(reduced, graph, atol=1e-10)

    batch = Batch(tokens, numerics.normalize_rows(tokens.mean(axis=1)), np.array([0, 1, 2, 0]))
    node_plans = solve_plans(batch, bank, None, ObjectiveConfig(sinkhorn=cfg, distill_mode='none', align_mode=mode))
    graph_plans = solve_plans(batch, bank, None, ObjectiveConfig(
        sinkhorn=SinkhornConfig(alpha=alpha), distill_mode='none', align_mode='graph'))
    assert np.allclose(node_plans.image, graph_plans.image, atol=1e-10)


def test_predict_batch_chunking():
    rng = np.random.default_rng(10)
    bank = make_bank(rng, 2, 3, 4)
    tokens = numerics.normalize_rows(rng.standard_normal((5, 3, 4)))
    whole = predict_batch(tokens, bank, chunk=64)
    assert np.allclose(predict_batch(tokens, bank, chunk=2), whole, atol=1e-12)
    assert np.allclose(whole.sum(axis=1), 1.0, atol=1e-12)


def test_global_predict():
    bank = ContextBank(np.zeros((2, 2)), np.eye(2))
    z = np.array([0.6, 0.8])
    probs = global_predict(z, bank, tau=1.0, use_context=False).weights
    assert probs[1] == pytest.approx(math.exp(0.8) / (math.exp(0.6) + math.exp(0.8)), abs=1e-15)
    assert np.allclose(global_predict(z, bank, tau=1.0).weights, probs, atol=1e-15)
    aligned = global_predict(np.array([0.0, 3.0]), bank, tau=0.01, use_context=False)
    assert aligned.argmax() == 1
    with pytest.raises(InvalidTemperature):
        global_predict(z, bank, tau=-1.0)
    with pytest.raises(ShapeMismatch):
        global_predict(np.ones(3), bank)


# %% image loss and objective

def test_image_loss_fixtures():
    z = np.array([[1.0, 0.0]])
    batch = Batch(z[:, None, :], z, np.array([0]))
    expected = -math.log(math.exp(0.9) / (math.exp(0.9) + math.exp(0.1)))
    assert image_loss(batch, single_token_bank(), tau=1.0) == pytest.approx(expected, abs=1e-12)
    assert image_loss(batch, single_token_bank(), tau=0.001) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidLabel):
        image_loss(Batch(z[:, None, :], z, np.array([2])), single_token_bank())


def test_image_loss_uniform_predictions():
    rng = np.random.default_rng(11)
    anchor = numerics.l2_normalize(rng.standard_normal(4))
    bank = ContextBank(rng.standard_normal((2, 4)), np.stack([anchor] * 5))
    batch = make_batch(rng, 6, 3, 4, 5)
    assert image_loss(batch, bank) == pytest.approx(math.log(5), abs=1e-12)


def test_total_loss_beta_endpoints_and_affinity():
    rng = np.random.default_rng(12)
    bank = make_bank(rng, 3, 2, 5)
    batch = make_batch(rng, 4, 3, 5, 3)
    descriptors = make_descriptors(rng, 3, 5)
    totals = {}
    for beta in (0.0, 0.2, 0.5, 1.0):
        breakdown = total_loss(batch, bank, descriptors, ObjectiveConfig(beta=beta, tau=0.1))
        assert breakdown.total == pytest.approx(
            beta * breakdown.l_llm + (1 - beta) * breakdown.l_img, abs=1e-12)
        totals[beta] = breakdown
    assert totals[0.0].total == totals[0.0].l_img
    assert totals[1.0].total == totals[1.0].l_llm
    assert totals[0.5].total == pytest.approx(0.5 * (totals[0.0].total + totals[1.0].total), abs=1e-12)


def test_loss_breakdown_and_config_validation():
    breakdown = LossBreakdown.combine(1.0, 3.0, 0.25)
    assert breakdown.total == 2.5
    assert breakdown.to_dict() == {'l_llm': 1.0, 'l_img': 3.0, 'total': 2.5, 'beta': 0.25}
    with pytest.raises(InvalidWeight):
        ObjectiveConfig(beta=1.2)
    with pytest.raises(InvalidTemperature):
        ObjectiveConfig(tau=0.0)
    with pytest.raises(InvalidTemperature):
        ObjectiveConfig(attn_tau=-1.0)
    assert ObjectiveConfig(align_mode='node').plan_config().alpha == 0.0
    assert ObjectiveConfig(align_mode='edge').plan_config().alpha == 1.0


def test_distillation_needs_descriptors():
    rng = np.random.default_rng(13)
    bank = make_bank(rng, 2, 2, 3)
    batch = make_batch(rng, 2, 2, 3, 2)
    with pytest.raises(MissingDescriptors):
        total_loss(batch, bank, None, ObjectiveConfig())
    breakdown = total_loss(batch, bank, None, ObjectiveConfig(distill_mode=DistillMode.NONE))
    assert breakdown.l_llm == 0.0


def test_solve_plans_shapes():
    rng = np.random.default_rng(14)
    bank = make_bank(rng, 3, 2, 4)
    batch = make_batch(rng, 5, 3, 4, 3)
    descriptors = make_descriptors(rng, 3, 4)
    plans = solve_plans(batch, bank, descriptors, ObjectiveConfig(distill_mode='wd'))
    assert plans.image.shape == (5, 3, 3, 2)
    assert [plan.shape for plan in plans.distill] == [(2, block.shape[0]) for block in descriptors.blocks]
    assert solve_plans(batch, bank, descriptors, ObjectiveConfig()).distill is None


# %% gradients

def finite_difference(f, S, h=1e-5):
    grad = np.zeros_like(S)
    for index in np.ndindex(S.shape):
        step = np.zeros_like(S)
        step[index] = h
        grad[index] = (f(S + step) - f(S - step)) / (2 * h)
    return grad


@pytest.mark.parametrize('seed', range(3))
@pytest.mark.parametrize('align', [AlignmentMode.GRAPH, AlignmentMode.ATTENTION])
@pytest.mark.parametrize('distill', list(DistillMode))
def test_gradient_matches_finite_differences(distill, align, seed):
    rng = np.random.default_rng(100 + seed)
    K, M, N, d = int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(3, 9))
    bank = make_bank(rng, K, M, d)
    batch = make_batch(rng, 3, N, d, K)
    descriptors = make_descriptors(rng, K, d)
    config = ObjectiveConfig(beta=0.3, tau=0.5, attn_tau=0.5, distill_mode=distill, align_mode=align)
    plans = solve_plans(batch, bank, descriptors, config)

    def f(S):
        return total_loss(batch, bank.with_context(S), descriptors, config, plans=plans).total

    analytic = loss_gradient(batch, bank, descriptors, config, plans=plans)
    numeric = finite_difference(f, bank.context)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    assert np.linalg.norm(analytic - numeric) / scale < 1e-4


def test_gradient_vanishes_at_cosine_minimum():
    h = numerics.l2_normalize([0.2, -0.4, 0.8, 0.1])
    bank = ContextBank(np.zeros((2, 4)), np.stack([h, h]))
    descriptors = ClassDescriptors((np.stack([h, h]), np.stack([h, h])))
    rng = np.random.default_rng(15)
    batch = make_batch(rng, 3, 2, 4, 2)
    grad = loss_gradient(batch, bank, descriptors, ObjectiveConfig(beta=1.0))
    assert np.linalg.norm(grad) <= 1e-8


def test_gradient_is_affine_in_beta():
    rng = np.random.default_rng(16)
    bank = make_bank(rng, 3, 2, 5)
    batch = make_batch(rng, 4, 3, 5, 3)
    descriptors = make_descriptors(rng, 3, 5)
    grads = {beta: loss_gradient(batch, bank, descriptors, ObjectiveConfig(beta=beta, tau=0.2))
             for beta in (0.0, 0.3, 1.0)}
    assert np.allclose(grads[0.3], 0.3 * grads[1.0] + 0.7 * grads[0.0], atol=1e-12)


def test_loss_and_gradient_agree_with_separate_calls():
    rng = np.random.default_rng(17)
    bank = make_bank(rng, 2, 2, 4)
    batch = make_batch(rng, 3, 3, 4, 2)
    descriptors = make_descriptors(rng, 2, 4)
    config = ObjectiveConfig(distill_mode='wd', tau=0.2)
    breakdown, grad = loss_and_gradient(batch, bank, descriptors, config)
    assert breakdown == total_loss(batch, bank, descriptors, config)
    assert np.array_equal(grad, loss_gradient(batch, bank, descriptors, config))
