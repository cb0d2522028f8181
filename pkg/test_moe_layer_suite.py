"""
MoE layer test suite.

Validates real and virtual experts, the γ-weighted combine, load accounting,
the calibrated balance loss and the total objective.
"""

import math

import numpy as np
import pytest

from anyexperts.baselines import BaselineConfig
from anyexperts.errors import ContractError, DimensionError
from anyexperts.importance import HiddenBatch, Modality
from anyexperts.moe_layer import (
    Expert,
    ExpertKind,
    LoadStats,
    MoELayer,
    balance_loss,
    forward,
    lm_loss,
    total_loss,
)
from anyexperts.numerics import Matrix, Rng, add, bind, check_gradients, square, sum_all
from anyexperts.routing import RouterConfig

SMALL = RouterConfig(k_min=2, k_max=4, e_real=4, e_virtual=2, rho_max=0.34, alpha=0.01)


def hidden_batch(values) -> HiddenBatch:
    values = Matrix(values)
    tags = tuple(Modality.TEXTLIKE if i % 2 == 0 else Modality.IMAGELIKE for i in range(values.rows))
    return HiddenBatch(values, tags)


def perturbed_params(layer: MoELayer, seed: int) -> dict:
    rng = Rng(seed)
    params = layer.init_parameters(rng.split("init"))
    return {name: value + rng.split(name).normal(0.3, value.shape) for name, value in params.items()}


def np_sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------------------
# Experts
# ---------------------------------------------------------------------------


def test_virtual_experts_hold_no_parameters():
    expert = Expert(5, ExpertKind.VIRTUAL, d=4)
    assert expert.parameter_shapes() == {}
    x = Matrix(Rng(0).normal(1.0, (3, 4)))
    assert expert.forward({}, x) is x


def test_real_expert_maps_zero_to_zero_with_zero_biases():
    expert = Expert(0, ExpertKind.REAL, d=4, d_ff=8)
    params = bind(expert.init_parameters(Rng(1)))
    assert expert.forward(params, Matrix.zeros(2, 4)).tolist() == [[0.0] * 4] * 2


def test_layer_parameter_shapes():
    layer = MoELayer.build(d=8, e_real=4, e_virtual=2)
    params = layer.init_parameters(Rng(0))
    shapes = layer.parameter_shapes()
    assert set(params) == set(shapes)
    assert all(params[name].shape == shape for name, shape in shapes.items())
    assert shapes["experts.3.w1"] == (8, 16)
    assert not any(name.startswith("experts.4") for name in shapes)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def test_all_virtual_selection_returns_fused_hidden():
    cfg = RouterConfig(k_min=1, k_max=2, e_real=2, e_virtual=2, rho_max=0.5)
    layer = MoELayer.build(d=3, e_real=2, e_virtual=2)
    params = bind(perturbed_params(layer, 2))
    h = hidden_batch(Rng(3).normal(1.0, (4, 3)))
    mask = np.array([[False, False, True, True]] * 4)
    out = forward(layer, params, h, cfg, forced_mask=mask)
    assert out.decisions.k_real.tolist() == [0] * 4
    np.testing.assert_allclose(out.output.hidden.data, out.importance.h_fused.data, rtol=1e-6)


def test_single_identity_expert_passes_nonnegative_input():
    cfg = RouterConfig(k_min=1, k_max=2, e_real=2, e_virtual=2, rho_max=0.5)
    layer = MoELayer.build(d=3, e_real=2, e_virtual=2, d_ff=3)
    raw = layer.init_parameters(Rng(4))
    raw.update({"experts.0.w1": np.eye(3), "experts.0.w2": np.eye(3)})
    h = hidden_batch(Rng(5).uniform(0.0, 2.0, (4, 3)))
    mask = np.array([[True, False, False, False]] * 4)
    out = forward(layer, bind(raw), h, cfg, forced_mask=mask)
    np.testing.assert_allclose(out.output.hidden.data, out.importance.h_fused.data, rtol=1e-6)


def test_forward_matches_scalar_recomputation():
    layer = MoELayer.build(d=4, e_real=4, e_virtual=2)
    raw = perturbed_params(layer, 11)
    h = hidden_batch(Rng(11).normal(1.0, (8, 4)))
    out = forward(layer, bind(raw), h, SMALL)

    h_fused = out.importance.h_fused.data
    logits = out.decisions.modulated_logits.data
    gamma = out.decisions.gamma.data
    result = out.output.hidden.data
    for i in range(8):
        chosen = out.decisions.selected[i]
        total = sum(np_sigmoid(logits[i, e]) for e in chosen) + SMALL.eps
        expected = [0.0] * 4
        for e in chosen:
            g = SMALL.lambda_ * np_sigmoid(logits[i, e]) / total
            assert gamma[i, e] == pytest.approx(g, rel=1e-12)
            if e < 4:
                hid = [
                    max(0.0, sum(h_fused[i, a] * raw[f"experts.{e}.w1"][a, b] for a in range(4)) + raw[f"experts.{e}.b1"][0, b])
                    for b in range(8)
                ]
                y = [
                    sum(hid[b] * raw[f"experts.{e}.w2"][b, c] for b in range(8)) + raw[f"experts.{e}.b2"][0, c]
                    for c in range(4)
                ]
            else:
                y = list(h_fused[i])
            for c in range(4):
                expected[c] += g * y[c]
        for c in range(4):
            assert result[i, c] == pytest.approx(expected[c], abs=1e-12)
        assert all(gamma[i, e] == 0.0 for e in range(6) if e not in chosen)


def test_output_norm_is_bounded_by_weighted_expert_norms():
    layer = MoELayer.build(d=4, e_real=4, e_virtual=2)
    params = bind(perturbed_params(layer, 12))
    out = forward(layer, params, hidden_batch(Rng(13).normal(1.0, (16, 4))), SMALL)
    expert_norms = np.stack(
        [np.linalg.norm(expert.forward(params, out.importance.h_fused).data, axis=1) for expert in layer.experts],
        axis=1,
    )
    bound = (out.decisions.gamma.data * expert_norms).sum(axis=1)
    assert (np.linalg.norm(out.output.hidden.data, axis=1) <= bound + 1e-9).all()


def test_forward_rejects_width_mismatch():
    layer = MoELayer.build(d=4, e_real=4, e_virtual=2)
    params = bind(layer.init_parameters(Rng(0)))
    with pytest.raises(DimensionError):
        forward(layer, params, hidden_batch(np.ones((2, 5))), SMALL)


def test_static_baseline_skips_importance():
    layer = MoELayer.build(d=4, e_real=4, e_virtual=0, estimator_variant=None)
    params = bind(layer.init_parameters(Rng(0)))
    out = forward(layer, params, hidden_batch(Rng(1).normal(1.0, (6, 4))), BaselineConfig.topk(2))
    assert out.importance is None
    assert out.decisions.k_real.tolist() == [2] * 6
    assert out.stats.t_virtual == 0


def test_dynamic_routing_needs_an_estimator():
    layer = MoELayer.build(d=4, e_real=4, e_virtual=2, estimator_variant=None)
    params = bind(layer.init_parameters(Rng(0)))
    with pytest.raises(ContractError):
        forward(layer, params, hidden_batch(np.ones((2, 4))), SMALL)


def test_layer_gradients_on_a_four_token_batch():
    layer = MoELayer.build(d=4, e_real=4, e_virtual=2)
    h = hidden_batch(Rng(21).normal(1.0, (4, 4)))

    def f(p):
        out = forward(layer, p, h, SMALL)
        return add(sum_all(square(out.output.hidden)), balance_loss(out.stats))

    report = check_gradients(f, perturbed_params(layer, 20), tol=1e-4)
    assert report.passed, report


# ---------------------------------------------------------------------------
# Load statistics and balance loss
# ---------------------------------------------------------------------------


def test_load_stats_accounting():
    layer = MoELayer.build(d=16, e_real=16, e_virtual=64)
    params = bind(perturbed_params(layer, 3))
    out = forward(layer, params, hidden_batch(Rng(4).normal(1.0, (32, 16))), RouterConfig())
    stats = out.stats
    k_hat_total = int(out.decisions.k_hat.sum())
    assert int(stats.c.sum()) + stats.t_virtual == k_hat_total
    assert stats.f.sum() == pytest.approx(k_hat_total / 32, rel=1e-12)
    assert np.all(stats.f[16:] == stats.t_virtual / (64 * 32))
    assert stats.avg_k_hat == k_hat_total / 32
    assert 8 <= stats.avg_k_hat <= 12
    assert stats.to_dict()["n_tokens"] == 32


def test_balance_uniform_routing():
    stats = LoadStats.from_counts([2, 2], 4, 2, np.full((1, 4), 0.25), 4)
    assert balance_loss(stats).item() == pytest.approx((8 / 4) / 4, abs=1e-15)


def test_balance_hand_enumeration():
    p = [0.4, 0.1, 0.3, 0.2]
    stats = LoadStats.from_counts([3, 1], 4, 2, [p], 4)
    f = [3 / 4, 1 / 4, 4 / (2 * 4), 4 / (2 * 4)]
    expected = f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + f[3] * p[3]
    assert abs(balance_loss(stats).item() - expected) <= 1e-12


def test_balance_is_scale_free():
    p = [[0.4, 0.1, 0.3, 0.2]]
    once = balance_loss(LoadStats.from_counts([3, 1], 4, 2, p, 4)).item()
    twice = balance_loss(LoadStats.from_counts([6, 2], 8, 2, p, 8)).item()
    assert once == twice


def test_balance_rejects_empty_batch():
    with pytest.raises(ContractError):
        LoadStats.from_counts([0, 0], 0, 2, [[0.25] * 4], 0)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def test_lm_loss_scalar_recomputation():
    logits = Rng(9).normal(2.0, (4, 8))
    targets = [1, 7, 0, 3]
    expected = 0.0
    for i, t in enumerate(targets):
        top = max(logits[i])
        expected -= logits[i, t] - top - math.log(sum(math.exp(v - top) for v in logits[i]))
    expected /= 4
    assert abs(lm_loss(Matrix(logits), targets).item() - expected) <= 1e-12


def test_lm_loss_rejects_unknown_target():
    with pytest.raises(ContractError):
        lm_loss(Matrix(np.zeros((1, 4))), [4])


def test_total_loss_examples():
    assert total_loss(1.0, 0.0, 0.0).total.item() == 1.0
    assert total_loss(0.0, 1.0, 1.0).total.item() == pytest.approx(0.011, abs=1e-15)
    bundle = total_loss(0.7, 0.25, 0.05)
    assert bundle.total.item() == pytest.approx(0.70075, abs=1e-15)
    assert bundle.values() == {"total": bundle.total.item(), "lm": 0.7, "tir": 0.25, "balance": 0.05}


def test_total_loss_rejects_negative_auxiliary_terms():
    with pytest.raises(ContractError):
        total_loss(1.0, -0.1, 0.0)
