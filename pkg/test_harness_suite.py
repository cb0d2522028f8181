"""
Harness test suite.

Validates synthetic data generation, the desk model, adaptive-moment training,
evaluation, budget sweeps, importance traces and ablations.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from anyexperts.config import RunConfig
from anyexperts.errors import ConfigError, ContractError
from anyexperts.exports import SweepRow
from anyexperts.harness import (
    AdamState,
    BaselineTraining,
    DeskModel,
    SweepReport,
    TrainState,
    ablation,
    baseline_training,
    budget_sweep,
    desk_router,
    evaluate,
    export_importance_trace,
    normalize_scales,
    pairwise_separation,
    standard_variants,
    train,
    train_topk_baseline,
)
from anyexperts.importance import Modality
from anyexperts.numerics import bind
from anyexperts.routing import RouterConfig
from anyexperts.synthetic import BACKGROUND_IDS, Vocabulary, block_modalities, generate, stack

ROUTER = desk_router()
DESK_GEOMETRY = dict(d=8, vocab=8, seq_len=8, n_sequences=2, eval_sequences=2, k_min=2, k_max=4, e_real=4, e_virtual=2, rho_max=0.34)


def desk_state(seed: int = 0, router: RouterConfig = ROUTER) -> TrainState:
    model = DeskModel.build(vocab=8, d=8, e_real=router.e_real, e_virtual=router.e_virtual)
    return TrainState.initial(model, seed)


def desk_data(seed: int = 0, n: int = 2, seq_len: int = 8, stream: str = "train"):
    return stack(generate(seed, n, seq_len, 0.5, 8, stream=stream))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def test_generate_is_deterministic():
    a = generate(7, 3, 16, 0.5)
    b = generate(7, 3, 16, 0.5)
    assert all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a, b))
    c = generate(7, 3, 16, 0.5, stream="eval")
    assert not all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a, c))


def test_block_layout_and_spans():
    modalities = block_modalities(16)
    assert modalities[:4] == (Modality.TEXTLIKE,) * 4
    assert modalities[4:8] == (Modality.IMAGELIKE,) * 4
    assert generate(0, 1, 16, 0.5)[0].spans() == [(4, 8), (12, 16)]


def test_zero_redundancy_is_all_informative():
    for stream in generate(1, 4, 16, 0.0):
        assert stream.informative.all()


def test_redundant_count_is_exact():
    for stream in generate(2, 5, 16, 0.6):
        redundant = np.flatnonzero(~stream.informative)
        assert redundant.size == math.floor(0.6 * 8)
        assert all(stream.modalities[p] is Modality.IMAGELIKE for p in redundant)
        assert set(stream.tokens[redundant].tolist()) <= set(BACKGROUND_IDS)


def test_targets_share_one_task_across_streams():
    mapping = Vocabulary(32).target_map()
    for name in ("train", "eval"):
        for stream in generate(3, 2, 16, 0.5, stream=name):
            for p in np.flatnonzero(stream.informative):
                assert stream.targets[p] == mapping[stream.tokens[p]]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"vocab": 5},
        {"redundancy": 1.0},
        {"redundancy": -0.1},
        {"seq_len": 3},
        {"n_sequences": 0},
    ],
)
def test_generate_rejects_bad_settings(kwargs):
    settings = {"seed": 0, "n_sequences": 1, "seq_len": 8, "redundancy": 0.5, **kwargs}
    with pytest.raises(ConfigError):
        generate(**settings)


def test_stack_tracks_origins():
    batch = stack(generate(4, 3, 8, 0.5))
    assert batch.n_tokens == 24
    assert batch.sequence.tolist() == [0] * 8 + [1] * 8 + [2] * 8
    assert batch.position.tolist() == list(range(8)) * 3


# ---------------------------------------------------------------------------
# Optimizer and training
# ---------------------------------------------------------------------------


def test_first_adam_step_moves_by_learning_rate():
    params = {"p": np.array([[1.0, -1.0]])}
    updated, state = AdamState.zeros_like(params).update(params, {"p": np.array([[2.0, -3.0]])}, 0.1)
    np.testing.assert_allclose(updated["p"], [[0.9, -0.9]], atol=1e-7)
    assert state.t == 1


def test_zero_learning_rate_leaves_parameters_unchanged():
    state = desk_state()
    trained, curve = train(state, desk_data(), ROUTER, 3, 0.0)
    assert all(np.array_equal(trained.params[name], state.params[name]) for name in state.params)
    assert trained.step == 3
    assert [point.step for point in curve] == [0, 1, 2]


def test_training_contract():
    with pytest.raises(ContractError):
        train(desk_state(), desk_data(), ROUTER, 0, 0.01)
    with pytest.raises(ContractError):
        train(desk_state(), desk_data(), ROUTER, 1, -0.01)


def test_training_is_deterministic_and_reduces_loss():
    data = desk_data(n=4, seq_len=16)
    _, first = train(desk_state(5), data, ROUTER, 30, 0.05)
    _, second = train(desk_state(5), data, ROUTER, 30, 0.05)
    assert [p.total for p in first] == [p.total for p in second]
    assert first[-1].total < first[0].total


def test_two_hundred_steps_at_width_sixteen_reduce_the_loss():
    model = DeskModel.build(vocab=32, d=16, e_real=ROUTER.e_real, e_virtual=ROUTER.e_virtual)
    data = stack(generate(1, 2, 32, 0.5))
    _, curve = train(TrainState.initial(model, 1), data, ROUTER, 200, RunConfig(seed=0).lr)
    assert len(curve) == 200
    assert curve[-1].total < curve[0].total


def test_curve_components_add_up():
    _, curve = train(desk_state(), desk_data(), ROUTER, 2, 0.01, lambda_tir=0.001, lambda_bal=0.01)
    for point in curve:
        assert point.total == pytest.approx(point.lm + 0.001 * point.tir + 0.01 * point.balance, abs=1e-12)


def test_periodic_evaluation_callback():
    seen = []
    train(desk_state(), desk_data(), ROUTER, 4, 0.01, eval_every=2, on_eval=lambda step, result: seen.append(step))
    assert seen == [2, 4]


def test_evaluate_reports_groups():
    state = desk_state()
    result = evaluate(state, desk_data(n=2, seq_len=16), ROUTER)
    assert 0.0 <= result.accuracy <= 1.0
    assert set(result.avg_k_real_by_group) == {"textlike", "imagelike", "informative", "redundant"}
    assert result.mean_w_informative == result.mean_w_redundant == 0.5
    assert result.separation == 0.5


# ---------------------------------------------------------------------------
# Budget sweep
# ---------------------------------------------------------------------------


def test_normalize_scales():
    assert normalize_scales([0.6, 1.5, 0.9, 0.9]) == [1.0, 0.9, 0.6]
    with pytest.raises(ConfigError):
        normalize_scales([0.5, 0.0])
    with pytest.raises(ConfigError):
        normalize_scales([])


def test_full_budget_matches_plain_evaluation():
    state, data = desk_state(), desk_data()
    report = budget_sweep(state, data, [1.0], ROUTER)
    direct = evaluate(state, data, ROUTER)
    assert len(report.rows) == 1
    assert report.rows[0].eval_loss == direct.loss
    assert report.rows[0].avg_k_real == direct.avg_k_real


def test_sweep_reduces_slots_monotonically():
    router = RouterConfig()
    model = DeskModel.build(vocab=32, d=8, e_real=16, e_virtual=64)
    state = TrainState.initial(model, 0)
    data = stack(generate(0, 2, 16, 0.5))
    report = budget_sweep(state, data, [0.6, 0.7, 0.8, 0.9, 1.0], router)
    k_hat = [row.avg_k_hat for row in report.rows]
    assert [row.budget_scale for row in report.rows] == [1.0, 0.9, 0.8, 0.7, 0.6]
    assert k_hat == sorted(k_hat, reverse=True)
    # w == 0.5 at init: 10 slots at full budget, 9 at 0.9
    assert k_hat[0] == 10.0
    assert k_hat[1] == 9.0


def test_sweep_trains_and_skips_baselines():
    state, data = desk_state(), desk_data()
    training = BaselineTraining(train_data=data, ks=(2, 9), steps=2, lr=0.01, seed=0)
    report = budget_sweep(state, data, [1.0], ROUTER, baselines=training)
    assert [row.kind for row in report.rows] == ["anyexperts", "topk"]
    assert report.baseline_rows[0].k == 2
    assert report.baseline_rows[0].avg_k_real == 2.0
    assert report.baseline_rows[0].virtual_share == 0.0


def test_trained_sweep_never_adds_real_experts_as_budget_shrinks():
    data = desk_data(n=4, seq_len=16)
    state, _ = train(desk_state(3), data, ROUTER, 20, 0.05)
    report = budget_sweep(state, data, [1.0, 0.8, 0.6, 0.4, 0.2], ROUTER)
    k_real = [row.avg_k_real for row in report.rows]
    assert k_real == sorted(k_real, reverse=True)
    assert k_real[-1] < k_real[0]


def test_baselines_share_the_run_combination_settings():
    training = baseline_training(RunConfig(seed=0, lambda_=0.5, eps=1e-6, **DESK_GEOMETRY))
    assert (training.lambda_, training.eps) == (0.5, 1e-6)
    state, router = train_topk_baseline(desk_state().model, 2, replace(training, steps=1))
    assert (router.lambda_, router.eps) == (0.5, 1e-6)
    out = state.model.forward(bind(state.params), desk_data(), router)
    np.testing.assert_allclose(out.layer.decisions.gamma.data.sum(axis=1), 0.5, rtol=1e-4)


def test_matched_pairs_pick_the_closest_budget():
    def row(kind, k_real, **extra):
        return SweepRow(
            kind=kind,
            avg_k_hat=k_real,
            avg_k_real=k_real,
            virtual_share=0.0,
            eval_loss=1.0,
            eval_accuracy=0.5,
            **extra,
        )

    report = SweepReport(
        rows=[
            row("anyexperts", 8.4, budget_scale=1.0),
            row("anyexperts", 6.1, budget_scale=0.7),
            row("topk", 6.0, k=6),
        ]
    )
    [(baseline, dynamic)] = report.matched_pairs()
    assert baseline.k == 6
    assert dynamic.budget_scale == 0.7


# ---------------------------------------------------------------------------
# Importance traces and separation
# ---------------------------------------------------------------------------


def test_pairwise_separation():
    assert pairwise_separation([0.9, 0.8, 0.1], [True, True, False]) == 1.0
    assert pairwise_separation([0.5, 0.5], [True, False]) == 0.5
    assert pairwise_separation([0.1, 0.9], [True, False]) == 0.0
    with pytest.raises(ContractError):
        pairwise_separation([0.5, 0.5], [True, True])


def test_trace_at_initialization():
    streams = generate(6, 3, 16, 0.5, 8, stream="eval")
    trace = export_importance_trace(desk_state(), streams, ROUTER)
    assert len(trace.records) == 3 * 16
    assert all(record.w == 0.5 for record in trace.records)
    assert len(trace.spans) == 3 * 2
    for span in trace.spans:
        members = [
            r for r in trace.records if r.sequence == span.sequence and span.start <= r.position < span.end
        ]
        assert span.sum_w == pytest.approx(sum(r.w for r in members), abs=1e-12)
        assert span.mean_w == pytest.approx(0.5, abs=1e-15)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


def test_standard_variants_cover_each_switch():
    names = [variant.name for variant in standard_variants(ROUTER)]
    assert names[0] == "full"
    assert {"no-hidden-modulation", "no-importance-routing", "estimator-wide", "estimator-deep"} <= set(names)
    assert any(name.startswith("alpha-") for name in names)


def test_ablation_trains_each_variant():
    variants = standard_variants(ROUTER)[:3]
    data = desk_data()
    rows = ablation(variants, data, data, seed=0, vocab=8, d=8, steps=2, lr=0.01)
    assert [row.variant for row in rows] == ["full", "no-hidden-modulation", "no-importance-routing"]
    assert all(row.eval_loss > 0 for row in rows)
