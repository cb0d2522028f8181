"""Desk-scale harness: a single-block model, adaptive-moment training, budget sweeps and importance traces.

The model is embedding → (x + AnyExperts layer(x)) → linear head, trained full-batch
on synthetic streams. Everything is seeded; identical inputs give identical results.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from .baselines import BaselineConfig
from .config import RunConfig
from .errors import ConfigError, ContractError, NumericError, TrainingDivergedError
from .exports import AblationRow, LossPoint, SpanAggregate, SweepRow, TraceRecord
from .importance import EstimatorVariant, HiddenBatch, Modality, tir_loss
from .moe_layer import (
    DEFAULT_LAMBDA_BAL,
    DEFAULT_LAMBDA_TIR,
    LayerOutput,
    LossBundle,
    MoELayer,
    balance_loss,
    forward,
    lm_loss,
    total_loss,
)
from .numerics import (
    FloatArray,
    GradientReport,
    Matrix,
    Rng,
    Tape,
    add,
    backward,
    bind,
    check_gradients,
    matmul,
    no_grad,
    sigmoid,
    softmax_rows,
    square,
    sum_all,
    take_rows,
)
from .routing import BoolArray, RouterConfig
from .synthetic import SyntheticStream, TokenBatch, generate, stack

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

Router = Union[RouterConfig, BaselineConfig]


@dataclass(frozen=True)
class ModelOutput:
    logits: Matrix
    layer: LayerOutput


@dataclass(frozen=True)
class DeskModel:
    """Shape descriptor of the single-block model; parameters live in ``TrainState.params``."""

    vocab: int
    layer: MoELayer

    @classmethod
    def build(
        cls,
        vocab: int,
        d: int,
        e_real: int,
        e_virtual: int,
        d_ff: Optional[int] = None,
        estimator_variant: Optional[EstimatorVariant] = EstimatorVariant.DEFAULT,
    ) -> "DeskModel":
        return cls(vocab=vocab, layer=MoELayer.build(d, e_real, e_virtual, d_ff, estimator_variant))

    @property
    def d(self) -> int:
        return self.layer.d

    def parameter_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            "embedding": (self.vocab, self.d),
            **self.layer.parameter_shapes(),
            "head.weight": (self.d, self.vocab),
            "head.bias": (1, self.vocab),
        }

    def init_parameters(self, rng: Rng) -> dict[str, FloatArray]:
        bound = 1.0 / math.sqrt(self.d)
        params = {"embedding": rng.split("embedding").normal(1.0, (self.vocab, self.d))}
        params.update(self.layer.init_parameters(rng.split("layer")))
        params["head.weight"] = rng.split("head").uniform(-bound, bound, (self.d, self.vocab))
        params["head.bias"] = np.zeros((1, self.vocab))
        return params

    def forward(
        self,
        params: Mapping[str, Matrix],
        batch: TokenBatch,
        router: Router,
        *,
        forced_mask: Optional[BoolArray] = None,
    ) -> ModelOutput:
        x = take_rows(params["embedding"], batch.tokens)
        layer_out = forward(self.layer, params, HiddenBatch(x, batch.modalities), router, forced_mask=forced_mask)
        y = add(x, layer_out.output.hidden)
        logits = add(matmul(y, params["head.weight"]), params["head.bias"])
        return ModelOutput(logits, layer_out)

    def objective(
        self,
        params: Mapping[str, Matrix],
        batch: TokenBatch,
        router: Router,
        lambda_tir: float = DEFAULT_LAMBDA_TIR,
        lambda_bal: float = DEFAULT_LAMBDA_BAL,
        components: Optional[dict[str, float]] = None,
    ) -> tuple[LossBundle, ModelOutput]:
        """Full training objective; ``components`` collects each loss as soon as it is known."""
        components = {} if components is None else components
        out = self.forward(params, batch, router)
        lm = lm_loss(out.logits, batch.targets)
        components["lm"] = lm.item()
        if out.layer.importance is not None:
            tir = tir_loss(out.layer.importance.w)
        else:
            tir = Matrix(0.0)
        components["tir"] = tir.item()
        balance = balance_loss(out.layer.stats)
        components["balance"] = balance.item()
        bundle = total_loss(lm, tir, balance, lambda_tir, lambda_bal)
        components["total"] = bundle.total.item()
        return bundle, out


@dataclass(frozen=True)
class AdamState:
    m: dict[str, FloatArray]
    v: dict[str, FloatArray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, FloatArray]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )

    def update(
        self, params: Mapping[str, FloatArray], grads: Mapping[str, FloatArray], lr: float
    ) -> tuple[dict[str, FloatArray], "AdamState"]:
        t = self.t + 1
        m, v, updated = {}, {}, {}
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(params[name])
            m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * g
            v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * g * g
            m_hat = m[name] / (1.0 - ADAM_BETA1**t)
            v_hat = v[name] / (1.0 - ADAM_BETA2**t)
            updated[name] = params[name] - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        return updated, AdamState(m=m, v=v, t=t)


@dataclass(frozen=True)
class TrainState:
    model: DeskModel
    params: dict[str, FloatArray]
    optimizer: AdamState
    step: int
    rng: Rng

    @classmethod
    def initial(cls, model: DeskModel, seed: int) -> "TrainState":
        rng = Rng(seed)
        params = model.init_parameters(rng.split("init"))
        return cls(model=model, params=params, optimizer=AdamState.zeros_like(params), step=0, rng=rng.split("train"))


class EvalResult(BaseModel):
    """Evaluation-only metrics for one router setting."""

    loss: float
    accuracy: float
    avg_k_hat: float
    avg_k_real: float
    virtual_share: float
    avg_k_real_by_group: dict[str, float] = {}
    mean_w_informative: Optional[float] = None
    mean_w_redundant: Optional[float] = None
    separation: Optional[float] = None
    load_stats: dict = {}


def pairwise_separation(w: Sequence[float], informative: Sequence[bool]) -> float:
    """Fraction of (informative, redundant) pairs where the informative token has the larger w (ties count half)."""
    w = np.asarray(w, dtype=np.float64)
    flags = np.asarray(informative, dtype=bool)
    hi, lo = w[flags], w[~flags]
    if hi.size == 0 or lo.size == 0:
        raise ContractError("separation needs both informative and redundant tokens")
    diff = hi[:, None] - lo[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def _group_means(values: FloatArray, batch: TokenBatch) -> dict[str, float]:
    textlike = np.array([m is Modality.TEXTLIKE for m in batch.modalities], dtype=bool)
    groups = {
        "textlike": textlike,
        "imagelike": ~textlike,
        "informative": batch.informative,
        "redundant": ~batch.informative,
    }
    return {name: float(values[mask].mean()) for name, mask in groups.items() if mask.any()}


def evaluate(state: TrainState, data: TokenBatch, router: Router) -> EvalResult:
    """Forward pass without recording; no parameter changes."""
    with no_grad():
        out = state.model.forward(bind(state.params), data, router)
        loss = lm_loss(out.logits, data.targets).item()
    decisions = out.layer.decisions
    accuracy = float((out.logits.data.argmax(axis=1) == data.targets).mean())
    stats = out.layer.stats
    result = {
        "loss": loss,
        "accuracy": accuracy,
        "avg_k_hat": stats.avg_k_hat,
        "avg_k_real": stats.avg_k_real,
        "virtual_share": stats.virtual_share,
        "avg_k_real_by_group": _group_means(decisions.k_real.astype(np.float64), data),
        "load_stats": stats.to_dict(),
    }
    if out.layer.importance is not None:
        w = out.layer.importance.weights
        if data.informative.any():
            result["mean_w_informative"] = float(w[data.informative].mean())
        if (~data.informative).any():
            result["mean_w_redundant"] = float(w[~data.informative].mean())
            if data.informative.any():
                result["separation"] = pairwise_separation(w, data.informative)
    return EvalResult(**result)


def train(
    state: TrainState,
    data: TokenBatch,
    cfg: Router,
    steps: int,
    lr: float,
    *,
    lambda_tir: float = DEFAULT_LAMBDA_TIR,
    lambda_bal: float = DEFAULT_LAMBDA_BAL,
    eval_data: Optional[TokenBatch] = None,
    eval_every: int = 0,
    on_eval: Optional[Callable[[int, EvalResult], None]] = None,
) -> tuple[TrainState, list[LossPoint]]:
    """Full-batch adaptive-moment training; returns the new state and one loss point per step.

    Loss point ``step`` is the global step index before that step's update.
    """
    if steps < 1:
        raise ContractError(f"steps must be at least 1, got {steps}")
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")

    params = {name: value.copy() for name, value in state.params.items()}
    optimizer = state.optimizer
    curve: list[LossPoint] = []
    for i in range(steps):
        step = state.step + i
        components: dict[str, float] = {}
        try:
            tape = Tape()
            with tape:
                bundle, out = state.model.objective(
                    bind(params), data, cfg, lambda_tir, lambda_bal, components
                )
            grads = backward(tape, bundle.total)
        except NumericError as exc:
            raise TrainingDivergedError(step, components, exc.message) from exc

        stats = out.layer.stats
        point = LossPoint(
            step=step,
            **bundle.values(),
            avg_k_hat=stats.avg_k_hat,
            avg_k_real=stats.avg_k_real,
            virtual_share=stats.virtual_share,
        )
        curve.append(point)
        logger.debug("step %d: total=%.6f lm=%.6f", step, point.total, point.lm)
        params, optimizer = optimizer.update(params, grads, lr)

        done = step + 1
        if eval_every and done % eval_every == 0:
            interim = TrainState(state.model, params, optimizer, done, state.rng)
            result = evaluate(interim, eval_data if eval_data is not None else data, cfg)
            logger.info(
                "step %d: loss=%.4f acc=%.3f avg_k_hat=%.3f avg_k_real=%.3f virtual_share=%.3f",
                done,
                result.loss,
                result.accuracy,
                result.avg_k_hat,
                result.avg_k_real,
                result.virtual_share,
            )
            if on_eval is not None:
                on_eval(done, result)

    return TrainState(state.model, params, optimizer, state.step + steps, state.rng), curve


# ---------------------------------------------------------------------------
# Budget sweep
# ---------------------------------------------------------------------------


class SweepReport(BaseModel):
    rows: list[SweepRow]

    @property
    def anyexperts_rows(self) -> list[SweepRow]:
        return [row for row in self.rows if row.kind == "anyexperts"]

    @property
    def baseline_rows(self) -> list[SweepRow]:
        return [row for row in self.rows if row.kind != "anyexperts"]

    def matched_pairs(self) -> list[tuple[SweepRow, SweepRow]]:
        """(baseline, AnyExperts) pairs, matching each baseline to the budget point closest in avg k_real."""
        dynamic = self.anyexperts_rows
        if not dynamic:
            return []
        pairs = []
        for baseline in self.baseline_rows:
            closest = min(dynamic, key=lambda row: abs(row.avg_k_real - baseline.avg_k_real))
            pairs.append((baseline, closest))
        return pairs


@dataclass(frozen=True)
class BaselineTraining:
    """How to train the static Top-K comparison models."""

    train_data: TokenBatch
    ks: tuple[int, ...]
    steps: int
    lr: float
    seed: int
    lambda_bal: float = DEFAULT_LAMBDA_BAL
    lambda_: float = 1.0
    eps: float = 1e-8


def normalize_scales(scales: Iterable[float]) -> list[float]:
    """Clamp scales above 1, reject non-positive ones, drop duplicates, order descending."""
    normalized: list[float] = []
    for scale in scales:
        scale = float(scale)
        if scale <= 0.0:
            raise ConfigError(f"budget scale must be positive, got {scale:g}", key="scales")
        if scale > 1.0:
            logger.warning("budget scale %g clamped to 1.0", scale)
            scale = 1.0
        if scale not in normalized:
            normalized.append(scale)
    if not normalized:
        raise ConfigError("no budget scales given", key="scales")
    return sorted(normalized, reverse=True)


def _row(kind: str, result: EvalResult, budget_scale: Optional[float] = None, k: Optional[int] = None) -> SweepRow:
    return SweepRow(
        kind=kind,
        budget_scale=budget_scale,
        k=k,
        avg_k_hat=result.avg_k_hat,
        avg_k_real=result.avg_k_real,
        virtual_share=result.virtual_share,
        eval_loss=result.loss,
        eval_accuracy=result.accuracy,
    )


def train_topk_baseline(
    like: DeskModel, k: int, training: BaselineTraining
) -> tuple[TrainState, BaselineConfig]:
    """Train a real-experts-only model with static Top-K routing on the same data and schedule."""
    model = DeskModel.build(
        like.vocab, like.d, like.layer.e_real, 0, like.layer.d_ff, estimator_variant=None
    )
    router = BaselineConfig.topk(k, lambda_=training.lambda_, eps=training.eps)
    state = TrainState.initial(model, training.seed)
    state, _ = train(
        state, training.train_data, router, training.steps, training.lr, lambda_bal=training.lambda_bal
    )
    return state, router


def budget_sweep(
    state: TrainState,
    data: TokenBatch,
    scales: Iterable[float],
    cfg: RouterConfig,
    *,
    baselines: Optional[BaselineTraining] = None,
) -> SweepReport:
    """Evaluate the trained model at every budget scale, then the separately trained Top-K baselines."""
    rows = []
    for scale in normalize_scales(scales):
        result = evaluate(state, data, cfg.with_budget(scale))
        rows.append(_row("anyexperts", result, budget_scale=scale))
        logger.info("budget %.3g: avg_k_real=%.3f loss=%.4f", scale, result.avg_k_real, result.loss)
    if baselines is not None:
        for k in baselines.ks:
            if k > state.model.layer.e_real:
                logger.warning("skipping Top-K baseline k=%d: only %d real experts", k, state.model.layer.e_real)
                continue
            baseline_state, router = train_topk_baseline(state.model, k, baselines)
            result = evaluate(baseline_state, data, router)
            rows.append(_row("topk", result, k=k))
            logger.info("topk k=%d: loss=%.4f", k, result.loss)
    return SweepReport(rows=rows)


# ---------------------------------------------------------------------------
# Importance traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceTrace:
    records: list[TraceRecord]
    spans: list[SpanAggregate]


def export_importance_trace(state: TrainState, streams: Sequence[SyntheticStream], cfg: RouterConfig) -> ImportanceTrace:
    """Per-token importance and slot counts, plus aggregates per contiguous imagelike span."""
    if isinstance(cfg, BaselineConfig):
        raise ContractError("importance traces need the dynamic router")
    batch = stack(streams)
    with no_grad():
        out = state.model.forward(bind(state.params), batch, cfg)
    w = out.layer.importance.weights
    k_hat = out.layer.decisions.k_hat
    k_real = out.layer.decisions.k_real
    records = [
        TraceRecord(
            sequence=int(batch.sequence[i]),
            position=int(batch.position[i]),
            modality=batch.modalities[i],
            informative=bool(batch.informative[i]),
            w=float(w[i]),
            k_hat=int(k_hat[i]),
            k_real=int(k_real[i]),
        )
        for i in range(batch.n_tokens)
    ]

    spans = []
    offset = 0
    for sequence, stream in enumerate(streams):
        for span_index, (start, end) in enumerate(stream.spans()):
            members = records[offset + start : offset + end]
            sum_w = sum(r.w for r in members)
            spans.append(
                SpanAggregate(
                    sequence=sequence,
                    span_index=span_index,
                    start=start,
                    end=end,
                    sum_w=sum_w,
                    mean_w=sum_w / len(members),
                    mean_k_real=sum(r.k_real for r in members) / len(members),
                )
            )
        offset += stream.seq_len
    return ImportanceTrace(records=records, spans=spans)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationVariant:
    name: str
    router: RouterConfig
    estimator: EstimatorVariant = EstimatorVariant.DEFAULT


def standard_variants(base: RouterConfig) -> list[AblationVariant]:
    """Full model, each mechanism switched off, alpha and rho_max sweeps, estimator sizes."""

    def tweak(**changes: object) -> RouterConfig:
        return RouterConfig.model_validate({**base.model_dump(by_alias=True), **changes})

    variants = [
        AblationVariant("full", base),
        AblationVariant("no-hidden-modulation", tweak(hidden_modulation=False)),
        AblationVariant("no-importance-routing", tweak(importance_routing=False)),
    ]
    for alpha in (0.005, 0.05, 0.1):
        variants.append(AblationVariant(f"alpha-{alpha:g}", tweak(alpha=alpha)))
    for rho in (0.1, 0.25):
        if base.k_max * (1.0 - rho) <= base.e_real:
            variants.append(AblationVariant(f"rho-{rho:g}", tweak(rho_max=rho)))
    variants.append(AblationVariant("estimator-wide", base, EstimatorVariant.WIDE))
    variants.append(AblationVariant("estimator-deep", base, EstimatorVariant.DEEP))
    return variants


def ablation(
    variants: Sequence[AblationVariant],
    train_data: TokenBatch,
    eval_data: TokenBatch,
    *,
    seed: int,
    vocab: int,
    d: int,
    d_ff: Optional[int] = None,
    steps: int,
    lr: float,
    lambda_tir: float = DEFAULT_LAMBDA_TIR,
    lambda_bal: float = DEFAULT_LAMBDA_BAL,
) -> list[AblationRow]:
    """Train one model per variant from the same seed and data; report eval metrics per variant."""
    rows = []
    for variant in variants:
        model = DeskModel.build(
            vocab, d, variant.router.e_real, variant.router.e_virtual, d_ff, variant.estimator
        )
        state, _ = train(
            TrainState.initial(model, seed),
            train_data,
            variant.router,
            steps,
            lr,
            lambda_tir=lambda_tir,
            lambda_bal=lambda_bal,
        )
        result = evaluate(state, eval_data, variant.router)
        rows.append(
            AblationRow(
                variant=variant.name,
                eval_loss=result.loss,
                eval_accuracy=result.accuracy,
                avg_k_real=result.avg_k_real,
                virtual_share=result.virtual_share,
                mean_w_informative=result.mean_w_informative,
                mean_w_redundant=result.mean_w_redundant,
            )
        )
        logger.info("ablation %s: loss=%.4f avg_k_real=%.3f", variant.name, result.loss, result.avg_k_real)
    return rows


# ---------------------------------------------------------------------------
# Run-config wiring
# ---------------------------------------------------------------------------


def model_from_config(cfg: RunConfig) -> DeskModel:
    router = cfg.training_router()
    if isinstance(router, BaselineConfig):
        return DeskModel.build(cfg.vocab, cfg.d, cfg.e_real, 0, cfg.ffn_width, estimator_variant=None)
    return DeskModel.build(cfg.vocab, cfg.d, cfg.e_real, cfg.e_virtual, cfg.ffn_width, cfg.estimator)


def data_from_config(cfg: RunConfig, stream: str = "train", seed: Optional[int] = None) -> TokenBatch:
    n = cfg.n_sequences if stream == "train" else cfg.eval_sequences
    return stack(generate(cfg.seed if seed is None else seed, n, cfg.seq_len, cfg.redundancy, cfg.vocab, stream=stream))


def baseline_training(cfg: RunConfig) -> BaselineTraining:
    return BaselineTraining(
        train_data=data_from_config(cfg, "train"),
        ks=cfg.baseline_ks,
        steps=cfg.steps,
        lr=cfg.lr,
        seed=cfg.seed,
        lambda_bal=cfg.lambda_bal,
        lambda_=cfg.lambda_,
        eps=cfg.eps,
    )


# ---------------------------------------------------------------------------
# Gradient suites
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientSuite:
    name: str
    objective: Callable[[dict[str, Matrix]], Matrix]
    params: dict[str, FloatArray] = field(default_factory=dict)


def desk_router() -> RouterConfig:
    """Small router for gradient checks: 4 real + 2 virtual experts, slot counts away from rounding edges."""
    return RouterConfig(k_min=2, k_max=4, e_real=4, e_virtual=2, rho_max=0.34, alpha=0.01)


def _perturbed(params: Mapping[str, FloatArray], rng: Rng, std: float = 0.3) -> dict[str, FloatArray]:
    """Move every parameter off its structured init so no gradient is trivially zero."""
    return {name: value + rng.split(name).normal(std, value.shape) for name, value in sorted(params.items())}


def gradient_suites(seed: int = 0, d: int = 8, vocab: int = 8, seq_len: int = 8) -> list[GradientSuite]:
    rng = Rng(seed).split("gradcheck")
    router = desk_router()
    model = DeskModel.build(vocab, d, router.e_real, router.e_virtual)
    params = _perturbed(model.init_parameters(rng.split("init")), rng.split("noise"))
    data = stack(generate(seed, 1, seq_len, 0.5, vocab, stream="gradcheck"))
    layer_params = {name: value for name, value in params.items() if not name.startswith(("embedding", "head"))}
    hidden = rng.split("hidden").normal(1.0, (seq_len, d))

    def composite(p: dict[str, Matrix]) -> Matrix:
        return sum_all(square(softmax_rows(matmul(p["a"], p["b"]))))

    def importance_regularizer(p: dict[str, Matrix]) -> Matrix:
        return tir_loss(sigmoid(matmul(p["x"], p["v"])))

    def layer_objective(p: dict[str, Matrix]) -> Matrix:
        out = forward(model.layer, p, HiddenBatch(Matrix(hidden), data.modalities), router)
        return add(sum_all(square(out.output.hidden)), balance_loss(out.stats))

    def model_objective(p: dict[str, Matrix]) -> Matrix:
        bundle, _ = model.objective(p, data, router)
        return bundle.total

    return [
        GradientSuite(
            "numerics",
            composite,
            {"a": rng.split("a").normal(1.0, (3, 4)), "b": rng.split("b").normal(1.0, (4, 5))},
        ),
        GradientSuite(
            "importance",
            importance_regularizer,
            {"x": rng.split("x").normal(1.0, (6, 4)), "v": rng.split("v").normal(1.0, (4, 1))},
        ),
        GradientSuite("layer", layer_objective, layer_params),
        GradientSuite("model", model_objective, params),
    ]


def run_gradient_suites(
    seed: int = 0, step: float = 1e-5, tol: float = 1e-4, max_coordinates: Optional[int] = None
) -> list[tuple[str, GradientReport]]:
    reports = []
    for suite in gradient_suites(seed):
        report = check_gradients(suite.objective, suite.params, step=step, tol=tol, max_coordinates=max_coordinates)
        reports.append((suite.name, report))
        logger.info(
            "%s: max relative error %.3e over %d coordinates (%s)",
            suite.name,
            report.max_relative_error,
            report.coordinates_checked,
            "ok" if report.passed else "FAILED",
        )
    return reports
