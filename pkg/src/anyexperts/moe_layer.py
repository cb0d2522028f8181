"""The AnyExperts layer: real FFN experts, identity virtual experts, γ-weighted combine, calibrated balance loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from .baselines import BaselineConfig, route_baseline
from .errors import ContractError, DimensionError
from .importance import EstimatorVariant, HiddenBatch, ImportanceEstimator, ImportanceResult, estimate
from .numerics import (
    FloatArray,
    Matrix,
    Operand,
    Rng,
    add,
    as_matrix,
    cross_entropy,
    matmul,
    mean_cols,
    mul,
    relu,
    scale,
    scatter_rows,
    sum_all,
    sum_rows,
    take_cols,
    take_rows,
)
from .routing import BoolArray, GatingNetwork, IntArray, RouterConfig, RoutingBatch, route

DEFAULT_LAMBDA_TIR = 0.001
DEFAULT_LAMBDA_BAL = 0.01


class ExpertKind(str, Enum):
    REAL = "real"
    VIRTUAL = "virtual"


@dataclass(frozen=True)
class Expert:
    """A real two-layer ReLU FFN, or a parameter-free virtual expert that returns its input."""

    index: int
    kind: ExpertKind
    d: int
    d_ff: int = 0
    prefix: str = "experts"

    @property
    def name(self) -> str:
        return f"{self.prefix}.{self.index}"

    def parameter_shapes(self) -> dict[str, tuple[int, int]]:
        if self.kind is ExpertKind.VIRTUAL:
            return {}
        return {
            f"{self.name}.w1": (self.d, self.d_ff),
            f"{self.name}.b1": (1, self.d_ff),
            f"{self.name}.w2": (self.d_ff, self.d),
            f"{self.name}.b2": (1, self.d),
        }

    def init_parameters(self, rng: Rng) -> dict[str, FloatArray]:
        if self.kind is ExpertKind.VIRTUAL:
            return {}
        stream = rng.split(self.name)
        b1, b2 = 1.0 / math.sqrt(self.d), 1.0 / math.sqrt(self.d_ff)
        return {
            f"{self.name}.w1": stream.uniform(-b1, b1, (self.d, self.d_ff)),
            f"{self.name}.b1": np.zeros((1, self.d_ff)),
            f"{self.name}.w2": stream.uniform(-b2, b2, (self.d_ff, self.d)),
            f"{self.name}.b2": np.zeros((1, self.d)),
        }

    def forward(self, params: Mapping[str, Matrix], x: Matrix) -> Matrix:
        if self.kind is ExpertKind.VIRTUAL:
            return x
        hidden = relu(add(matmul(x, params[f"{self.name}.w1"]), params[f"{self.name}.b1"]))
        return add(matmul(hidden, params[f"{self.name}.w2"]), params[f"{self.name}.b2"])


@dataclass(frozen=True)
class MoELayer:
    """Shape descriptor of one layer; ``estimator_variant=None`` builds a layer without an estimator (static baselines)."""

    d: int
    d_ff: int
    e_real: int
    e_virtual: int
    estimator_variant: Optional[EstimatorVariant] = EstimatorVariant.DEFAULT

    @classmethod
    def build(
        cls,
        d: int,
        e_real: int,
        e_virtual: int,
        d_ff: Optional[int] = None,
        estimator_variant: Optional[EstimatorVariant] = EstimatorVariant.DEFAULT,
    ) -> "MoELayer":
        return cls(d=d, d_ff=d_ff or 2 * d, e_real=e_real, e_virtual=e_virtual, estimator_variant=estimator_variant)

    @property
    def estimator(self) -> Optional[ImportanceEstimator]:
        if self.estimator_variant is None:
            return None
        return ImportanceEstimator(d=self.d, variant=self.estimator_variant)

    @property
    def gate(self) -> GatingNetwork:
        return GatingNetwork(d=self.d, e_real=self.e_real, e_virtual=self.e_virtual)

    @property
    def experts(self) -> list[Expert]:
        real = [Expert(i, ExpertKind.REAL, self.d, self.d_ff) for i in range(self.e_real)]
        virtual = [Expert(self.e_real + j, ExpertKind.VIRTUAL, self.d) for j in range(self.e_virtual)]
        return real + virtual

    def parameter_shapes(self) -> dict[str, tuple[int, int]]:
        shapes: dict[str, tuple[int, int]] = {}
        if self.estimator is not None:
            shapes.update(self.estimator.parameter_shapes())
        shapes.update(self.gate.parameter_shapes())
        for expert in self.experts:
            shapes.update(expert.parameter_shapes())
        return shapes

    def init_parameters(self, rng: Rng) -> dict[str, FloatArray]:
        params: dict[str, FloatArray] = {}
        if self.estimator is not None:
            params.update(self.estimator.init_parameters(rng))
        params.update(self.gate.init_parameters(rng))
        for expert in self.experts:
            params.update(expert.init_parameters(rng))
        return params


@dataclass(frozen=True)
class LoadStats:
    """Unified load accounting: exact real counts, virtual load spread evenly over the virtual copies."""

    c: IntArray
    t_virtual: int
    f: FloatArray
    p: Matrix
    n_tokens: int
    k_hat_total: int

    @classmethod
    def from_counts(cls, c: Sequence[int], t_virtual: int, e_virtual: int, p: Any, n_tokens: int) -> "LoadStats":
        counts = np.asarray(c, dtype=np.int64).reshape(-1)
        if n_tokens <= 0:
            raise ContractError("load statistics need at least one token")
        f = np.concatenate(
            [
                counts / n_tokens,
                np.full(e_virtual, t_virtual / (e_virtual * n_tokens) if e_virtual else 0.0),
            ]
        )
        p = as_matrix(p)
        if p.shape != (1, f.shape[0]):
            raise DimensionError("mean probabilities must be a 1×E row", [p.shape, (1, f.shape[0])])
        return cls(c=counts, t_virtual=int(t_virtual), f=f, p=p, n_tokens=n_tokens, k_hat_total=int(counts.sum()) + int(t_virtual))

    @classmethod
    def from_decisions(cls, decisions: RoutingBatch) -> "LoadStats":
        if decisions.n_tokens == 0:
            raise ContractError("load statistics need at least one token")
        c = decisions.mask[:, : decisions.e_real].sum(axis=0)
        t_virtual = int(decisions.mask[:, decisions.e_real :].sum())
        return cls.from_counts(c, t_virtual, decisions.e_virtual, mean_cols(decisions.probs), decisions.n_tokens)

    @property
    def e_real(self) -> int:
        return int(self.c.shape[0])

    @property
    def e_virtual(self) -> int:
        return int(self.f.shape[0]) - self.e_real

    @property
    def avg_k_hat(self) -> float:
        return self.k_hat_total / self.n_tokens

    @property
    def avg_k_real(self) -> float:
        return float(self.c.sum()) / self.n_tokens

    @property
    def virtual_share(self) -> float:
        return self.t_virtual / self.k_hat_total if self.k_hat_total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "c": [int(v) for v in self.c],
            "t_virtual": self.t_virtual,
            "f": [float(v) for v in self.f],
            "p": self.p.flat(),
            "n_tokens": self.n_tokens,
            "avg_k_hat": self.avg_k_hat,
            "avg_k_real": self.avg_k_real,
            "virtual_share": self.virtual_share,
        }


@dataclass(frozen=True)
class LossBundle:
    lm: Matrix
    tir: Matrix
    balance: Matrix
    total: Matrix
    lambda_tir: float = DEFAULT_LAMBDA_TIR
    lambda_bal: float = DEFAULT_LAMBDA_BAL

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "lm": self.lm.item(),
            "tir": self.tir.item(),
            "balance": self.balance.item(),
        }


@dataclass(frozen=True)
class LayerOutput:
    output: HiddenBatch
    importance: Optional[ImportanceResult]
    decisions: RoutingBatch
    stats: LoadStats


def combine_experts(layer: MoELayer, params: Mapping[str, Matrix], h_fused: Matrix, decisions: RoutingBatch) -> Matrix:
    """Σ_selected γ_e·expert_e(h′) per token, accumulated in ascending expert id.

    Real experts run only on the tokens routed to them; all virtual copies return h′,
    so their γ mass is summed and applied once.
    """
    n = h_fused.rows
    out: Optional[Matrix] = None
    for expert in layer.experts[: decisions.e_real]:
        rows = np.flatnonzero(decisions.mask[:, expert.index])
        if rows.size == 0:
            continue
        y = expert.forward(params, take_rows(h_fused, rows))
        g = take_rows(take_cols(decisions.gamma, [expert.index]), rows)
        contribution = scatter_rows(mul(y, g), rows, n)
        out = contribution if out is None else add(out, contribution)
    if decisions.e_virtual:
        virtual_cols = range(decisions.e_real, decisions.e_real + decisions.e_virtual)
        contribution = mul(h_fused, sum_rows(take_cols(decisions.gamma, virtual_cols)))
        out = contribution if out is None else add(out, contribution)
    return out if out is not None else Matrix.zeros(n, h_fused.cols)


def forward(
    layer: MoELayer,
    params: Mapping[str, Matrix],
    h: HiddenBatch,
    cfg: Union[RouterConfig, BaselineConfig],
    *,
    forced_mask: Optional[BoolArray] = None,
) -> LayerOutput:
    """Importance → routing → experts → combine, with load statistics for the batch.

    A ``BaselineConfig`` skips importance estimation and routes statically over the real experts.
    """
    if h.d != layer.d:
        raise DimensionError("hidden width does not match the layer", [h.hidden.shape, (1, layer.d)])
    if isinstance(cfg, BaselineConfig):
        importance = None
        h_fused = h.hidden
        decisions = route_baseline(h_fused, layer.gate, params, cfg)
    else:
        if layer.estimator is None:
            raise ContractError("dynamic routing needs a layer with an importance estimator")
        importance = estimate(layer.estimator, params, h, cfg.alpha, hidden_modulation=cfg.hidden_modulation)
        h_fused = importance.h_fused
        decisions = route(h_fused, importance.w, layer.gate, params, cfg, forced_mask=forced_mask)
    output = combine_experts(layer, params, h_fused, decisions)
    return LayerOutput(h.with_hidden(output), importance, decisions, LoadStats.from_decisions(decisions))


def balance_loss(stats: LoadStats) -> Matrix:
    """Σ_k f_k·p_k over all real and virtual slots."""
    if stats.n_tokens == 0:
        raise ContractError("balance loss over an empty batch")
    return sum_all(mul(stats.p, Matrix(stats.f)))


def lm_loss(logits: Matrix, targets: Sequence[int]) -> Matrix:
    """Mean next-token cross-entropy."""
    return cross_entropy(logits, targets)


def total_loss(
    lm: Operand,
    tir: Operand,
    balance: Operand,
    lambda_tir: float = DEFAULT_LAMBDA_TIR,
    lambda_bal: float = DEFAULT_LAMBDA_BAL,
) -> LossBundle:
    lm, tir, balance = as_matrix(lm), as_matrix(tir), as_matrix(balance)
    for name, value in (("lm", lm), ("tir", tir), ("balance", balance)):
        if value.shape != (1, 1):
            raise ContractError(f"{name} loss must be a scalar, got shape {value.shape}")
    if tir.item() < 0 or balance.item() < 0:
        raise ContractError("auxiliary losses must be non-negative")
    total = add(add(lm, scale(tir, lambda_tir)), scale(balance, lambda_bal))
    return LossBundle(lm=lm, tir=tir, balance=balance, total=total, lambda_tir=lambda_tir, lambda_bal=lambda_bal)
