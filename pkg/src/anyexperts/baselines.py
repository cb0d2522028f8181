"""Static comparison routers over real experts only: fixed Top-K and cumulative-probability Top-P."""

from __future__ import annotations

from enum import Enum
from typing import Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError
from .numerics import FloatArray, Matrix, softmax_rows, take_cols
from .routing import GatingNetwork, RoutingBatch, gamma_weights, select_experts

# Absorbs float error in the cumulative mass (0.6 + 0.3 < 0.9).
_MASS_SLACK = 1e-12


class BaselineKind(str, Enum):
    TOPK = "topk"
    TOPP = "topp"


class BaselineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    kind: BaselineKind
    k: Optional[int] = Field(None, ge=1)
    threshold: Optional[float] = Field(None, gt=0.0, le=1.0)
    lambda_: float = Field(1.0, gt=0.0, alias="lambda")
    eps: float = Field(1e-8, gt=0.0)

    @model_validator(mode="after")
    def _check_kind(self) -> "BaselineConfig":
        if self.kind is BaselineKind.TOPK and self.k is None:
            raise ValueError("a Top-K baseline needs k")
        if self.kind is BaselineKind.TOPP and self.threshold is None:
            raise ValueError("a Top-P baseline needs a threshold")
        return self

    @classmethod
    def topk(cls, k: int, **kwargs: float) -> "BaselineConfig":
        return cls(kind=BaselineKind.TOPK, k=k, **kwargs)

    @classmethod
    def topp(cls, threshold: float, **kwargs: float) -> "BaselineConfig":
        return cls(kind=BaselineKind.TOPP, threshold=threshold, **kwargs)

    @property
    def label(self) -> str:
        if self.kind is BaselineKind.TOPK:
            return f"topk-{self.k}"
        return f"topp-{self.threshold:g}"


def _real_logits(h: Matrix, gate: GatingNetwork, params: Mapping[str, Matrix]) -> Matrix:
    r = gate.logits(params, h)
    if gate.e_virtual:
        r = take_cols(r, range(gate.e_real))
    return r


def _batch(r: Matrix, mask: np.ndarray, selected: tuple[tuple[int, ...], ...], cfg: BaselineConfig) -> RoutingBatch:
    return RoutingBatch(
        e_real=r.cols,
        e_virtual=0,
        k_hat=mask.sum(axis=1).astype(np.int64),
        selected=selected,
        mask=mask,
        modulated_logits=r,
        probs=softmax_rows(r),
        gamma=gamma_weights(r, mask, cfg.lambda_, cfg.eps),
    )


def route_topk(h: Matrix, gate: GatingNetwork, params: Mapping[str, Matrix], cfg: BaselineConfig) -> RoutingBatch:
    """Exactly k real experts per token, ranked by raw logit (ties to the lower id)."""
    if cfg.k is None:
        raise ConfigError("Top-K routing needs k", key="k")
    if cfg.k > gate.e_real:
        raise ConfigError(f"k={cfg.k} exceeds the {gate.e_real} real experts", key="k")
    r = _real_logits(h, gate, params)
    k_hat = np.full(r.rows, cfg.k, dtype=np.int64)
    mask, selected = select_experts(r.data, k_hat, r.cols, 0.0)
    return _batch(r, mask, selected, cfg)


def topp_select(probs: FloatArray, threshold: float) -> tuple[int, ...]:
    """Smallest probability-ranked prefix whose cumulative mass reaches ``threshold``.

    The crossing expert is included and at least one expert is always chosen; a
    threshold of 1 keeps every expert with non-zero probability.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"Top-P threshold must lie in (0, 1], got {threshold}", key="threshold")
    order = np.argsort(-p, kind="stable")
    if threshold >= 1.0:
        keep = [int(i) for i in order if p[i] > 0.0]
        return tuple(keep) if keep else (int(order[0]),)
    hits = np.flatnonzero(np.cumsum(p[order]) >= threshold - _MASS_SLACK)
    count = int(hits[0]) + 1 if hits.size else len(order)
    return tuple(int(i) for i in order[: max(count, 1)])


def route_topp(h: Matrix, gate: GatingNetwork, params: Mapping[str, Matrix], cfg: BaselineConfig) -> RoutingBatch:
    if cfg.threshold is None:
        raise ConfigError("Top-P routing needs a threshold", key="threshold")
    r = _real_logits(h, gate, params)
    probs = softmax_rows(r).data
    selected = tuple(topp_select(row, cfg.threshold) for row in probs)
    mask = np.zeros(r.shape, dtype=bool)
    for i, chosen in enumerate(selected):
        mask[i, list(chosen)] = True
    return _batch(r, mask, selected, cfg)


def route_baseline(h: Matrix, gate: GatingNetwork, params: Mapping[str, Matrix], cfg: BaselineConfig) -> RoutingBatch:
    if cfg.kind is BaselineKind.TOPK:
        return route_topk(h, gate, params, cfg)
    return route_topp(h, gate, params, cfg)
