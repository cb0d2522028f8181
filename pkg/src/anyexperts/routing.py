"""Importance-aware routing over real and virtual experts.

Per token: a slot count k̂ interpolated between k_min and k_max by the importance
weight w, logits modulated by φ = 1 ± α·w (real columns up, virtual columns down),
greedy top-k̂ selection with at most ⌊ρ_max·k̂⌋ virtual slots, and combination
weights γ = λ·σ(r′)/(Σσ(r′) + ε) over the selected experts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Protocol, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError, ContractError, DimensionError, InvariantViolation
from .importance import HiddenBatch
from .numerics import (
    FloatArray,
    Matrix,
    Rng,
    add,
    div,
    matmul,
    mul,
    scale,
    sigmoid,
    softmax_rows,
    sum_rows,
)

logger = logging.getLogger(__name__)

IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]

# Absorbs float error in ρ·k̂ (e.g. 0.29·100) before flooring.
_CAP_SLACK = 1e-9


class RouterConfig(BaseModel):
    """Hyperparameters of the dynamic router."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    k_min: int = Field(8, ge=1)
    k_max: int = Field(12, ge=1)
    e_real: int = Field(16, ge=1)
    e_virtual: int = Field(64, ge=0)
    rho_max: float = Field(0.2, ge=0.0, lt=1.0)
    alpha: float = Field(0.01, ge=0.0)
    lambda_: float = Field(1.0, gt=0.0, alias="lambda")
    eps: float = Field(1e-8, gt=0.0)
    budget_scale: float = Field(1.0, gt=0.0, le=1.0)
    hidden_modulation: bool = True
    importance_routing: bool = True

    @model_validator(mode="after")
    def _check_slots(self) -> "RouterConfig":
        if not self.k_min <= self.k_max <= self.e_real + self.e_virtual:
            raise ValueError(
                f"need 1 <= k_min ({self.k_min}) <= k_max ({self.k_max}) <= "
                f"e_real + e_virtual ({self.e_real + self.e_virtual})"
            )
        if self.k_max * (1.0 - self.rho_max) > self.e_real + _CAP_SLACK:
            raise ValueError(
                f"k_max·(1−rho_max) = {self.k_max * (1.0 - self.rho_max):g} exceeds e_real ({self.e_real})"
            )
        return self

    @property
    def n_experts(self) -> int:
        return self.e_real + self.e_virtual

    def with_budget(self, budget_scale: float) -> "RouterConfig":
        return RouterConfig.model_validate({**self.model_dump(by_alias=True), "budget_scale": budget_scale})


@dataclass(frozen=True)
class GatingNetwork:
    """Linear router over e_real real columns followed by e_virtual virtual columns."""

    d: int
    e_real: int
    e_virtual: int
    prefix: str = "gate"

    @property
    def n_experts(self) -> int:
        return self.e_real + self.e_virtual

    def parameter_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            f"{self.prefix}.weight": (self.d, self.n_experts),
            f"{self.prefix}.bias": (1, self.n_experts),
        }

    def init_parameters(self, rng: Rng) -> dict[str, FloatArray]:
        bound = 1.0 / math.sqrt(self.d)
        return {
            f"{self.prefix}.weight": rng.split(self.prefix).uniform(-bound, bound, (self.d, self.n_experts)),
            f"{self.prefix}.bias": np.zeros((1, self.n_experts)),
        }

    def logits(self, params: Mapping[str, Matrix], hidden: Matrix) -> Matrix:
        if hidden.cols != self.d:
            raise DimensionError("gate width does not match hidden states", [hidden.shape, (self.d, self.n_experts)])
        return add(matmul(hidden, params[f"{self.prefix}.weight"]), params[f"{self.prefix}.bias"])


@dataclass(frozen=True)
class RoutingDecision:
    """One token's routing outcome; ``selected`` is in rank order and ``gamma`` aligns with it."""

    token_index: int
    k_hat: int
    k_real: int
    k_virtual: int
    selected: tuple[int, ...]
    gamma: tuple[float, ...]
    modulated_logits: tuple[float, ...]
    probs: tuple[float, ...]


@dataclass(frozen=True)
class RoutingBatch:
    """Routing decisions for a whole batch, kept as matrices for the differentiable parts."""

    e_real: int
    e_virtual: int
    k_hat: IntArray
    selected: tuple[tuple[int, ...], ...]
    mask: BoolArray
    modulated_logits: Matrix
    probs: Matrix
    gamma: Matrix
    w: Optional[FloatArray] = None

    @property
    def n_tokens(self) -> int:
        return len(self.selected)

    @property
    def k_virtual(self) -> IntArray:
        return self.mask[:, self.e_real :].sum(axis=1).astype(np.int64)

    @property
    def k_real(self) -> IntArray:
        return self.mask[:, : self.e_real].sum(axis=1).astype(np.int64)

    @property
    def virtual_share(self) -> float:
        total = int(self.k_hat.sum())
        return float(self.k_virtual.sum()) / total if total else 0.0

    def __len__(self) -> int:
        return self.n_tokens

    def __getitem__(self, i: int) -> RoutingDecision:
        chosen = self.selected[i]
        return RoutingDecision(
            token_index=i,
            k_hat=int(self.k_hat[i]),
            k_real=sum(1 for e in chosen if e < self.e_real),
            k_virtual=sum(1 for e in chosen if e >= self.e_real),
            selected=chosen,
            gamma=tuple(float(self.gamma.data[i, e]) for e in chosen),
            modulated_logits=tuple(float(v) for v in self.modulated_logits.data[i]),
            probs=tuple(float(v) for v in self.probs.data[i]),
        )

    def __iter__(self) -> Iterator[RoutingDecision]:
        for i in range(self.n_tokens):
            yield self[i]


def virtual_cap(k_hat: Union[int, IntArray], rho_max: float) -> Union[int, IntArray]:
    """⌊rho_max·k̂⌋, the most virtual slots a token may hold."""
    if isinstance(k_hat, np.ndarray):
        return np.floor(rho_max * k_hat + _CAP_SLACK).astype(np.int64)
    return int(math.floor(rho_max * k_hat + _CAP_SLACK))


def slot_count(w: float, cfg: RouterConfig) -> int:
    """k̂ = round_half_up(budget_scale·(k_min + (k_max − k_min)·w)), clamped to [1, k_max]."""
    if not 0.0 <= w <= 1.0:
        raise ContractError(f"importance weight must lie in [0, 1], got {w}")
    k_raw = cfg.k_min + (cfg.k_max - cfg.k_min) * w
    k = math.floor(k_raw * cfg.budget_scale + 0.5)
    return min(max(k, 1), cfg.k_max)


def slot_counts(w: FloatArray, cfg: RouterConfig) -> IntArray:
    """Vectorized ``slot_count``."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if (w < 0.0).any() or (w > 1.0).any():
        raise ContractError("importance weights must lie in [0, 1]")
    k_raw = cfg.k_min + (cfg.k_max - cfg.k_min) * w
    k = np.floor(k_raw * cfg.budget_scale + 0.5).astype(np.int64)
    return np.clip(k, 1, cfg.k_max)


def modulation(w: float, alpha: float) -> tuple[float, float]:
    """(φ_real, φ_virtual) = (1 + α·w, 1 − α·w)."""
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    if alpha * w >= 1.0:
        raise ConfigError(f"alpha·w = {alpha * w:g} makes the virtual factor non-positive", key="alpha")
    return 1.0 + alpha * w, 1.0 - alpha * w


def select_experts(
    logits: FloatArray, k_hat: IntArray, e_real: int, rho_max: float
) -> tuple[BoolArray, tuple[tuple[int, ...], ...]]:
    """Greedy top-k̂ per row, skipping virtual columns once ⌊rho_max·k̂⌋ of them are taken.

    Ranking is by logit descending with ties going to the lower expert id.
    """
    n, e = logits.shape
    order = np.argsort(-logits, axis=1, kind="stable")
    is_virtual = order >= e_real
    cap = virtual_cap(k_hat, rho_max)[:, None]
    eligible = ~is_virtual | (np.cumsum(is_virtual, axis=1) <= cap)
    taken = eligible & (np.cumsum(eligible, axis=1) <= k_hat[:, None])
    short = taken.sum(axis=1) < k_hat
    if short.any():
        i = int(np.flatnonzero(short)[0])
        raise InvariantViolation(
            f"token {i}: only {int(taken[i].sum())} selectable experts for k_hat={int(k_hat[i])}"
        )
    mask = np.zeros((n, e), dtype=bool)
    np.put_along_axis(mask, order, taken, axis=1)
    selected = tuple(tuple(int(x) for x in order[i][taken[i]]) for i in range(n))
    return mask, selected


def _mask_order(mask: BoolArray, logits: FloatArray) -> tuple[tuple[int, ...], ...]:
    order = np.argsort(-logits, axis=1, kind="stable")
    return tuple(tuple(int(x) for x in order[i] if mask[i, x]) for i in range(mask.shape[0]))


def gamma_weights(logits: Matrix, mask: BoolArray, lam: float, eps: float) -> Matrix:
    """λ·σ(r′_e)/(Σ_selected σ(r′) + ε) on selected columns, zero elsewhere."""
    if mask.shape != logits.shape:
        raise DimensionError("selection mask must match logits", [mask.shape, logits.shape])
    if not mask.any(axis=1).all():
        raise ContractError("every token needs at least one selected expert")
    s = mul(sigmoid(logits), Matrix(mask.astype(np.float64)))
    return scale(div(s, add(sum_rows(s), eps)), lam)


class CombineSettings(Protocol):
    """Anything carrying the combination scale λ and stabilizer ε."""

    @property
    def lambda_(self) -> float: ...

    @property
    def eps(self) -> float: ...


def combine_weights(decision: RoutingBatch, cfg: CombineSettings) -> Matrix:
    return gamma_weights(decision.modulated_logits, decision.mask, cfg.lambda_, cfg.eps)


def route(
    h_fused: Union[HiddenBatch, Matrix],
    w: Matrix,
    gate: GatingNetwork,
    params: Mapping[str, Matrix],
    cfg: RouterConfig,
    *,
    forced_mask: Optional[BoolArray] = None,
) -> RoutingBatch:
    """Route every token of the batch.

    ``forced_mask`` replaces the greedy selection (slot counts and the virtual cap are
    then whatever the mask says); it exists for tests that need a fixed expert set.
    """
    hidden = h_fused.hidden if isinstance(h_fused, HiddenBatch) else h_fused
    if w.shape != (hidden.rows, 1):
        raise DimensionError("one importance weight per token", [hidden.shape, w.shape])
    if gate.e_real != cfg.e_real or gate.e_virtual != cfg.e_virtual:
        raise ConfigError("gate expert counts differ from the router config", key="e_real")

    w_values = w.data.reshape(-1)
    r = gate.logits(params, hidden)
    if cfg.importance_routing and cfg.alpha > 0.0:
        if (cfg.alpha * w_values >= 1.0).any():
            raise ConfigError("alpha·w >= 1 makes the virtual factor non-positive", key="alpha")
        signs = Matrix(np.concatenate([np.ones(cfg.e_real), -np.ones(cfg.e_virtual)]))
        r_mod = mul(r, add(matmul(scale(w, cfg.alpha), signs), 1.0))
    else:
        r_mod = r

    if forced_mask is None:
        k_hat = slot_counts(w_values, cfg)
        mask, selected = select_experts(r_mod.data, k_hat, cfg.e_real, cfg.rho_max)
    else:
        mask = np.asarray(forced_mask, dtype=bool)
        if mask.shape != r_mod.shape:
            raise DimensionError("forced mask must be tokens × experts", [mask.shape, r_mod.shape])
        k_hat = mask.sum(axis=1).astype(np.int64)
        selected = _mask_order(mask, r_mod.data)

    return RoutingBatch(
        e_real=cfg.e_real,
        e_virtual=cfg.e_virtual,
        k_hat=k_hat,
        selected=selected,
        mask=mask,
        modulated_logits=r_mod,
        probs=softmax_rows(r_mod),
        gamma=gamma_weights(r_mod, mask, cfg.lambda_, cfg.eps),
        w=w_values.copy(),
    )


def check_decisions(batch: RoutingBatch, cfg: RouterConfig) -> list[str]:
    """List every violated decision invariant (empty when the batch is sound)."""
    problems: list[str] = []
    for d in batch:
        if d.k_hat != d.k_real + d.k_virtual:
            problems.append(f"token {d.token_index}: k_hat != k_real + k_virtual")
        if cfg.budget_scale == 1.0 and not cfg.k_min <= d.k_hat <= cfg.k_max:
            problems.append(f"token {d.token_index}: k_hat {d.k_hat} outside [{cfg.k_min}, {cfg.k_max}]")
        if d.k_virtual > virtual_cap(d.k_hat, cfg.rho_max):
            problems.append(f"token {d.token_index}: {d.k_virtual} virtual slots exceed the cap")
        if len(set(d.selected)) != len(d.selected):
            problems.append(f"token {d.token_index}: duplicate experts")
        if any(g <= 0.0 for g in d.gamma) or not 0.0 < sum(d.gamma) <= cfg.lambda_ + 1e-12:
            problems.append(f"token {d.token_index}: gamma out of range")
    return problems
