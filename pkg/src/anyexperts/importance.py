"""Token importance estimation: LayerNorm → lightweight MLP → score → sigmoid weight → residual fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import (
    FloatArray,
    Matrix,
    Rng,
    add,
    layer_norm,
    matmul,
    mean_all,
    mul,
    relu,
    scale,
    sigmoid,
    square,
)


class Modality(str, Enum):
    TEXTLIKE = "textlike"
    IMAGELIKE = "imagelike"


@dataclass(frozen=True)
class HiddenBatch:
    """Token hidden states (one row per token) with one modality tag per token."""

    hidden: Matrix
    modalities: tuple[Modality, ...]

    def __post_init__(self) -> None:
        if len(self.modalities) != self.hidden.rows:
            raise DimensionError(
                "one modality tag per token", [self.hidden.shape, (len(self.modalities),)]
            )

    @property
    def n_tokens(self) -> int:
        return self.hidden.rows

    @property
    def d(self) -> int:
        return self.hidden.cols

    def with_hidden(self, hidden: Matrix) -> "HiddenBatch":
        return HiddenBatch(hidden, self.modalities)


class EstimatorVariant(str, Enum):
    DEFAULT = "default"  # d → ⌈d/4⌉ → 1
    WIDE = "wide"  # d → d → 1
    DEEP = "deep"  # d → ⌈d/4⌉ → ⌈d/4⌉ → 1


@dataclass(frozen=True)
class ImportanceEstimator:
    """Shape descriptor for one layer's estimator; parameters live in the model's store."""

    d: int
    variant: EstimatorVariant = EstimatorVariant.DEFAULT
    prefix: str = "importance"
    norm_eps: float = 1e-5

    @property
    def widths(self) -> list[int]:
        quarter = max(1, math.ceil(self.d / 4))
        if self.variant is EstimatorVariant.WIDE:
            return [self.d, self.d, 1]
        if self.variant is EstimatorVariant.DEEP:
            return [self.d, quarter, quarter, 1]
        return [self.d, quarter, 1]

    def parameter_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {
            f"{self.prefix}.norm.gain": (1, self.d),
            f"{self.prefix}.norm.bias": (1, self.d),
        }
        widths = self.widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"{self.prefix}.mlp.{i}.weight"] = (fan_in, fan_out)
            shapes[f"{self.prefix}.mlp.{i}.bias"] = (1, fan_out)
        return shapes

    def init_parameters(self, rng: Rng) -> dict[str, FloatArray]:
        """Gain 1, bias 0; hidden layers uniform ±1/sqrt(fan_in); final layer zero so every w starts at 0.5."""
        widths = self.widths
        last = len(widths) - 2
        params: dict[str, FloatArray] = {
            f"{self.prefix}.norm.gain": np.ones((1, self.d)),
            f"{self.prefix}.norm.bias": np.zeros((1, self.d)),
        }
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if i == last:
                weight = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / math.sqrt(fan_in)
                weight = rng.split(f"{self.prefix}.mlp.{i}").uniform(-bound, bound, (fan_in, fan_out))
            params[f"{self.prefix}.mlp.{i}.weight"] = weight
            params[f"{self.prefix}.mlp.{i}.bias"] = np.zeros((1, fan_out))
        return params

    def scores(self, params: Mapping[str, Matrix], hidden: Matrix) -> Matrix:
        """Raw score s per token, as an n×1 column."""
        if hidden.cols != self.d:
            raise DimensionError("estimator width does not match hidden states", [hidden.shape, (1, self.d)])
        x = layer_norm(
            hidden,
            params[f"{self.prefix}.norm.gain"],
            params[f"{self.prefix}.norm.bias"],
            self.norm_eps,
        )
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            x = add(matmul(x, params[f"{self.prefix}.mlp.{i}.weight"]), params[f"{self.prefix}.mlp.{i}.bias"])
            if i < n_layers - 1:
                x = relu(x)
        return x


@dataclass(frozen=True)
class ImportanceResult:
    s: Matrix
    w: Matrix
    h_fused: Matrix

    @property
    def weights(self) -> FloatArray:
        return self.w.data.reshape(-1)


def estimate(
    est: ImportanceEstimator,
    params: Mapping[str, Matrix],
    h: HiddenBatch,
    alpha: float,
    *,
    hidden_modulation: bool = True,
) -> ImportanceResult:
    """Score every token, squash to w = sigmoid(s) and fuse h′ = h + alpha·w·h.

    With ``hidden_modulation`` off, h′ is h itself (the ablation without residual fusion).
    """
    if h.n_tokens == 0:
        raise ContractError("importance estimation over an empty batch")
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    s = est.scores(params, h.hidden)
    w = sigmoid(s)
    if hidden_modulation:
        h_fused = mul(h.hidden, add(scale(w, alpha), 1.0))
    else:
        h_fused = h.hidden
    return ImportanceResult(s=s, w=w, h_fused=h_fused)


def tir_loss(w: Matrix) -> Matrix:
    """Token importance regularizer: mean of squared importance weights."""
    if w.rows * w.cols == 0:
        raise ContractError("TIR loss over an empty batch")
    if (w.data < 0.0).any() or (w.data > 1.0).any():
        raise ContractError("importance weights must lie in [0, 1]")
    return mean_all(square(w))
