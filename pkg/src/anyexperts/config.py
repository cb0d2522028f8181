"""Configuration management for anyexperts: environment settings and flat run-config files."""

import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .baselines import BaselineConfig
from .errors import ConfigError
from .importance import EstimatorVariant
from .routing import RouterConfig

# Load environment variables from .env file
load_dotenv()

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Config:
    """Process-wide settings read from the environment."""

    def __init__(self):
        self.log_level: str = os.getenv("ANYEXPERTS_LOG_LEVEL", "INFO").upper()
        self.out_dir: Path = Path(os.getenv("ANYEXPERTS_OUT_DIR", "runs"))

    def validate(self) -> None:
        """Validate that the settings are usable."""
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(
                f"unknown log level {self.log_level!r}; expected one of {', '.join(LOG_LEVELS)}",
                key="ANYEXPERTS_LOG_LEVEL",
            )

    @property
    def logging_level(self) -> int:
        self.validate()
        return getattr(logging, self.log_level)


class TrainingRouter(str, Enum):
    ANYEXPERTS = "anyexperts"
    TOPK = "topk"
    TOPP = "topp"


class RunConfig(BaseModel):
    """Everything a run needs; ``seed`` is the only key without a default."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    seed: int = Field(..., ge=0)

    # router
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
    router: TrainingRouter = TrainingRouter.ANYEXPERTS
    top_k: int = Field(8, ge=1)
    top_p: float = Field(0.5, gt=0.0, le=1.0)

    # objective
    lambda_tir: float = Field(0.001, ge=0.0)
    lambda_bal: float = Field(0.01, ge=0.0)

    # model and data
    d: int = Field(16, ge=1)
    d_ff: Optional[int] = Field(None, ge=1)
    vocab: int = Field(32, ge=1)
    estimator: EstimatorVariant = EstimatorVariant.DEFAULT
    seq_len: int = Field(32, ge=4)
    n_sequences: int = Field(16, ge=1)
    eval_sequences: int = Field(16, ge=1)
    redundancy: float = Field(0.5, ge=0.0, lt=1.0)

    # schedule
    steps: int = Field(200, ge=1)
    lr: float = Field(0.002, ge=0.0)
    eval_every: int = Field(50, ge=0)
    baseline_ks: tuple[int, ...] = (4, 6, 8, 10)

    @field_validator("baseline_ks", mode="before")
    @classmethod
    def _split_ks(cls, value: Any) -> Any:
        if isinstance(value, (int, str)):
            return (value,)
        return value

    @model_validator(mode="after")
    def _check_router(self) -> "RunConfig":
        self.router_config()
        return self

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 2 * self.d

    def router_config(self) -> RouterConfig:
        return RouterConfig(
            k_min=self.k_min,
            k_max=self.k_max,
            e_real=self.e_real,
            e_virtual=self.e_virtual,
            rho_max=self.rho_max,
            alpha=self.alpha,
            lambda_=self.lambda_,
            eps=self.eps,
            budget_scale=self.budget_scale,
            hidden_modulation=self.hidden_modulation,
            importance_routing=self.importance_routing,
        )

    def training_router(self) -> Union[RouterConfig, BaselineConfig]:
        if self.router is TrainingRouter.TOPK:
            return BaselineConfig.topk(self.top_k, lambda_=self.lambda_, eps=self.eps)
        if self.router is TrainingRouter.TOPP:
            return BaselineConfig.topp(self.top_p, lambda_=self.lambda_, eps=self.eps)
        return self.router_config()

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True)


def _coerce(raw: str) -> Any:
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if "," in raw:
        return [part.strip() for part in raw.split(",") if part.strip()]
    return raw


def parse_config_text(text: str) -> tuple[dict[str, Any], dict[str, int]]:
    """Parse ``key = value`` lines into raw values plus the line each key came from."""
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected 'key = value', got {content!r}", line=number)
        key, raw = (part.strip() for part in content.split("=", 1))
        if not key:
            raise ConfigError("missing key before '='", line=number)
        if not raw:
            raise ConfigError("missing value", key=key, line=number)
        if key in values:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key=key, line=number)
        values[key] = _coerce(raw)
        lines[key] = number
    return values, lines


def build_run_config(values: dict[str, Any], lines: Optional[dict[str, int]] = None) -> RunConfig:
    """Validate raw values, turning the first pydantic error into a ``ConfigError``."""
    lines = lines or {}
    for name, field in RunConfig.model_fields.items():
        if field.alias and field.alias != name and name in values:
            raise ConfigError(f"unknown key (write {field.alias!r})", key=name, line=lines.get(name))
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else None
        message = "missing required key" if error["type"] == "missing" else error["msg"]
        if error["type"] == "extra_forbidden":
            message = "unknown key"
        raise ConfigError(message, key=key, line=lines.get(key) if key else None) from None


def load_run_config(path: Union[str, Path], seed: Optional[int] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    values, lines = parse_config_text(text)
    if seed is not None:
        values["seed"] = seed
        lines.pop("seed", None)
    return build_run_config(values, lines)


# Global config instance
config = Config()
