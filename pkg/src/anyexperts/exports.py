"""Exported record models and their CSV / JSON / JSON-lines writers.

Floats go out at 17 significant digits in CSV and in shortest round-trip form in
JSON, so every exported 64-bit value reads back exactly.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Type, Union

from pydantic import BaseModel

from .importance import Modality
from .routing import RoutingBatch

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class LossPoint(BaseModel):
    step: int
    total: float
    lm: float
    tir: float
    balance: float
    avg_k_hat: float
    avg_k_real: float
    virtual_share: float


class SweepRow(BaseModel):
    kind: str
    budget_scale: Optional[float] = None
    k: Optional[int] = None
    avg_k_hat: float
    avg_k_real: float
    virtual_share: float
    eval_loss: float
    eval_accuracy: float


class AblationRow(BaseModel):
    variant: str
    eval_loss: float
    eval_accuracy: float
    avg_k_real: float
    virtual_share: float
    mean_w_informative: Optional[float] = None
    mean_w_redundant: Optional[float] = None


class DecisionRecord(BaseModel):
    token_index: int
    modality: Modality
    w: Optional[float] = None
    k_hat: int
    k_real: int
    k_virtual: int
    selected: list[int]
    gamma: list[float]


class TraceRecord(BaseModel):
    sequence: int
    position: int
    modality: Modality
    informative: bool
    w: float
    k_hat: int
    k_real: int


class SpanAggregate(BaseModel):
    sequence: int
    span_index: int
    start: int
    end: int
    sum_w: float
    mean_w: float
    mean_k_real: float


LOSS_CURVE_COLUMNS = tuple(LossPoint.model_fields)
SWEEP_COLUMNS = tuple(SweepRow.model_fields)
ABLATION_COLUMNS = tuple(AblationRow.model_fields)


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "%.17g" % value
    if isinstance(value, Modality):
        return value.value
    return str(value)


def write_csv(path: PathLike, rows: Iterable[BaseModel], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_value(getattr(row, column)) for column in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def read_csv(path: PathLike, model: Type[BaseModel]) -> list[BaseModel]:
    """Parse a file written by ``write_csv`` back into records (empty cells become None)."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header = text[0].split(",")
    return [
        model.model_validate({k: (v if v != "" else None) for k, v in zip(header, line.split(","))})
        for line in text[1:]
        if line
    ]


def dumps(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True)


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def write_jsonl(path: PathLike, records: Iterable[BaseModel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [dumps(record.model_dump(mode="json")) for record in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    logger.info("wrote %s (%d records)", path, len(lines))
    return path


def decision_records(batch: RoutingBatch, modalities: Sequence[Modality]) -> list[DecisionRecord]:
    records = []
    for decision, modality in zip(batch, modalities):
        records.append(
            DecisionRecord(
                token_index=decision.token_index,
                modality=modality,
                w=None if batch.w is None else float(batch.w[decision.token_index]),
                k_hat=decision.k_hat,
                k_real=decision.k_real,
                k_virtual=decision.k_virtual,
                selected=list(decision.selected),
                gamma=list(decision.gamma),
            )
        )
    return records


def spans_path(trace_path: PathLike) -> Path:
    """``trace.jsonl`` → ``trace.spans.jsonl``."""
    path = Path(trace_path)
    return path.with_name(f"{path.stem}.spans{path.suffix or '.jsonl'}")


def schemas() -> dict[str, dict[str, Any]]:
    """JSON schema of every exported record, keyed by record name."""
    return {
        model.__name__: model.model_json_schema()
        for model in (LossPoint, SweepRow, AblationRow, DecisionRecord, TraceRecord, SpanAggregate)
    }
