"""
Exports test suite.

Validates the CSV and JSON writers, decision records and record schemas.
"""

import json

import numpy as np

from anyexperts.exports import (
    LOSS_CURVE_COLUMNS,
    SWEEP_COLUMNS,
    LossPoint,
    SweepRow,
    TraceRecord,
    decision_records,
    format_value,
    read_csv,
    schemas,
    spans_path,
    write_csv,
    write_json,
    write_jsonl,
)
from anyexperts.importance import Modality
from anyexperts.numerics import Matrix, Rng, bind
from anyexperts.routing import GatingNetwork, RouterConfig, route


def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(None) == ""
    assert format_value(True) == "true"
    assert format_value(Modality.IMAGELIKE) == "imagelike"
    assert format_value(7) == "7"


def test_loss_curve_columns():
    assert LOSS_CURVE_COLUMNS == ("step", "total", "lm", "tir", "balance", "avg_k_hat", "avg_k_real", "virtual_share")
    assert SWEEP_COLUMNS[:3] == ("kind", "budget_scale", "k")


def test_csv_preserves_floats_exactly(tmp_path):
    point = LossPoint(step=0, total=1 / 3, lm=0.1, tir=0.25, balance=2.0 / 7, avg_k_hat=10.0, avg_k_real=8.5, virtual_share=0.15)
    path = write_csv(tmp_path / "curve.csv", [point], LOSS_CURVE_COLUMNS)
    assert path.read_text(encoding="utf-8").splitlines()[0] == ",".join(LOSS_CURVE_COLUMNS)
    assert read_csv(path, LossPoint) == [point]


def test_csv_empty_cells_are_none(tmp_path):
    row = SweepRow(kind="topk", k=6, avg_k_hat=6.0, avg_k_real=6.0, virtual_share=0.0, eval_loss=1.5, eval_accuracy=0.25)
    path = write_csv(tmp_path / "sweep.csv", [row], SWEEP_COLUMNS)
    assert path.read_text(encoding="utf-8").splitlines()[1].startswith("topk,,6,")
    assert read_csv(path, SweepRow)[0].budget_scale is None


def test_json_keys_are_sorted(tmp_path):
    path = write_json(tmp_path / "out" / "stats.json", {"b": 1, "a": 2})
    assert path.read_text(encoding="utf-8") == '{"a": 2, "b": 1}\n'


def test_jsonl_one_record_per_line(tmp_path):
    records = [
        TraceRecord(sequence=0, position=p, modality=Modality.TEXTLIKE, informative=True, w=0.5, k_hat=10, k_real=8)
        for p in range(3)
    ]
    path = write_jsonl(tmp_path / "trace.jsonl", records)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    assert json.loads(lines[2])["position"] == 2
    assert json.loads(lines[0])["modality"] == "textlike"


def test_spans_path():
    assert spans_path("runs/trace.jsonl").name == "trace.spans.jsonl"


def test_decision_records_follow_the_batch():
    cfg = RouterConfig()
    gate = GatingNetwork(d=8, e_real=16, e_virtual=64)
    params = bind(gate.init_parameters(Rng(0)))
    w = Matrix(Rng(1).uniform(0.0, 1.0, (4, 1)))
    batch = route(Matrix(Rng(2).normal(1.0, (4, 8))), w, gate, params, cfg)
    records = decision_records(batch, (Modality.TEXTLIKE, Modality.IMAGELIKE) * 2)
    assert [r.token_index for r in records] == [0, 1, 2, 3]
    for record, k_hat in zip(records, batch.k_hat):
        assert record.k_hat == k_hat == len(record.selected) == len(record.gamma)
        assert record.k_real + record.k_virtual == record.k_hat
        assert 0.0 <= record.w <= 1.0
    assert records[1].modality is Modality.IMAGELIKE
    assert np.isclose(sum(records[0].gamma), 1.0, atol=1e-6)


def test_schemas_cover_every_record():
    found = schemas()
    assert set(found) == {"LossPoint", "SweepRow", "AblationRow", "DecisionRecord", "TraceRecord", "SpanAggregate"}
    assert "sum_w" in found["SpanAggregate"]["properties"]
    assert "seed" not in found["SweepRow"]["properties"]
