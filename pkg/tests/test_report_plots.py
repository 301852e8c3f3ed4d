import csv
import io
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from echomark import plots
from echomark.acoustics import compare
from echomark.report import CSV_COLUMNS, ItemResult, ber, build_report, items_csv, summarize


def _item(k, t60_true, t60_est, snr=None, message=None, decoded=None, present=None, negative=None):
    return ItemResult(index=k, clean_path="c.wav", target_path=f"t{k}.wav", snr_db=snr,
                      t60_true=t60_true, t60_est=t60_est, drr_true=3.0 + k, drr_est=3.5 + k,
                      converged=True, final_loss=0.1 * k, message=message, decoded=decoded,
                      present=present, negative_present=negative)


@pytest.fixture
def items():
    return [
        _item(0, 0.5, 0.55, None, "10110", "10110", True, False),
        _item(1, 1.0, 0.9, None, "01010", "01011", True, True),
        _item(2, 1.5, 1.6, 20.0, "11111", "00111", False, False),
        _item(3, 2.0, math.nan, 20.0),
    ]


def test_summary_is_recomputable_from_rows(items):
    s = summarize(items)
    finite = [i for i in items if math.isfinite(i.t60_est)]
    ref = compare([i.t60_est for i in finite], [i.t60_true for i in finite])
    assert s.count == 4 and s.t60["count"] == 3
    assert s.t60["rmse"] == pytest.approx(ref.rmse) and s.t60["bias"] == pytest.approx(ref.bias)
    assert s.bits == 15 and s.bit_errors == 3 and s.ber == pytest.approx(3 / 15)
    # presence: 2 of 3 detected, negatives: 2 of 3 rejected
    assert s.wm_trials == 3 and s.accuracy == pytest.approx(4 / 6)


def test_report_json_is_strict_and_grouped(items):
    report = build_report(items, "1.0", {"seed": 1}, group_by_condition=True)
    doc = json.loads(report.to_json())
    assert set(doc["groups"]) == {"clean", "20 dB"}
    assert doc["groups"]["clean"]["count"] == 2
    assert doc["items"][3]["t60_est"] is None
    assert doc["items"][1]["bit_errors"] == 1
    assert build_report(items, "1.0", {}).groups == {}


def test_items_csv_mirrors_rows(items):
    rows = list(csv.DictReader(io.StringIO(items_csv(items))))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 4
    assert float(rows[1]["t60_est"]) == 0.9
    assert rows[3]["t60_est"] == "" and rows[3]["message"] == ""


def test_ber():
    assert ber([True, False, True, True], [True, True, True, False]) == 0.5
    assert ber([True], [True]) == 0.0
    with pytest.raises(ValueError):
        ber([], [])
    with pytest.raises(ValueError):
        ber([True], [True, False])


def test_svg_output_is_deterministic_and_well_formed():
    curves = [np.exp(-np.arange(800) / 100.0), np.exp(-np.arange(600) / 50.0)]
    docs = [
        plots.edc_overlay(curves, ["truth", "estimate"], 16000),
        plots.scatter([0.5, 1.0, math.nan], [0.6, 0.9, 1.0], "T60", "T60 (s)"),
        plots.bars(["clean", "20 dB"], [0.0, None], "BER", "BER"),
    ]
    again = [
        plots.edc_overlay(curves, ["truth", "estimate"], 16000),
        plots.scatter([0.5, 1.0, math.nan], [0.6, 0.9, 1.0], "T60", "T60 (s)"),
        plots.bars(["clean", "20 dB"], [0.0, None], "BER", "BER"),
    ]
    assert docs == again
    for doc in docs:
        assert ET.fromstring(doc).tag.endswith("svg")
    assert docs[1].count("<circle") == 2
    assert docs[2].count("<rect") >= 1


def test_svg_escapes_labels():
    doc = plots.bars(["a<b & c"], [0.5], "t", "y")
    ET.fromstring(doc)
    assert "a&lt;b &amp; c" in doc


def test_self_comparison_is_exact():
    items = [_item(k, t, t) for k, t in enumerate((0.3, 0.8, 1.4))]
    t60 = summarize(items).t60
    assert t60["rmse"] == 0.0 and t60["bias"] == 0.0
    assert t60["pearson_rho"] == pytest.approx(1.0)
