"""Report serialization and figure rendering."""

import csv
import json

from fsed.evaluate import span_f1
from fsed.report import (
    plot_clean_vs_ambiguous,
    plot_history,
    plot_per_type_f1,
    write_reports_csv,
    write_reports_json,
)


def _reports():
    gold = {"s1": [("A", 0, 1)], "s2": [("B", 1, 2)]}
    return [span_f1(gold, gold), span_f1({}, gold)]


def test_json_and_csv(tmp_path):
    reports = _reports()
    jpath = tmp_path / "reports.json"
    cpath = tmp_path / "reports.csv"
    write_reports_json(reports, jpath)
    write_reports_csv(reports, cpath)
    rows = json.loads(jpath.read_text())
    assert len(rows) == 4  # two types per report
    with open(cpath, newline="") as fh:
        csv_rows = list(csv.DictReader(fh))
    assert len(csv_rows) == 4
    assert float(csv_rows[0]["micro_f1"]) == rows[0]["micro_f1"]


def test_figures_render(tmp_path):
    reports = _reports()
    f1 = tmp_path / "f1.png"
    plot_per_type_f1(reports, f1)
    assert f1.stat().st_size > 0

    history = {
        "best_epoch": 2,
        "epochs": [
            {"epoch": 1, "train_loss": 0.6, "dev_micro_f1": 0.3, "best_so_far": 0.3},
            {"epoch": 2, "train_loss": 0.4, "dev_micro_f1": 0.5, "best_so_far": 0.5},
        ],
    }
    hist = tmp_path / "history.png"
    plot_history(history, hist)
    assert hist.stat().st_size > 0

    trend = tmp_path / "trend.png"
    plot_clean_vs_ambiguous(
        [
            {"seed": 1, "base_clean": 0.9, "base_ambiguous": 0.6,
             "causal_clean": 0.9, "causal_ambiguous": 0.7},
        ],
        trend,
    )
    assert trend.stat().st_size > 0
