import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from autobx.evaluation import (
    CSV_COLUMNS, AttemptRecord, EvaluationError, ExperimentReport, assess_attempt, fit_line_pca,
    greedy_match, targeting_error,
)
from autobx.geometry import RigidTransform, rotation_about
from autobx.needle import InsertionResult


def test_line_fit_examples():
    pts = np.column_stack([np.zeros(5), np.zeros(5), np.arange(5.0)])
    line = fit_line_pca(pts)
    assert np.allclose(line.point, [0, 0, 2]) and np.allclose(line.direction, [0, 0, 1])
    assert line.residual == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(fit_line_pca(pts[::-1]).direction, [0, 0, 1])
    assert np.allclose(fit_line_pca([[0, 0, 0], [-3, 0, 0]]).direction, [1, 0, 0])
    with pytest.raises(EvaluationError):
        fit_line_pca([[1, 2, 3]])
    with pytest.raises(EvaluationError):
        fit_line_pca([[1, 2, 3], [1, 2, 3]])


def test_targeting_error_example():
    line = fit_line_pca([[0, 0, 0], [0, 0, 10]])
    assert targeting_error(line, [3, 4, 17]) == pytest.approx(5.0)


@given(st.floats(-20, 20), st.integers(0, 10_000))
def test_targeting_error_invariances(slide, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(2, 3)) * 10
    tgt = rng.normal(size=3) * 10
    line = fit_line_pca(pts)
    e = targeting_error(line, tgt)
    moved = type(line)(line.point + slide * line.direction, line.direction, line.residual)
    assert targeting_error(moved, tgt) == pytest.approx(e, abs=1e-9)
    axis = rng.normal(size=3)
    t = RigidTransform(rotation_about(axis / np.linalg.norm(axis), rng.uniform(0, 3)), rng.normal(size=3) * 50)
    assert targeting_error(fit_line_pca(t.apply(pts)), t.apply(tgt)) == pytest.approx(e, abs=1e-8)


def needle(points):
    p = np.asarray(points, float)
    d = p[-1] - p[0]
    return InsertionResult(points=p, tip=p[-1], misalignment_deg=0.0, axis=d / np.linalg.norm(d))


def test_assess_attempt():
    pts = np.column_stack([np.zeros(20), np.zeros(20), np.linspace(0, -40, 20)])
    assert assess_attempt(needle(pts), [0, 0, -40], pick_noise_sigma=0.0) == pytest.approx(0.0, abs=1e-12)
    a = assess_attempt(needle(pts), [1, 0, -40], seed=3)
    assert a == assess_attempt(needle(pts), [1, 0, -40], seed=3)
    assert 0.5 < a < 1.5


def rec(rep, tid, mode, err, time, ok=True, losses=0):
    return AttemptRecord(rep=rep, target_id=tid, mode=mode, target=np.array([1.0, 2.0, 3.0]), error=err,
                         time=time, success=ok, contact_losses=losses)


@pytest.fixture
def report():
    rng = np.random.default_rng(5)
    recs = []
    for rep in range(4):
        for tid in range(3):
            for mode in ("position", "impedance"):
                recs.append(rec(rep, tid, mode, rng.uniform(0, 3), rng.uniform(20, 40),
                                ok=not (mode == "position" and tid == 2 and rep % 2), losses=rep))
    return ExperimentReport(recs, false_positives={"position": 1})


def test_aggregates_recomputed(report):
    agg = report.aggregates()
    for mode in ("position", "impedance"):
        ok = [r for r in report.records if r.mode == mode and r.success]
        errs = np.array([r.error for r in ok])
        assert agg[mode]["successes"] == len(ok)
        assert abs(agg[mode]["error"]["mean"] - errs.mean()) < 1e-12
        assert abs(agg[mode]["error"]["std"] - errs.std(ddof=1)) < 1e-12
        assert agg[mode]["contact_losses"] == 0 + 1 + 2 + 3
    assert agg["position"]["successes"] == 10
    assert agg["position"]["per_target"]["2"]["successes"] == 2
    assert agg["position"]["false_positives"] == 1 and agg["impedance"]["false_positives"] == 0


def test_report_files(report, tmp_path):
    report.write(tmp_path)
    rows = list(csv.reader(open(tmp_path / "report.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 25
    assert rows[1][6] in ("0", "1") and rows[1][-1] == ""
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["aggregates"]["impedance"]["attempts"] == 12
    assert not math.isnan(float(rows[1][7]))


def test_greedy_match():
    truth = [[0, 0, 0], [10, 0, 0]]
    cents = [[9, 0, 0], [1, 0, 0], [100, 0, 0]]
    assert greedy_match(truth, cents, 5.0) == {0: 1, 1: 0}
    assert greedy_match(truth, [[5, 0, 0]], 15.0) == {0: 0}
    assert greedy_match(truth, [], 15.0) == {}
    assert greedy_match(truth, [[50, 0, 0]], 15.0) == {}
