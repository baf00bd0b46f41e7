import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfeeg.errors import ParameterError, ParseError, ShapeError
from sfeeg.metrics import (confusion_matrix, emit_reports, evaluate, format_report, metrics_from_confusion,
                           read_report_csv, read_subject_csv)


def _from_confusion(cm):
    """Expand a confusion matrix into (preds, truths) arrays."""
    preds, truths = [], []
    for t in range(len(cm)):
        for p in range(len(cm)):
            preds += [p] * cm[t][p]
            truths += [t] * cm[t][p]
    return np.array(preds), np.array(truths)


def test_perfect_predictions():
    rep = evaluate([0, 1, 1, 0], [0, 1, 1, 0])
    assert rep.accuracy == 1.0
    assert all(m.f1 == 1.0 for m in rep.per_class) and rep.undefined == []


def test_all_positive_predictions():
    rep = evaluate([1] * 10, [0] * 5 + [1] * 5)
    pos, neg = rep.per_class[1], rep.per_class[0]
    assert pos.sensitivity == 1.0 and pos.ppv == 0.5 and pos.f1 == 2 / 3
    assert neg.ppv == 0.0 and neg.ppv_undefined
    assert neg.sensitivity == 0.0 and not neg.sensitivity_undefined
    assert "ppv_0" in rep.undefined


def test_hundred_sample_matrix():
    preds, truths = _from_confusion([[30, 10], [5, 55]])
    rep = evaluate(preds, truths)
    assert rep.confusion.tolist() == [[30, 10], [5, 55]]
    assert rep.accuracy == 0.85
    assert rep.per_class[0].ppv == 30 / 35 and rep.per_class[0].sensitivity == 0.75
    assert rep.per_class[1].ppv == 55 / 65 and rep.per_class[1].sensitivity == 55 / 60


def test_length_mismatch():
    with pytest.raises(ShapeError):
        evaluate([0, 1], [0])
    with pytest.raises(ShapeError):
        evaluate([0, 1], [0, 1], subject_ids=["a"])
    with pytest.raises(ParameterError):
        confusion_matrix([2], [0])


def test_per_subject_grouping():
    rep = evaluate([0, 1, 1, 1], [0, 0, 1, 1], subject_ids=["b", "a", "b", "a"])
    assert rep.per_subject == {"a": 0.5, "b": 1.0}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 60))
def test_accuracy_and_micro_sensitivity(seed, n):
    r = np.random.default_rng(seed)
    p, t = r.integers(0, 2, n), r.integers(0, 2, n)
    rep = evaluate(p, t, tta_invoked=r.random(n) < 0.3)
    assert rep.n_samples == n
    assert rep.accuracy == pytest.approx(np.trace(rep.confusion) / n)
    counts = rep.confusion.sum(axis=1)
    micro = sum(c * m.sensitivity for c, m in zip(counts, rep.per_class)) / n
    assert micro == pytest.approx(rep.accuracy)
    for m in rep.per_class:
        assert 0 <= m.ppv <= 1 and 0 <= m.sensitivity <= 1 and 0 <= m.f1 <= 1
    assert 0 <= rep.tta_rate <= 1


def test_reports_round_trip(tmp_path):
    rep = evaluate([0, 1, 1, 0, 1], [0, 1, 0, 0, 1], subject_ids=["s1", "s1", "s2", "s2", "s3"],
                   tta_invoked=[True, False, False, True, False])
    paths = emit_reports(rep, tmp_path)
    back = read_report_csv(paths["csv"], paths["subjects"])
    assert back.confusion.tolist() == rep.confusion.tolist()
    assert back.accuracy == rep.accuracy and back.tta_rate == rep.tta_rate
    assert back.per_class == rep.per_class
    assert back.per_subject == rep.per_subject
    assert len(paths["subjects"].read_text().splitlines()) == 1 + 3
    assert paths["text"].read_text() == format_report(rep)


def test_empty_subject_set_header_only(tmp_path):
    paths = emit_reports(evaluate([1], [1]), tmp_path)
    assert paths["subjects"].read_text().splitlines() == ["subject_id,accuracy"]
    assert read_subject_csv(paths["subjects"]) == {}


def test_report_parse_errors(tmp_path):
    (tmp_path / "r.csv").write_text("a,b\n")
    with pytest.raises(ParseError):
        read_report_csv(tmp_path / "r.csv")
    (tmp_path / "r.csv").write_text("metric,class,value,undefined\naccuracy,,x,0\n")
    with pytest.raises(ParseError) as exc:
        read_report_csv(tmp_path / "r.csv")
    assert exc.value.line == 2


def test_metrics_from_confusion_empty():
    acc, per_class = metrics_from_confusion(np.zeros((2, 2), dtype=int))
    assert acc == 0.0 and all(m.ppv_undefined and m.sensitivity_undefined for m in per_class)
