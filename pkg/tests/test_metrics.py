from decimal import Decimal, getcontext
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaocc.metrics import (METRIC_NAMES, RESULT_COLUMNS, ConfusionCounts, ResultRow, Scorecard, aggregate,
                             confusion, format_csv, format_table, micro_aggregate, parse_csv, read_report, report,
                             score, score_predictions)

getcontext().prec = 50


def exact_metrics(tp, fp, fn, tn):
    """Rational arithmetic for the ratios, 50-digit decimals for the MCC root."""
    def r(a, b):
        return Fraction(a, b) if b else Fraction(0)

    p, rec, tnr = r(tp, tp + fp), r(tp, tp + fn), r(tn, tn + fp)

    def fb(beta2):
        return r(1, 1) * (1 + beta2) * p * rec / (beta2 * p + rec) if (beta2 * p + rec) else Fraction(0)

    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (Decimal(tp * tn - fp * fn) / Decimal(den).sqrt()) if den else Decimal(0)
    return {
        "precision": float(p), "recall": float(rec), "f1": float(fb(1)),
        "f2": float(fb(4)), "f05": float(fb(Fraction(1, 4))), "bacc": float((rec + tnr) / 2), "mcc": float(mcc),
    }


counts = st.integers(0, 10_000)


@given(counts, counts, counts, counts)
def test_score_matches_exact_oracle(tp, fp, fn, tn):
    card = score(ConfusionCounts(tp, fp, fn, tn))
    for k, v in exact_metrics(tp, fp, fn, tn).items():
        assert abs(card[k] - v) <= 1e-12, k


def test_thousand_random_matrices():
    rng = np.random.default_rng(7)
    worst = 0.0
    for tp, fp, fn, tn in rng.integers(0, 5000, size=(1000, 4)):
        card = score(ConfusionCounts(tp, fp, fn, tn))
        ref = exact_metrics(int(tp), int(fp), int(fn), int(tn))
        worst = max(worst, max(abs(card[k] - ref[k]) for k in METRIC_NAMES))
    assert worst <= 1e-12


def test_fixed_case():
    card = score(ConfusionCounts(90, 10, 10, 890))
    assert card.mcc == pytest.approx(8 / 9, abs=1e-9)
    assert card.bacc == pytest.approx((0.9 + 890 / 900) / 2, abs=1e-12)
    for k in ("precision", "recall", "f1", "f2", "f05"):
        assert card[k] == pytest.approx(0.9, abs=1e-12)


def test_hand_counted_confusion():
    pred = [1, 1, 0, 0, 1, 0, 1, 0, 0, 1]
    true = [1, 0, 0, 1, 1, 0, 0, 0, 1, 1]
    assert confusion(pred, true) == ConfusionCounts(tp=3, fp=2, fn=2, tn=3)


def test_confusion_edge_cases():
    assert confusion([1, 0, 1], [1, 0, 1]) == ConfusionCounts(2, 0, 0, 1)
    assert confusion([1, 1, 1, 1], [0, 0, 0, 0]) == ConfusionCounts(0, 4, 0, 0)
    with pytest.raises(ValueError):
        confusion([1, 0], [1])
    with pytest.raises(ValueError):
        confusion([2, 0], [1, 0])
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


def test_matches_sklearn_on_predictions():
    skm = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(3)
    for _ in range(20):
        y = rng.integers(0, 2, 300)
        y[0] = 1
        p = np.where(rng.random(300) < 0.8, y, 1 - y)
        card = score_predictions(p, y)
        assert card.precision == pytest.approx(skm.precision_score(y, p), abs=1e-12)
        assert card.recall == pytest.approx(skm.recall_score(y, p), abs=1e-12)
        assert card.f2 == pytest.approx(skm.fbeta_score(y, p, beta=2), abs=1e-12)
        assert card.f05 == pytest.approx(skm.fbeta_score(y, p, beta=0.5), abs=1e-12)
        assert card.bacc == pytest.approx(skm.balanced_accuracy_score(y, p), abs=1e-12)
        assert card.mcc == pytest.approx(skm.matthews_corrcoef(y, p), abs=1e-12)


def test_perfect_and_all_positive():
    assert score(ConfusionCounts(5, 0, 0, 20)).values() == (1.0,) * 7
    card = score(ConfusionCounts(5, 20, 0, 0))
    assert card.recall == 1.0 and card.bacc == 0.5 and card.mcc == 0.0


def test_zero_denominator_conventions():
    card = score(ConfusionCounts(0, 0, 5, 20))
    assert card.precision == 0.0 and card.f1 == 0.0 and card.mcc == 0.0 and card.bacc == 0.5


@given(st.integers(1, 500), st.integers(0, 500))
def test_equal_precision_recall_gives_same_fbeta(tp, err):
    card = score(ConfusionCounts(tp, err, err, 1000))
    assert card.f1 == pytest.approx(card.precision, abs=1e-12)
    assert card.f2 == pytest.approx(card.precision, abs=1e-12)
    assert card.f05 == pytest.approx(card.precision, abs=1e-12)


@given(st.integers(0, 300), st.integers(1, 300), st.integers(1, 300), st.integers(0, 300))
def test_fbeta_strictly_increases_with_tp(tp, fp, fn, tn):
    a, b = score(ConfusionCounts(tp, fp, fn, tn)), score(ConfusionCounts(tp + 1, fp, fn, tn))
    for k in ("f1", "f2", "f05"):
        assert b[k] > a[k]


@given(counts, counts, counts, counts)
def test_mcc_range(tp, fp, fn, tn):
    card = score(ConfusionCounts(tp, fp, fn, tn))
    assert -1.0 - 1e-12 <= card.mcc <= 1.0 + 1e-12
    perfect = fp == fn == 0 and tp > 0 and tn > 0
    assert (abs(card.mcc - 1.0) < 1e-12) == perfect
    for k in ("precision", "recall", "f1", "f2", "f05", "bacc"):
        assert 0.0 <= card[k] <= 1.0


def test_aggregate():
    one = score(ConfusionCounts(3, 1, 1, 10), "a")
    assert aggregate([one]).values() == one.values()
    cards = [Scorecard(0, 0, 0.4, 0, 0, 0, 0), Scorecard(0, 0, 0.8, 0, 0, 0, 0)]
    assert aggregate(cards).f1 == pytest.approx(0.6)
    with pytest.raises(ValueError):
        aggregate([])


@given(st.lists(st.tuples(counts, counts, counts, counts), min_size=1, max_size=8), st.randoms())
def test_aggregate_ignores_task_order(rows, rnd):
    cards = [score(ConfusionCounts(*r)) for r in rows]
    shuffled = cards[:]
    rnd.shuffle(shuffled)
    for a, b in zip(aggregate(cards).values(), aggregate(shuffled).values()):
        assert a == pytest.approx(b, abs=1e-12)


def test_micro_pools_counts():
    a, b = ConfusionCounts(1, 0, 1, 5), ConfusionCounts(3, 2, 0, 4)
    assert micro_aggregate([a, b]).precision == pytest.approx(4 / 6)
    with pytest.raises(ValueError):
        micro_aggregate([])


def test_scorecard_indexing():
    card = score(ConfusionCounts(1, 1, 1, 1))
    with pytest.raises(KeyError):
        card["accuracy"]
    assert list(card.as_dict()) == list(METRIC_NAMES)


def test_report_roundtrip(tmp_path):
    rows = [
        ResultRow("synthetic", "RF", "best meta F1", score(ConfusionCounts(3, 4, 5, 100))),
        ResultRow("synthetic", "Meta DS", "best meta F2", score(ConfusionCounts(7, 1, 2, 300))),
    ]
    report(rows, tmp_path / "r.csv", tmp_path / "r.txt")
    back = read_report(tmp_path / "r.csv")
    assert [(r.dataset, r.model, r.selection, r.card.values()) for r in back] == \
           [(r.dataset, r.model, r.selection, r.card.values()) for r in rows]
    header = (tmp_path / "r.txt").read_text().splitlines()[0].split()
    assert header[2:] == ["Precision", "Recall", "F1", "F2", "F0.5", "BAcc", "MCC"]
    assert "Meta DS (best meta F2)" in (tmp_path / "r.txt").read_text()


def test_empty_report_is_header_only():
    assert format_csv([]) == ",".join(RESULT_COLUMNS) + "\n"
    assert parse_csv(format_csv([])) == []
    assert len(format_table([]).splitlines()) == 2
    with pytest.raises(ValueError):
        parse_csv("a,b\n")
