import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covidct.errors import UndefinedMetricError, ValidationError
from covidct.metrics import (
    ClassProbs,
    EvalReport,
    allocate_stratified,
    assign_test,
    auc_pair_oracle,
    auc_trapezoid,
    classification_report,
    collapse_binary,
    comparison_table,
    report_from_labels,
    roc_curve,
    split_dataset,
)
from covidct.volume_io import LABELS, DatasetManifest, ManifestEntry


def manifest(counts):
    entries = []
    for lab, n in zip(LABELS, counts):
        entries += [ManifestEntry(f"{lab}_{i}", f"{lab}_{i}.json", lab) for i in range(n)]
    return DatasetManifest(entries)


def split_sizes(m):
    return {s: len(m.by_split(s)) for s in ("train", "validation", "test")}


def test_split_90_cases():
    m = split_dataset(manifest((30, 30, 30)), seed=0)
    assert split_sizes(m) == {"train": 81, "validation": 9, "test": 0}
    for lab in LABELS:
        assert sum(e.split == "validation" for e in m.by_label(lab)) == 3


def test_split_single_class_minimal():
    m = split_dataset(manifest((10, 0, 0)), seed=0, require_all_classes=False)
    assert split_sizes(m)["train"] == 9 and split_sizes(m)["validation"] == 1


def test_split_empty_class_rejected():
    with pytest.raises(ValidationError):
        split_dataset(manifest((10, 0, 3)))


def test_split_deterministic_and_seed_dependent():
    a = split_dataset(manifest((30, 30, 30)), seed=5)
    b = split_dataset(manifest((30, 30, 30)), seed=5)
    c = split_dataset(manifest((30, 30, 30)), seed=6)
    assert [e.split for e in a] == [e.split for e in b]
    assert [e.split for e in a] != [e.split for e in c]


def test_split_with_test_holdout():
    m = assign_test(manifest((30, 30, 30)), 6, seed=1)
    m = split_dataset(m, seed=1)
    assert split_sizes(m) == {"train": 76, "validation": 8, "test": 6}


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40)), st.integers(0, 10), st.integers(0, 99))
def test_split_is_partition(counts, n_test, seed):
    n_test = min(n_test, sum(counts) - 3)
    m = assign_test(manifest(counts), n_test, seed)
    if any(not [e for e in m.by_label(lab) if e.split != "test"] for lab in LABELS):
        return
    m = split_dataset(m, seed=seed)
    assert all(e.split in ("train", "validation", "test") for e in m)
    assert len(m) == sum(counts)
    assert len(m.by_split("test")) == n_test


def test_allocate_largest_remainder():
    assert allocate_stratified([28, 28, 28], 8) == [3, 3, 2]
    assert allocate_stratified([30, 30, 30], 9) == [3, 3, 3]
    assert allocate_stratified([1, 0, 5], 0, min_per_class=1) == [1, 0, 1]


def test_roc_perfect_separation():
    c = roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert (0.0, 1.0) in list(zip(c.fpr, c.tpr))
    assert auc_trapezoid(c) == 1.0 and auc_pair_oracle([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_roc_all_tied():
    c = roc_curve([0.5] * 6, [1, 0, 1, 0, 0, 1])
    assert list(zip(c.fpr, c.tpr)) == [(0.0, 0.0), (1.0, 1.0)]
    assert auc_trapezoid(c) == 0.5 and auc_pair_oracle([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_roc_hand_example():
    # positives 0.9, 0.6; negatives 0.7, 0.2 -> 3 of 4 pairs ordered correctly
    scores, labels = [0.9, 0.6, 0.7, 0.2], [1, 1, 0, 0]
    assert auc_trapezoid(roc_curve(scores, labels)) == pytest.approx(0.75, abs=1e-12)
    assert auc_pair_oracle(scores, labels) == 0.75


def test_roc_single_class():
    with pytest.raises(UndefinedMetricError):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc_pair_oracle([0.1, 0.2], [0, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**32 - 1), st.booleans())
def test_auc_methods_agree(n, seed, coarse):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 5, n) / 4.0 if coarse else rng.random(n)
    c = roc_curve(scores, labels)
    assert abs(auc_trapezoid(c) - auc_pair_oracle(scores, labels)) <= 1e-9
    assert c.fpr[0] == 0 and c.tpr[0] == 0 and c.fpr[-1] == 1 and c.tpr[-1] == 1
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 100), st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 20, n) / 19.0
    a = roc_curve(scores, labels)
    b = roc_curve(np.exp(3 * scores) + 5, labels)
    assert a.fpr == b.fpr and a.tpr == b.tpr
    assert auc_trapezoid(a) == auc_trapezoid(b)


def test_collapse_binary_examples():
    assert collapse_binary(ClassProbs(0.1, 0.2, 0.7)) == (0.7, True)
    assert collapse_binary(ClassProbs(0.4, 0.35, 0.25)) == (0.25, False)
    third = 1 / 3
    score, pos = collapse_binary(ClassProbs(third, third, third))
    assert not pos and score == third


def test_class_probs_validation():
    with pytest.raises(ValidationError):
        ClassProbs(0.5, 0.5, 0.5)
    with pytest.raises(ValidationError):
        ClassProbs(-0.1, 0.6, 0.5)


def probs_for(predicted, confident=0.8):
    out = []
    for lab in predicted:
        p = [(1 - confident) / 2] * 3
        p[LABELS.index(lab)] = confident
        out.append(ClassProbs(*p))
    return out


def test_report_all_correct():
    truth = ["Control", "CAP", "Covid", "Covid"]
    r = classification_report(truth, probs_for(truth))
    assert (r.accuracy_3class, r.accuracy_2class, r.sensitivity, r.specificity, r.auc) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_report_hand_confusion():
    # 20 cases, 6 Covid: 5 TP, 1 FN; 14 non-Covid: 13 TN, 1 FP
    truth = ["Covid"] * 6 + ["Control"] * 7 + ["CAP"] * 7
    pred = ["Covid"] * 5 + ["CAP"] + ["Control"] * 7 + ["CAP"] * 6 + ["Covid"]
    r = classification_report(truth, probs_for(pred), "test")
    assert r.sensitivity == pytest.approx(5 / 6)
    assert r.specificity == pytest.approx(13 / 14)
    assert r.accuracy_2class == pytest.approx(18 / 20)
    assert r.accuracy_3class == pytest.approx(18 / 20)
    c = np.array(r.confusion)
    assert c.sum() == 20 and c.sum(axis=1).tolist() == [7, 7, 6]
    tp, fn, fp, tn = r.binary_counts()
    assert (tp / (tp + fn), tn / (tn + fp)) == (r.sensitivity, r.specificity)


def test_report_undefined_sensitivity():
    truth = ["Control"] * 4
    r = classification_report(truth, probs_for(["Control", "CAP", "Control", "Covid"]))
    assert math.isnan(r.sensitivity) and "sensitivity" in r.undefined and "auc" in r.undefined
    d = r.to_dict()
    assert d["sensitivity"] is None
    json.dumps(d)


def test_report_json_round_trip(tmp_path):
    truth = ["Covid", "Control", "CAP"]
    r = classification_report(truth, probs_for(["Covid", "Covid", "CAP"]), "validation")
    d = json.loads(r.save(tmp_path / "r.json").read_text())
    assert {"confusion", "accuracy_3class", "accuracy_2class", "sensitivity", "specificity", "auc", "n_cases",
            "split"} <= set(d)
    back = EvalReport.load(tmp_path / "r.json")
    assert back.to_dict() == r.to_dict()


def test_roc_csv(tmp_path):
    c = roc_curve([0.9, 0.6, 0.7, 0.2], [1, 1, 0, 0])
    lines = c.to_csv(tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr"
    assert len(lines) == len(c.fpr) + 1


def reader(sens_tp, n_pos=6, n_neg=14):
    truth = ["Covid"] * n_pos + ["Control"] * n_neg
    pred = ["Covid"] * sens_tp + ["Control"] * (n_pos - sens_tp) + ["Control"] * n_neg
    return report_from_labels(truth, pred)


def test_comparison_table_average():
    model = reader(5)
    r1 = reader(3, n_pos=4, n_neg=16)  # sensitivity 0.75
    r2 = reader(5)  # sensitivity 0.8333
    md, rows = comparison_table(model, [r1, r2])
    avg = rows[-1]
    assert avg["name"] == "Reader average"
    assert avg["sensitivity"] == pytest.approx((0.75 + 5 / 6) / 2)
    assert round(avg["sensitivity"], 2) == 0.79
    assert "Reader average" in md and md.count("\n") == 2 + 4
    json.dumps(rows)


def test_comparison_single_reader_and_empty():
    model, r = reader(5), reader(4)
    _, rows = comparison_table(model, [r])
    assert rows[-1]["sensitivity"] == rows[1]["sensitivity"]
    md, rows = comparison_table(model, [])
    assert len(rows) == 1 and rows[0]["name"] == "Model"


def test_comparison_mismatched_counts():
    with pytest.raises(ValidationError):
        comparison_table(reader(5), [reader(3, n_pos=4, n_neg=10)])
