"""Dataset splitting and case-level evaluation metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .preprocess import round_half_away
from .volume_io import LABELS, DatasetManifest, ManifestEntry

COVID = LABELS.index("Covid")


# --------------------------------------------------------------------------
# splitting


def allocate_stratified(sizes: Sequence[int], total: int, min_per_class: int = 0) -> List[int]:
    """Distribute ``total`` picks across strata proportionally (largest remainder).

    Remainder ties go to the earlier stratum.  Every non-empty stratum then
    receives at least ``min_per_class`` (capped at its size).
    """
    n = sum(sizes)
    if n == 0:
        return [0] * len(sizes)
    quotas = [total * s / n for s in sizes]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return [min(s, max(c, min_per_class)) if s > 0 else 0 for c, s in zip(counts, sizes)]


def _strata(entries: Sequence[ManifestEntry]) -> Dict[str, List[ManifestEntry]]:
    groups = {label: [] for label in LABELS}
    for e in entries:
        groups[e.label].append(e)
    return groups


def _pick(entries: List[ManifestEntry], k: int, rng: np.random.Generator) -> List[ManifestEntry]:
    ordered = sorted(entries, key=lambda e: e.case_id)
    idx = rng.permutation(len(ordered))[:k]
    return [ordered[i] for i in sorted(idx)]


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.9, seed: int = 0,
                  require_all_classes: bool = True) -> DatasetManifest:
    """Stratified train/validation split of every case not already marked ``test``.

    The validation total is ``round((1 - train_fraction) * n)``, spread over
    classes by largest remainder, with at least one validation case per
    non-empty class.
    """
    if not 0 < train_fraction < 1:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    pool = [e for e in manifest if e.split != "test"]
    groups = _strata(pool)
    present = [lab for lab in LABELS if groups[lab]]
    if not present:
        raise ValidationError("manifest has no cases to split")
    if require_all_classes and len(present) < len(LABELS):
        missing = [lab for lab in LABELS if not groups[lab]]
        raise ValidationError(f"empty class(es): {missing}")
    sizes = [len(groups[lab]) for lab in LABELS]
    n_val = round_half_away((1.0 - train_fraction) * len(pool))
    val_counts = allocate_stratified(sizes, n_val, min_per_class=1)
    rng = np.random.default_rng(seed)
    val_ids = set()
    for lab, k in zip(LABELS, val_counts):
        val_ids.update(e.case_id for e in _pick(groups[lab], k, rng))
    out = []
    for e in manifest:
        if e.split == "test":
            out.append(replace(e))
        else:
            out.append(replace(e, split="validation" if e.case_id in val_ids else "train"))
    return DatasetManifest(out, manifest.schema_version)


def assign_test(manifest: DatasetManifest, n_test: int, seed: int = 0) -> DatasetManifest:
    """Mark a stratified held-out test set of ``n_test`` cases."""
    groups = _strata(list(manifest))
    counts = allocate_stratified([len(groups[lab]) for lab in LABELS], n_test)
    rng = np.random.default_rng(seed)
    test_ids = set()
    for lab, k in zip(LABELS, counts):
        test_ids.update(e.case_id for e in _pick(groups[lab], k, rng))
    out = [replace(e, split="test" if e.case_id in test_ids else e.split) for e in manifest]
    return DatasetManifest(out, manifest.schema_version)


# --------------------------------------------------------------------------
# ROC / AUC


@dataclass
class RocCurve:
    thresholds: List[float]
    tpr: List[float]
    fpr: List[float]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, r in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])
        return path


def _binary_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have the same length")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC/AUC need at least one positive and one negative")
    return scores, labels, n_pos, n_neg


def roc_curve(scores, labels) -> RocCurve:
    """ROC by sweeping unique scores from high to low; tied scores form one step.

    The first point uses threshold +inf, i.e. (fpr, tpr) = (0, 0).
    """
    scores, labels, n_pos, n_neg = _binary_inputs(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    thresholds = [math.inf] + s[ends].tolist()
    tpr = [0.0] + (tp / n_pos).tolist()
    fpr = [0.0] + (fp / n_neg).tolist()
    return RocCurve(thresholds, tpr, fpr)


def auc_trapezoid(curve: RocCurve) -> float:
    fpr = np.asarray(curve.fpr)
    tpr = np.asarray(curve.tpr)
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_pair_oracle(scores, labels) -> float:
    """Probability that a positive outscores a negative, ties counted half."""
    scores, labels, n_pos, n_neg = _binary_inputs(scores, labels)
    pos = scores[labels][:, None]
    neg = scores[~labels][None, :]
    wins = np.sum(pos > neg) + 0.5 * np.sum(pos == neg)
    return float(wins / (n_pos * n_neg))


# --------------------------------------------------------------------------
# case-level report


@dataclass(frozen=True)
class ClassProbs:
    p_control: float
    p_cap: float
    p_covid: float

    def __post_init__(self):
        p = self.as_array()
        if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6:
            raise ValidationError(f"invalid class probabilities {tuple(p)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_control, self.p_cap, self.p_covid], dtype=np.float64)

    @property
    def label(self) -> str:
        return LABELS[int(np.argmax(self.as_array()))]

    @classmethod
    def from_array(cls, p) -> "ClassProbs":
        p = [float(v) for v in p]
        return cls(*p)

    @classmethod
    def one_hot(cls, label: str) -> "ClassProbs":
        p = [0.0, 0.0, 0.0]
        p[LABELS.index(label)] = 1.0
        return cls(*p)


def collapse_binary(probs: ClassProbs):
    """Covid-vs-rest view: (p_covid score, argmax == Covid).

    ``np.argmax`` returns the first maximum, so ties resolve Control < CAP < Covid.
    """
    p = probs.as_array()
    return float(p[COVID]), int(np.argmax(p)) == COVID


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


@dataclass
class EvalReport:
    confusion: List[List[int]]
    accuracy_3class: float
    accuracy_2class: float
    sensitivity: float
    specificity: float
    auc: float
    n_cases: int
    split: str = ""
    undefined: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "confusion": [list(map(int, row)) for row in self.confusion],
            "n_cases": int(self.n_cases),
            "split": self.split,
            "undefined": list(self.undefined),
        }
        # JSON has no NaN; undefined rates are null and listed in "undefined"
        for key in ("accuracy_3class", "accuracy_2class", "sensitivity", "specificity", "auc"):
            v = getattr(self, key)
            d[key] = None if v is None or math.isnan(v) else float(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rates = {
            k: (math.nan if d[k] is None else float(d[k]))
            for k in ("accuracy_3class", "accuracy_2class", "sensitivity", "specificity", "auc")
        }
        return cls(confusion=[list(map(int, r)) for r in d["confusion"]], n_cases=int(d["n_cases"]),
                   split=d.get("split", ""), undefined=list(d.get("undefined", [])), **rates)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def binary_counts(self):
        """(TP, FN, FP, TN) with Covid positive, recomputed from the confusion matrix.

        A case is called positive exactly when its argmax is Covid, so the
        binary counts are sums over the 3x3 matrix.
        """
        c = np.asarray(self.confusion)
        tp = int(c[COVID, COVID])
        fn = int(c[COVID].sum() - tp)
        fp = int(c[:, COVID].sum() - tp)
        tn = int(c.sum() - tp - fn - fp)
        return tp, fn, fp, tn


def classification_report(truth: Sequence[str], probs: Sequence[ClassProbs], split: str = "") -> EvalReport:
    if len(truth) == 0 or len(truth) != len(probs):
        raise ValidationError("truth and probs must be non-empty and aligned")
    confusion = np.zeros((3, 3), dtype=np.int64)
    scores = []
    positives = []
    for lab, p in zip(truth, probs):
        if lab not in LABELS:
            raise ValidationError(f"unknown label {lab!r}")
        confusion[LABELS.index(lab), LABELS.index(p.label)] += 1
        score, _ = collapse_binary(p)
        scores.append(score)
        positives.append(lab == "Covid")
    n = len(truth)
    tp = int(confusion[COVID, COVID])
    fn = int(confusion[COVID].sum()) - tp
    fp = int(confusion[:, COVID].sum()) - tp
    tn = n - tp - fn - fp
    undefined = []
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    if math.isnan(sens):
        undefined.append("sensitivity")
    if math.isnan(spec):
        undefined.append("specificity")
    try:
        auc = auc_trapezoid(roc_curve(scores, positives))
    except UndefinedMetricError:
        auc = math.nan
        undefined.append("auc")
    return EvalReport(
        confusion=confusion.tolist(),
        accuracy_3class=float(np.trace(confusion)) / n,
        accuracy_2class=(tp + tn) / n,
        sensitivity=sens,
        specificity=spec,
        auc=auc,
        n_cases=n,
        split=split,
        undefined=undefined,
    )


def report_from_labels(truth: Sequence[str], predicted: Sequence[str], split: str = "") -> EvalReport:
    """Report for hard predictions (e.g. a human reader): one-hot probabilities."""
    return classification_report(truth, [ClassProbs.one_hot(p) for p in predicted], split)


# --------------------------------------------------------------------------
# model vs readers


_TABLE_FIELDS = ("accuracy_3class", "accuracy_2class", "sensitivity", "specificity", "auc")


def comparison_table(model: EvalReport, readers: Sequence[EvalReport] = (), reader_names: Optional[Sequence[str]] = None):
    """Rows for the model, each reader and the reader average.

    Returns ``(markdown, rows)``; ``rows`` is JSON-serialisable.
    """
    for r in readers:
        if r.n_cases != model.n_cases:
            raise ValidationError(f"reader report covers {r.n_cases} cases, model covers {model.n_cases}")
    names = list(reader_names) if reader_names is not None else [f"Reader {i + 1}" for i in range(len(readers))]
    if len(names) != len(readers):
        raise ValidationError("reader_names must match readers")

    def row(name, rep):
        return {"name": name, **{k: _none_if_nan(getattr(rep, k)) for k in _TABLE_FIELDS}}

    rows = [row("Model", model)] + [row(n, r) for n, r in zip(names, readers)]
    if readers:
        avg = {"name": "Reader average"}
        for k in _TABLE_FIELDS:
            vals = [getattr(r, k) for r in readers]
            avg[k] = None if any(math.isnan(v) for v in vals) else float(np.mean(vals))
        rows.append(avg)

    header = "| | Accuracy (3-class) | Accuracy (2-class) | Sensitivity | Specificity | AUC |"
    lines = [header, "|---|---|---|---|---|---|"]
    for r in rows:
        cells = ["n/a" if r[k] is None else f"{r[k]:.4f}" for k in _TABLE_FIELDS]
        lines.append(f"| {r['name']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n", rows


def _none_if_nan(v):
    return None if v is None or math.isnan(v) else float(v)
