"""
Equalized-odds disentanglement score for a continuous sensitive attribute.

Ages are cut into N groups; within each group we take the false positive
rate p_a and false negative rate n_a of a binary classifier, and score

    delta_eo(N) = sum_a |p_a - mean(p)| + sum_a |n_a - mean(n)|

Lower is fairer. With N=2 this is |p_0 - p_1| + |n_0 - n_1|.
"""
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, confusion_matrix

from errors import DegenerateGroupError, FormatError, InputError

PREDICTION_COLUMNS = ['id', 'true_label', 'pred_label', 'age']

VALID = 'valid'
DEGENERATE = 'degenerate'


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    true_label: int
    pred_label: int
    age: float

    def __post_init__(self):
        if self.true_label not in (0, 1) or self.pred_label not in (0, 1):
            raise InputError(f"record {self.sample_id}: labels must be 0 or 1")


def records_from_arrays(ids, true_labels, pred_labels, ages):
    return [PredictionRecord(str(i), int(t), int(p), float(a))
            for i, t, p, a in zip(ids, true_labels, pred_labels, ages)]


def _columns(preds):
    if not preds:
        raise InputError("no prediction records")
    y_true = np.array([r.true_label for r in preds], dtype=np.int64)
    y_pred = np.array([r.pred_label for r in preds], dtype=np.int64)
    ages = np.array([r.age for r in preds], dtype=np.float64)
    return y_true, y_pred, ages


# ============================================================
# Age groups
# ============================================================

@dataclass(frozen=True)
class AgeGrouping:
    n_groups: int
    boundaries: tuple
    status: str = VALID
    positives: tuple = ()
    negatives: tuple = ()

    def assign(self, ages):
        """Group index in [0, n_groups) per age; an age on a cut point goes to the lower group."""
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(ages, dtype=np.float64),
                               side='left')

    @property
    def is_valid(self):
        return self.status == VALID

    def to_dict(self):
        return {'n_groups': self.n_groups, 'boundaries': list(self.boundaries),
                'status': self.status, 'positives': list(self.positives),
                'negatives': list(self.negatives)}


def _equal_count_cuts(ages, n_groups):
    """
    Cut points for n_groups equal-count (quantile) groups on a sample that may
    hold tied ages. Cuts sit halfway between neighbouring distinct ages, so no
    group is empty; among those placements the one whose group sizes are
    closest to n / n_groups (summed squared deviation) wins.
    """
    distinct, counts = np.unique(ages, return_counts=True)
    below = np.concatenate([[0], np.cumsum(counts)])
    n_distinct = distinct.size
    target = ages.size / n_groups

    # cost[k, j]: k groups over the first j distinct ages; start[k, j]: where group k begins
    cost = np.full((n_groups + 1, n_distinct + 1), np.inf)
    start = np.zeros((n_groups + 1, n_distinct + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for k in range(1, n_groups + 1):
        for j in range(k, n_distinct + 1):
            i = np.arange(k - 1, j)
            total = cost[k - 1, i] + (below[j] - below[i] - target) ** 2
            best = int(np.argmin(total))
            cost[k, j], start[k, j] = total[best], i[best]

    starts, j = [], n_distinct
    for k in range(n_groups, 1, -1):
        j = start[k, j]
        starts.append(j)
    return [float(distinct[s - 1] + distinct[s]) / 2.0 for s in reversed(starts)]


def make_age_groups(ages, labels, n_groups):
    """
    Equal-count cut points over the supplied ages. The grouping is `valid` when
    every group holds at least one positive and one negative, else `degenerate`.
    """
    if n_groups < 1:
        raise InputError(f"need at least one age group, got {n_groups}")
    ages = np.asarray(ages, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if ages.shape != labels.shape:
        raise InputError("ages and labels must have the same length")
    distinct = np.unique(ages)
    if len(distinct) < n_groups:
        raise InputError(f"{len(distinct)} distinct ages cannot form {n_groups} groups")

    grouping = AgeGrouping(n_groups=n_groups, boundaries=tuple(_equal_count_cuts(ages, n_groups)))
    groups = grouping.assign(ages)
    positives = tuple(int(np.sum((groups == g) & (labels == 1))) for g in range(n_groups))
    negatives = tuple(int(np.sum((groups == g) & (labels == 0))) for g in range(n_groups))
    mixed = all(p > 0 and q > 0 for p, q in zip(positives, negatives))
    return AgeGrouping(n_groups=n_groups, boundaries=grouping.boundaries,
                       status=VALID if mixed else DEGENERATE,
                       positives=positives, negatives=negatives)


# ============================================================
# Rates and score
# ============================================================

@dataclass(frozen=True)
class GroupedOutcomes:
    fpr: np.ndarray            # NaN where a group has no actual negatives
    fnr: np.ndarray            # NaN where a group has no actual positives
    n_negatives: np.ndarray
    n_positives: np.ndarray

    @property
    def n_groups(self):
        return len(self.fpr)

    @property
    def mean_fpr(self):
        defined = self.fpr[~np.isnan(self.fpr)]
        return float(defined.mean()) if defined.size else float('nan')

    @property
    def mean_fnr(self):
        defined = self.fnr[~np.isnan(self.fnr)]
        return float(defined.mean()) if defined.size else float('nan')

    def undefined_groups(self):
        return [int(g) for g in np.flatnonzero(np.isnan(self.fpr) | np.isnan(self.fnr))]


def outcomes_from_rates(fpr, fnr):
    """GroupedOutcomes straight from rate vectors (counts set to 1 where defined)."""
    fpr = np.asarray(fpr, dtype=np.float64)
    fnr = np.asarray(fnr, dtype=np.float64)
    if fpr.shape != fnr.shape or fpr.ndim != 1 or fpr.size == 0:
        raise InputError("fpr and fnr must be nonempty vectors of equal length")
    return GroupedOutcomes(fpr=fpr, fnr=fnr,
                           n_negatives=(~np.isnan(fpr)).astype(np.int64),
                           n_positives=(~np.isnan(fnr)).astype(np.int64))


def grouped_rates(preds, grouping):
    """Per-group FP rate (FP / actual negatives) and FN rate (FN / actual positives)."""
    y_true, y_pred, ages = _columns(preds)
    groups = grouping.assign(ages)
    fpr = np.full(grouping.n_groups, np.nan)
    fnr = np.full(grouping.n_groups, np.nan)
    n_neg = np.zeros(grouping.n_groups, dtype=np.int64)
    n_pos = np.zeros(grouping.n_groups, dtype=np.int64)
    for g in range(grouping.n_groups):
        members = groups == g
        if not members.any():
            continue
        tn, fp, fn, tp = confusion_matrix(y_true[members], y_pred[members], labels=[0, 1]).ravel()
        n_neg[g] = tn + fp
        n_pos[g] = fn + tp
        if n_neg[g]:
            fpr[g] = fp / n_neg[g]
        if n_pos[g]:
            fnr[g] = fn / n_pos[g]
    return GroupedOutcomes(fpr=fpr, fnr=fnr, n_negatives=n_neg, n_positives=n_pos)


def delta_eo(outcomes):
    undefined = outcomes.undefined_groups()
    if undefined:
        g = undefined[0]
        raise DegenerateGroupError(
            f"age group {g} has {outcomes.n_negatives[g]} negatives and "
            f"{outcomes.n_positives[g]} positives; its error rates are undefined", group=g)
    return float(np.abs(outcomes.fpr - outcomes.fpr.mean()).sum()
                 + np.abs(outcomes.fnr - outcomes.fnr.mean()).sum())


@dataclass(frozen=True)
class BoundCheck:
    delta: float
    n_groups: int
    within_unconditional: bool     # delta <= 2N
    within_nontrivial: bool        # delta <= N
    in_nontrivial_envelope: bool   # every group rate <= 0.5
    regime: str                    # 'non-trivial' or 'trivial'
    passed: bool


def delta_eo_bound_check(outcomes, classifier_is_trivial):
    """
    Delta <= 2N always. For a non-trivial classifier whose group error rates
    stay at or below 0.5, each group contributes at most 1, so Delta <= N.
    """
    delta = delta_eo(outcomes)
    n = outcomes.n_groups
    envelope = bool(np.all(outcomes.fpr <= 0.5) and np.all(outcomes.fnr <= 0.5))
    trivial = bool(classifier_is_trivial) or not envelope
    within_2n = delta <= 2 * n + 1e-12
    within_n = delta <= n + 1e-12
    return BoundCheck(delta=delta, n_groups=n, within_unconditional=within_2n,
                      within_nontrivial=within_n, in_nontrivial_envelope=envelope,
                      regime='trivial' if trivial else 'non-trivial',
                      passed=within_2n and (trivial or within_n))


def accuracy(preds):
    y_true, y_pred, _ = _columns(preds)
    return float(accuracy_score(y_true, y_pred))


# ============================================================
# Trivial classifier
# ============================================================

def majority_predictions(labels):
    """Always-majority predictions; ties go to the positive class."""
    labels = np.asarray(labels).astype(np.int64)
    if labels.size == 0:
        raise InputError("no labels")
    majority = 1 if labels.mean() >= 0.5 else 0
    return np.full(labels.shape, majority, dtype=np.int64)


def is_trivial_classifier(preds):
    _, y_pred, _ = _columns(preds)
    return bool(np.all(y_pred == y_pred[0]))


# ============================================================
# Prediction CSV
# ============================================================

def write_predictions_csv(preds, path):
    df = pd.DataFrame([(r.sample_id, r.true_label, r.pred_label, r.age) for r in preds],
                      columns=PREDICTION_COLUMNS)
    df.to_csv(path, index=False)
    return path


def read_predictions_csv(path):
    try:
        df = pd.read_csv(path, dtype={'id': str})
    except FileNotFoundError:
        raise InputError(f"predictions file not found: {path}")
    except pd.errors.EmptyDataError:
        raise FormatError(f"predictions file is empty: {path}")
    if list(df.columns) != PREDICTION_COLUMNS:
        raise FormatError(f"header must be {','.join(PREDICTION_COLUMNS)}", row=1)
    for column in PREDICTION_COLUMNS[1:]:
        values = pd.to_numeric(df[column], errors='coerce')
        if values.isna().any():
            idx = values.isna().idxmax()
            raise FormatError(f"non-numeric value {df.at[idx, column]!r}", row=int(idx) + 2,
                              column=column)
    for column in ('true_label', 'pred_label'):
        bad = ~df[column].isin([0, 1])
        if bad.any():
            idx = bad.idxmax()
            raise FormatError("label must be 0 or 1", row=int(idx) + 2, column=column)
    return records_from_arrays(df['id'], df['true_label'], df['pred_label'], df['age'])
