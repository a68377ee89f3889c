"""Evaluation metrics and diagnostics.

Detection metrics treat ID as the positive class and higher scores as more
in-distribution.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .errors import LengthMismatch, NoPositives, OneClassOnly, TooFewSamples

MIN_PROBE_SAMPLES = 10


@dataclass
class DetectionEval:
    auroc: float
    aupr: float
    n_id: int
    n_ood: int


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise LengthMismatch(f"need equal non-empty lengths, got {preds.shape} and {labels.shape}")
    return float(np.mean(preds == labels))


def _split(scores, is_id):
    scores = np.asarray(scores, dtype=np.float64)
    is_id = np.asarray(is_id, dtype=bool)
    if scores.shape != is_id.shape:
        raise LengthMismatch("scores and flags differ in length")
    return scores, is_id


def auroc(scores, is_id) -> float:
    """Mann-Whitney estimate of P(score_ID > score_OOD), ties counted as 1/2."""
    scores, is_id = _split(scores, is_id)
    n_pos, n_neg = int(is_id.sum()), int((~is_id).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("AUROC needs at least one ID and one OOD score")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[is_id].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def aupr(scores, is_id) -> float:
    """Average precision: sum over distinct thresholds of (delta recall) * precision."""
    scores, is_id = _split(scores, is_id)
    n_pos = int(is_id.sum())
    if n_pos == 0:
        raise NoPositives("AUPR needs at least one ID score")
    order = np.argsort(-scores, kind="mergesort")
    s, pos = scores[order], is_id[order]
    tp = np.cumsum(pos)
    # last index of each run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def detection_eval(scores, is_id) -> DetectionEval:
    scores, is_id = _split(scores, is_id)
    return DetectionEval(auroc(scores, is_id), aupr(scores, is_id), int(is_id.sum()), int((~is_id).sum()))


def _digest(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return hashlib.sha256(repr(a.shape).encode() + a.tobytes()).digest()


def h_divergence_proxy(features_a, features_b, seed: int = 0) -> float:
    """Linear-probe estimate of the H-divergence between two samples.

    A logistic classifier separates A from B under 2-fold cross-validation;
    the result is ``2 * (1 - 2 * balanced_error)`` clamped to [0, 2]. This is
    a lower bound on the supremum over all hypotheses.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    if len(a) < MIN_PROBE_SAMPLES or len(b) < MIN_PROBE_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_PROBE_SAMPLES} samples per group, got {len(a)} and {len(b)}")
    # canonical order makes the estimate exactly symmetric
    if _digest(b) < _digest(a):
        a, b = b, a
    rng = np.random.default_rng(seed)
    folds_a = rng.permutation(len(a)) % 2
    folds_b = rng.permutation(len(b)) % 2
    X = np.vstack([a, b])
    y = np.r_[np.zeros(len(a)), np.ones(len(b))]
    folds = np.r_[folds_a, folds_b]
    errs_a, errs_b = [], []
    for k in (0, 1):
        tr, te = folds != k, folds == k
        scaler = StandardScaler().fit(X[tr])
        clf = LogisticRegression(max_iter=2000, class_weight="balanced")
        clf.fit(scaler.transform(X[tr]), y[tr])
        pred = clf.predict(scaler.transform(X[te]))
        yt = y[te]
        errs_a.append(np.sum(pred[yt == 0] != 0))
        errs_b.append(np.sum(pred[yt == 1] != 1))
    balanced_err = 0.5 * (np.sum(errs_a) / len(a) + np.sum(errs_b) / len(b))
    return float(np.clip(2 * (1 - 2 * balanced_err), 0.0, 2.0))


def h_divergence_matrix(features, groups, seed: int = 0) -> np.ndarray:
    """Pairwise proxies between the groups of ``features``; ``nan`` where a group is too small."""
    features = np.asarray(features)
    groups = np.asarray(groups)
    labels = np.unique(groups)
    out = np.zeros((len(labels), len(labels)))
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            fa, fb = features[groups == labels[i]], features[groups == labels[j]]
            try:
                v = h_divergence_proxy(fa, fb, seed)
            except TooFewSamples:
                v = np.nan
            out[i, j] = out[j, i] = v
    return out


def mean_pairwise(matrix: np.ndarray) -> float:
    iu = np.triu_indices(len(matrix), 1)
    vals = matrix[iu]
    return float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")


def domain_agreement(d_pseudo, d_planted) -> float:
    """Best accuracy over one-to-one relabelings (Hungarian matching; unequal label counts pad with empty labels)."""
    a, b = np.asarray(d_pseudo), np.asarray(d_planted)
    if a.shape != b.shape or a.size == 0:
        raise LengthMismatch("assignment vectors differ in length or are empty")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    conf = np.zeros((len(ua), len(ub)))
    np.add.at(conf, (ia, ib), 1)
    rows, cols = linear_sum_assignment(conf, maximize=True)
    return float(conf[rows, cols].sum() / a.size)
