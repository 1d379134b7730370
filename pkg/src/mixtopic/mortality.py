"""Outcome prediction from patient mixtures: L1 logistic regression and ROC/PR scoring."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import NumericalError, ValidationError
from .estimates import DEFAULT_SWEEPS, infer_mixtures, point_estimates, top_features
from .evaluation import CvPlan, make_folds
from .inference import patient_records, train

logger = logging.getLogger(__name__)

LOSSES = ("logistic", "squared")
PATH_POINTS = 20
PATH_RATIO = 1e-3
# relative slack so the all-zero penalty survives rounding in the intercept step
KILL_SLACK = 1e-10
_P_LO = np.finfo(np.float64).tiny
_P_HI = 1.0 - np.finfo(np.float64).epsneg


@dataclass
class L1LogitModel:
    weights: np.ndarray
    intercept: float
    reg: float
    loss: str = "logistic"
    history: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def K(self):
        return len(self.weights)


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValidationError("features must be a 2-D array")
    if len(y) != X.shape[0]:
        raise ValidationError(f"{X.shape[0]} feature rows but {len(y)} labels")
    if not np.all(np.isfinite(X)):
        raise ValidationError("non-finite features")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    y = y.astype(np.float64)
    if y.min() == y.max():
        raise ValidationError("labels contain a single class")
    return X, y


def _data_loss(eta, y, loss):
    if loss == "logistic":
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta))
    return float(0.5 * np.mean((y - eta) ** 2))


def l1_objective(model, X, y):
    eta = model.intercept + X @ model.weights
    return _data_loss(eta, y, model.loss) + model.reg * float(np.abs(model.weights).sum())


def _soft(x, t):
    return math.copysign(max(abs(x) - t, 0.0), x)


def base_intercept(y, loss="logistic"):
    rate = float(np.mean(y))
    return math.log(rate / (1.0 - rate)) if loss == "logistic" else rate


def reg_max(X, y, loss="logistic"):
    """Smallest penalty at which every weight is exactly zero."""
    X, y = _check_xy(X, y)
    b0 = base_intercept(y, loss)
    resid = (_sigmoid(np.full(len(y), b0)) if loss == "logistic" else np.full(len(y), b0)) - y
    if not X.shape[1]:
        return 0.0
    return float(np.max(np.abs(X.T @ resid)) / len(y)) * (1.0 + KILL_SLACK)


def fit_l1_logistic(X, y, reg, max_iters=1000, tol=1e-8, loss="logistic", warm=None):
    """Minimize mean loss + ``reg * sum|w|`` by cyclic coordinate descent.

    Each coordinate takes a proximal Newton step; when that step fails to
    lower the objective it is replaced by the step under the global
    curvature bound (1/4 for the logistic loss), which always does.  The
    intercept is unpenalized.  Stops when the largest coordinate change in a
    sweep falls below ``tol``.
    """
    if loss not in LOSSES:
        raise ValidationError(f"unknown loss {loss!r}")
    if reg < 0 or not math.isfinite(reg):
        raise ValidationError("reg must be finite and >= 0")
    X, y = _check_xy(X, y)
    n, K = X.shape
    if warm is not None:
        w = np.array(warm.weights, dtype=np.float64)
        b = float(warm.intercept)
    else:
        w = np.zeros(K)
        b = base_intercept(y, loss)
    eta = b + X @ w
    bound = 0.25 if loss == "logistic" else 1.0
    col_bound = bound * np.mean(X * X, axis=0)

    def obj(eta_, w_):
        return _data_loss(eta_, y, loss) + reg * float(np.abs(w_).sum())

    cur = obj(eta, w)
    if not math.isfinite(cur):
        raise NumericalError("non-finite objective at the starting point")
    history = [cur]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        max_change = 0.0
        # intercept
        p = _sigmoid(eta) if loss == "logistic" else eta
        g = float(np.mean(p - y))
        h = float(np.mean(p * (1 - p))) if loss == "logistic" else 1.0
        for curv in (h, bound):
            if curv <= 0:
                continue
            d = -g / curv
            new = obj(eta + d, w)
            if new <= cur:
                b += d
                eta = eta + d
                cur = new
                max_change = max(max_change, abs(d))
                break
        for k in range(K):
            xk = X[:, k]
            if col_bound[k] == 0.0:
                continue
            p = _sigmoid(eta) if loss == "logistic" else eta
            g = float(np.mean(xk * (p - y)))
            h = float(np.mean(xk * xk * p * (1 - p))) if loss == "logistic" else col_bound[k]
            old = w[k]
            for curv in (h, col_bound[k]):
                if curv <= 0:
                    continue
                nk = _soft(curv * old - g, reg) / curv
                d = nk - old
                if d == 0.0:
                    break
                eta_new = eta + d * xk
                w[k] = nk
                new = obj(eta_new, w)
                if new <= cur:
                    eta = eta_new
                    cur = new
                    max_change = max(max_change, abs(d))
                    break
                w[k] = old
        if not math.isfinite(cur):
            raise NumericalError("non-finite objective during coordinate descent")
        history.append(cur)
        if max_change < tol:
            converged = True
            break
    return L1LogitModel(w, b, float(reg), loss, history, it, converged)


def predict_risk(model, theta):
    """``logistic(intercept + w . theta)`` for one row or a stack of rows.

    Results are clipped to the open unit interval.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != model.K:
        raise ValidationError(f"feature dimension {theta.shape[-1]} != model dimension {model.K}")
    eta = model.intercept + theta @ model.weights
    p = np.clip(_sigmoid(np.atleast_1d(eta)), _P_LO, _P_HI)
    return p.reshape(np.shape(eta))


def reg_path(X, y, n_points=PATH_POINTS, ratio=PATH_RATIO):
    """Log-spaced penalties from the all-zero point downward."""
    top = reg_max(X, y)
    if top <= 0:
        return np.zeros(1)
    return np.geomspace(top, top * ratio, n_points)


def fit_path(X, y, regs, loss="logistic", max_iters=1000, tol=1e-8):
    """Warm-started fits along ``regs`` (in the given order)."""
    models = []
    warm = None
    for r in regs:
        warm = fit_l1_logistic(X, y, r, max_iters, tol, loss, warm)
        models.append(warm)
    return models


def select_reg(X, y, n_folds=5, seed=0, regs=None, loss="logistic"):
    """Penalty with the lowest inner-CV held-out log loss (ties go to the larger penalty)."""
    X, y = _check_xy(X, y)
    if regs is None:
        regs = reg_path(X, y)
    n_pos = int(y.sum())
    n_folds = max(2, min(n_folds, n_pos, len(y) - n_pos))
    folds = make_folds(len(y), CvPlan(n_folds, seed, y.astype(np.int64)))
    losses = np.zeros(len(regs))
    for f in range(n_folds):
        tr, te = folds != f, folds == f
        if y[tr].min() == y[tr].max():
            continue
        for i, m in enumerate(fit_path(X[tr], y[tr], regs, loss)):
            p = np.clip(predict_risk(m, X[te]), 1e-15, 1 - 1e-15)
            losses[i] -= float(np.sum(y[te] * np.log(p) + (1 - y[te]) * np.log1p(-p)))
    return float(regs[int(np.argmin(losses))]), losses


# ---------------------------------------------------------------------------
# ROC / PR
# ---------------------------------------------------------------------------


@dataclass
class RocPr:
    auroc: float
    auprc: float
    roc: np.ndarray  # rows (fpr, tpr)
    pr: np.ndarray  # rows (recall, precision)


def roc_pr_metrics(scores, labels):
    """AUROC by rank counting (ties earn half credit) and step-interpolated AUPRC."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be 1-D and equally long")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    y = y.astype(bool)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValidationError("labels contain a single class")
    if not np.all(np.isfinite(s)):
        raise ValidationError("non-finite scores")
    ranks = rankdata(s)
    auroc = (float(ranks[y].sum()) - n1 * (n1 + 1) / 2.0) / (n1 * n0)

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]
    tp = np.cumsum(y_sorted)[last].astype(np.float64)
    fp = (last + 1) - tp
    tpr, fpr = tp / n1, fp / n0
    precision = tp / (tp + fp)
    roc = np.column_stack([np.r_[0.0, fpr], np.r_[0.0, tpr]])
    pr = np.column_stack([np.r_[0.0, tpr], np.r_[1.0, precision]])
    auprc = float(np.sum(np.diff(np.r_[0.0, tpr]) * precision))
    return RocPr(float(auroc), auprc, roc, pr)


# ---------------------------------------------------------------------------
# cross-validated and prospective pipelines
# ---------------------------------------------------------------------------


@dataclass
class PredictionResult:
    patient_ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    folds: np.ndarray
    metrics: RocPr
    models: list = field(default_factory=list)


def _check_labels(labels, D):
    labels = np.asarray(labels)
    if labels.shape != (D,):
        raise ValidationError(f"expected {D} labels, got {labels.shape[0] if labels.ndim else 0}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    return labels.astype(np.int64)


def _fit_fold(theta, labels, reg, loss, seed, fold):
    if labels.min() == labels.max():
        raise ValidationError(f"fold {fold}: training labels contain a single class")
    if reg is None:
        reg, _ = select_reg(theta, labels, seed=seed, loss=loss)
    return fit_l1_logistic(theta, labels, reg, loss=loss)


def embedding_cv(theta, labels, plan, reg=None, loss="logistic", patient_ids=None):
    """Cross-validated L1 logistic regression on fixed mixtures, predictions pooled."""
    theta = np.asarray(theta, dtype=np.float64)
    labels = _check_labels(labels, theta.shape[0])
    if plan.stratify_labels is None:
        plan = CvPlan(plan.n_folds, plan.seed, labels, plan.split_fraction)
    folds = make_folds(len(labels), plan)
    scores = np.zeros(len(labels))
    models = []
    for f in range(plan.n_folds):
        tr, te = folds != f, folds == f
        m = _fit_fold(theta[tr], labels[tr], reg, loss, plan.seed + f, f)
        scores[te] = predict_risk(m, theta[te])
        models.append(m)
    ids = np.arange(1, len(labels) + 1) if patient_ids is None else np.asarray(patient_ids)
    return PredictionResult(ids, scores, labels, folds, roc_pr_metrics(scores, labels), models)


def mortality_cv(corpus, labels, cfg, plan, reg=None, loss="logistic", n_sweeps=DEFAULT_SWEEPS,
                 threads=1):
    """Per fold: fit topics without labels, infer mixtures, fit the L1 model, score the held fold.

    Returns pooled predictions; ``models`` holds ``(estimates, logit model)`` per fold.
    """
    labels = _check_labels(labels, corpus.D)
    if plan.stratify_labels is None:
        plan = CvPlan(plan.n_folds, plan.seed, labels, plan.split_fraction)
    folds = make_folds(corpus.D, plan)
    records = patient_records(corpus)
    scores = np.zeros(corpus.D)
    models = []
    for f in range(plan.n_folds):
        tr, te = np.flatnonzero(folds != f), np.flatnonzero(folds == f)
        if labels[tr].min() == labels[tr].max():
            raise ValidationError(f"fold {f}: training labels contain a single class")
        est = point_estimates(train(corpus.subset(tr), cfg))
        th_tr = infer_mixtures([records[i] for i in tr], est, n_sweeps, threads)
        m = _fit_fold(th_tr, labels[tr], reg, loss, plan.seed + f, f)
        th_te = infer_mixtures([records[i] for i in te], est, n_sweeps, threads)
        scores[te] = predict_risk(m, th_te)
        models.append((est, m))
    return PredictionResult(corpus.patient_ids.copy(), scores, labels, folds,
                            roc_pr_metrics(scores, labels), models)


def prospective_eval(est, model, early_records, labels, n_sweeps=DEFAULT_SWEEPS, threads=1,
                     patient_ids=None):
    """Score outcomes from mixtures inferred on early records only."""
    labels = _check_labels(labels, len(early_records))
    theta = infer_mixtures(early_records, est, n_sweeps, threads)
    scores = predict_risk(model, theta)
    ids = np.arange(1, len(labels) + 1) if patient_ids is None else np.asarray(patient_ids)
    return PredictionResult(ids, scores, labels, np.zeros(len(labels), dtype=np.int64),
                            roc_pr_metrics(scores, labels), [(est, model)])


@dataclass
class PredictiveTopic:
    topic: int  # 0-based
    weight: float
    report: object


def top_predictive_topics(model, est, n, top_n=10):
    """Topics with nonzero weight: ``(most positive first, most negative first)``, ``n`` each."""
    w = model.weights
    if len(w) != est.K:
        raise ValidationError("logit model and estimates disagree on K")
    idx = np.arange(len(w))
    pos = idx[w > 0][np.lexsort((idx[w > 0], -w[w > 0]))][:n]
    neg = idx[w < 0][np.lexsort((idx[w < 0], w[w < 0]))][:n]

    def rep(ks):
        return [PredictiveTopic(int(k), float(w[k]), top_features(est, int(k), top_n)) for k in ks]

    return rep(pos), rep(neg)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def write_scores(result, path):
    _write(path, ["patient_id", "score", "label"],
           ([int(i), repr(float(s)), int(l)] for i, s, l in
            zip(result.patient_ids, result.scores, result.labels)))


def write_roc(metrics, path):
    _write(path, ["fpr", "tpr"], ([repr(float(a)), repr(float(b))] for a, b in metrics.roc))


def write_pr(metrics, path):
    _write(path, ["recall", "precision"], ([repr(float(a)), repr(float(b))] for a, b in metrics.pr))


def write_coefficients(model, path):
    _write(path, ["topic", "weight"],
           ([k + 1, repr(float(x))] for k, x in enumerate(model.weights)))


def read_scores(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if next(r) != ["patient_id", "score", "label"]:
            raise ValidationError(f"{path}: not a score table")
        rows = list(r)
    ids = np.array([int(x[0]) for x in rows], dtype=np.int64)
    return ids, np.array([float(x[1]) for x in rows]), np.array([int(x[2]) for x in rows], dtype=np.int64)


def read_labels(path, patient_ids=None):
    """Labels from a ``patient_id,label`` CSV, ordered like ``patient_ids`` when given."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["patient_id", "label"]:
            raise ValidationError(f"{path}: expected header patient_id,label")
        table = {}
        for lineno, row in enumerate(r, start=2):
            try:
                table[int(row[0])] = int(row[1])
            except (ValueError, IndexError):
                raise ValidationError(f"{path}:{lineno}: malformed row") from None
    if patient_ids is None:
        ids = np.array(sorted(table), dtype=np.int64)
    else:
        ids = np.asarray(patient_ids, dtype=np.int64)
        missing = [int(i) for i in ids if int(i) not in table]
        if missing:
            raise ValidationError(f"{path}: no label for {len(missing)} patients (first {missing[0]})")
    return ids, np.array([table[int(i)] for i in ids], dtype=np.int64)
