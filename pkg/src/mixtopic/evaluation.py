"""Cross-validation, held-out likelihoods and missing-lab imputation scores."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MixTopicError, ValidationError
from .estimates import DEFAULT_SWEEPS, infer_mixtures, point_estimates
from .inference import PatientRecord, pack_corpus, patient_records, train

logger = logging.getLogger(__name__)

COMBINERS = ("as-written", "product", "conditional")
METRIC_HEADER = ["config", "fold", "metric"]


@dataclass
class CvPlan:
    n_folds: int = 5
    seed: int = 0
    stratify_labels: np.ndarray | None = None
    split_fraction: float = 0.5

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValidationError("n_folds must be >= 2")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValidationError("split_fraction must lie in (0, 1)")


def make_folds(D, plan):
    """Fold id per patient; stratified folds deal each class round-robin."""
    if plan.n_folds > D:
        raise ValidationError(f"{plan.n_folds} folds for {D} patients")
    rng = np.random.default_rng([plan.seed, 11])
    folds = np.empty(D, dtype=np.int64)
    if plan.stratify_labels is None:
        perm = rng.permutation(D)
        folds[perm] = np.arange(D) % plan.n_folds
        return folds
    labels = np.asarray(plan.stratify_labels)
    if len(labels) != D:
        raise ValidationError("stratify_labels length differs from D")
    offset = 0
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        folds[members] = (offset + np.arange(len(members))) % plan.n_folds
        offset += len(members)
    return folds


def split_record(rec, fraction, rng):
    """Split distinct token entries and observed tests into observe/evaluate halves.

    Known-missing tests stay with the observation half; tests moved to the
    evaluation half are absent from the observation half altogether.
    """
    nt = len(rec.tokens)
    tests = np.unique(rec.observed[:, 0]) if len(rec.observed) else np.zeros(0, dtype=np.int64)
    n = nt + len(tests)
    pick = np.zeros(n, dtype=bool)
    pick[rng.permutation(n)[: int(round(fraction * n))]] = True
    obs_tests = tests[pick[nt:]]
    in_obs = np.isin(rec.observed[:, 0], obs_tests)
    observe = PatientRecord(rec.tokens[pick[:nt]], rec.observed[in_obs], rec.missing)
    evaluate = PatientRecord(rec.tokens[~pick[:nt]], rec.observed[~in_obs], np.zeros(0, dtype=np.int64))
    return observe, evaluate


def split_records(records, fraction=0.5, seed=0):
    rng = np.random.default_rng([seed, 13])
    pairs = [split_record(r, fraction, rng) for r in records]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _lab_term(theta_row, psi, eta, combiner):
    """Per-topic lab factor for one value of one test under ``combiner``."""
    if combiner == "as-written":
        return float(np.dot(theta_row, psi + eta))
    if combiner == "product":
        return float(np.dot(theta_row, psi * eta))
    if combiner == "conditional":
        w = theta_row * (1.0 - psi)
        return float(np.dot(w, eta) / w.sum())
    raise ValidationError(f"unknown combiner {combiner!r}; choose from {COMBINERS}")


def predictive_loglik(theta, est, eval_records, combiner="as-written"):
    """Per-record log predictive likelihood of the evaluation halves.

    Tokens contribute ``count * log sum_k theta_k phi_wk``; each observed test
    value contributes ``count * log(lab term)``.  Tokens are skipped for
    lab-only models.
    """
    schema = est.schema
    fo, vo = schema.feature_offsets, schema.value_offsets
    out = np.zeros(len(eval_records))
    for i, rec in enumerate(eval_records):
        th = theta[i]
        total = 0.0
        if est.mixview and len(rec.tokens):
            g = fo[rec.tokens[:, 0]] + rec.tokens[:, 1]
            total += float(np.dot(rec.tokens[:, 2], np.log(est.phi_hat[g] @ th)))
        for l, v, c in rec.observed:
            total += c * math.log(_lab_term(th, est.psi_hat[l], est.eta_hat[vo[l] + v], combiner))
        out[i] = total
    return out


@dataclass
class HeldoutResult:
    per_patient: np.ndarray
    included: np.ndarray
    total: float
    mean: float


def heldout_predictive_loglik(est, records, split_fraction=0.5, seed=0, combiner="as-written",
                              n_sweeps=DEFAULT_SWEEPS, threads=1):
    """Infer mixtures from one half of every record and score the other half.

    Records whose evaluation half is empty are excluded from the mean.
    """
    observe, evaluate = split_records(records, split_fraction, seed)
    theta = infer_mixtures(observe, est, n_sweeps, threads)
    per = predictive_loglik(theta, est, evaluate, combiner)
    included = np.array([
        (len(r.tokens) > 0 and est.mixview) or len(r.observed) > 0 for r in evaluate
    ], dtype=bool)
    if not included.any():
        raise ValidationError("every evaluation half is empty")
    if not included.all():
        logger.warning("%d records with empty evaluation halves excluded", int((~included).sum()))
    total = float(per[included].sum())
    return HeldoutResult(per, included, total, total / int(included.sum()))


def missing_lab_scores(est, targets, theta, combiner="conditional"):
    """Log predictive probability of each hidden true value of a missing test."""
    if len(targets) == 0:
        raise ValidationError("empty target set")
    vo = est.schema.value_offsets
    out = np.empty(len(targets))
    for i, (j, l, v) in enumerate(zip(targets.patient, targets.lab, targets.value)):
        out[i] = math.log(_lab_term(theta[j], est.psi_hat[l], est.eta_hat[vo[l] + v], combiner))
    return out


def missing_lab_loglik(est, targets, theta, combiner="conditional"):
    """Mean over masked (patient, test) pairs of the hidden value's log probability."""
    return float(missing_lab_scores(est, targets, theta, combiner).mean())


# ---------------------------------------------------------------------------
# cross-validation drivers
# ---------------------------------------------------------------------------


@dataclass
class CvResult:
    rows: list = field(default_factory=list)
    failed: list = field(default_factory=list)

    def metric(self, config):
        return np.array([m for c, _, m in self.rows if c == config])

    def configs(self):
        seen = []
        for c, _, _ in self.rows:
            if c not in seen:
                seen.append(c)
        return seen

    def summary(self):
        """``(config, mean, standard error, n_folds)`` per config in first-seen order."""
        out = []
        for c in self.configs():
            m = self.metric(c)
            se = float(m.std(ddof=1) / math.sqrt(len(m))) if len(m) > 1 else float("nan")
            out.append((c, float(m.mean()), se, len(m)))
        return out

    def best(self):
        return max(self.summary(), key=lambda r: r[1])[0]


def config_label(cfg):
    return f"K={cfg.K}:{cfg.variant}"


def run_cv(corpus, plan, cfgs, labels=None, combiner="as-written", n_sweeps=DEFAULT_SWEEPS,
           threads=1):
    """Train on n-1 folds and score held-out predictive likelihood on the rest.

    ``labels`` names each config (defaults to :func:`config_label`); a fold
    whose training fails is recorded in ``failed`` and skipped.
    """
    folds = make_folds(corpus.D, plan)
    labels = labels or [config_label(c) for c in cfgs]
    records = patient_records(corpus)
    result = CvResult()
    for label, cfg in zip(labels, cfgs):
        for f in range(plan.n_folds):
            train_idx = np.flatnonzero(folds != f)
            test_idx = np.flatnonzero(folds == f)
            try:
                model = train(corpus.subset(train_idx), cfg)
                est = point_estimates(model)
                res = heldout_predictive_loglik(
                    est, [records[i] for i in test_idx], plan.split_fraction,
                    seed=plan.seed + f, combiner=combiner, n_sweeps=n_sweeps, threads=threads,
                )
            except MixTopicError as exc:
                logger.error("config %s fold %d failed: %s", label, f, exc)
                result.failed.append((label, f, str(exc)))
                continue
            result.rows.append((label, f, res.mean))
    return result


def missing_lab_cv(corpus, targets, plan, cfgs, labels=None, checkpoints=(), combiner="conditional",
                   n_sweeps=DEFAULT_SWEEPS, threads=1):
    """Missing-lab imputation scores of held-out patients across CV folds.

    Mixtures of held-out patients are inferred from everything observed about
    them; their masked tests are then scored.  ``checkpoints`` lists training
    iterations at which the same score is recorded, giving a curve per fold.
    Returns ``(final CvResult, {label: {fold: [(iteration, score), ...]}})``.
    """
    folds = make_folds(corpus.D, plan)
    labels = labels or [config_label(c) for c in cfgs]
    records = patient_records(corpus)
    result = CvResult()
    curves = {}
    for label, cfg in zip(labels, cfgs):
        curves[label] = {}
        for f in range(plan.n_folds):
            train_idx = np.flatnonzero(folds != f)
            test_idx = np.flatnonzero(folds == f)
            test_records = [records[i] for i in test_idx]
            fold_targets = targets.subset_patients(test_idx)
            curve = []

            def score(model):
                est = point_estimates(model)
                theta = infer_mixtures(test_records, est, n_sweeps, threads)
                return missing_lab_loglik(est, fold_targets, theta, combiner)

            def on_iter(model, curve=curve, score=score):
                if model.iteration in checkpoints:
                    curve.append((model.iteration, score(model)))

            sub = corpus.subset(train_idx)
            model = train(sub, cfg, callback=on_iter if checkpoints else None, packed=pack_corpus(sub, cfg.mixview))
            final = score(model)
            if not curve or curve[-1][0] != model.iteration:
                curve.append((model.iteration, final))
            curves[label][f] = curve
            result.rows.append((label, f, final))
    return result, curves


def write_metric_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_HEADER)
        for c, f, m in result.rows:
            w.writerow([c, f, repr(float(m))])


def read_metric_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if next(r) != METRIC_HEADER:
            raise ValidationError(f"{path}: not a metric table")
        return CvResult([(c, int(f), float(m)) for c, f, m in r])


def write_summary_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "mean", "stderr", "folds"])
        for c, mean, se, n in result.summary():
            w.writerow([c, repr(mean), repr(se), n])
