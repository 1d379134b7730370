"""Point estimates of topic parameters and per-patient mixtures."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NumericalError, ValidationError
from .inference import PatientRecord, pack_records, patient_records

logger = logging.getLogger(__name__)

DEFAULT_SWEEPS = 20


@dataclass
class TopicEstimates:
    """Normalized topic parameters plus the hyperparameters they came from.

    ``phi_hat`` is flat over regular features (features x K), ``eta_hat`` flat
    over lab value slots (slots x K) and ``psi_hat`` is labs x K.
    """

    schema: object
    phi_hat: np.ndarray
    eta_hat: np.ndarray
    psi_hat: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    nmar: bool = True
    mixview: bool = True

    @property
    def K(self):
        return len(self.alpha)

    def phi(self, t):
        fo = self.schema.feature_offsets
        return self.phi_hat[fo[t]:fo[t + 1]]

    def eta(self, l):
        """``K x V_l`` value distribution of lab ``l``."""
        vo = self.schema.value_offsets
        return self.eta_hat[vo[l]:vo[l + 1]].T


def _segment_normalize(x, offsets):
    if len(offsets) < 2:
        return x.copy()
    sums = np.add.reduceat(x, offsets[:-1], axis=0)
    seg = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    return x / sums[seg]


def point_estimates(model):
    """Posterior-mean style estimates from a trained model's expected counts."""
    schema, hp, st = model.schema, model.hyper, model.stats
    pos = lambda x: np.maximum(x, 0.0)  # noqa: E731
    phi = _segment_normalize(hp.beta[:, None] + pos(st.nwk), schema.feature_offsets)
    eta = _segment_normalize(hp.zeta[:, None] + pos(st.mkv), schema.value_offsets)
    a, b = hp.a[:, None], hp.b[:, None]
    psi = (a + pos(st.plk)) / (a + pos(st.plk) + b + pos(st.qlk))
    est = TopicEstimates(
        schema, phi, eta, psi, hp.alpha.copy(), hp.beta.copy(), hp.zeta.copy(),
        hp.a.copy(), hp.b.copy(), model.config.nmar, model.config.mixview,
    )
    for name in ("phi_hat", "eta_hat", "psi_hat"):
        if not np.all(np.isfinite(getattr(est, name))):
            raise NumericalError(f"non-finite {name}")
    return est


def clean_records(records, schema):
    """Drop rows outside ``schema``; returns the cleaned records and a drop count."""
    dropped = 0
    out = []
    for rec in records:
        t = rec.tokens
        ok_t = (t[:, 0] >= 0) & (t[:, 0] < schema.T) & (t[:, 2] >= 1)
        ok_t[ok_t] &= (t[ok_t, 1] >= 0) & (t[ok_t, 1] < schema.W[t[ok_t, 0]])
        o = rec.observed
        ok_o = (o[:, 0] >= 0) & (o[:, 0] < schema.L) & (o[:, 2] >= 1)
        ok_o[ok_o] &= (o[ok_o, 1] >= 0) & (o[ok_o, 1] < schema.V[o[ok_o, 0]])
        m = rec.missing
        ok_m = (m >= 0) & (m < schema.L)
        dropped += int((~ok_t).sum() + (~ok_o).sum() + (~ok_m).sum())
        out.append(PatientRecord(t[ok_t], o[ok_o], m[ok_m]))
    if dropped:
        logger.warning("ignored %d rows outside the model schema", dropped)
    return out, dropped


def infer_mixtures(records, est, n_sweeps=DEFAULT_SWEEPS, threads=1):
    """Mixtures ``theta_hat`` (records x K) with topic parameters held fixed.

    Under the NMAR variant, tests listed as missing in a record pull its
    mixture toward topics that rarely order them.
    """
    records, _ = clean_records(records, est.schema)
    K = est.K
    packed = pack_records(est.schema, records, est.mixview)
    D = packed.D
    gamma = np.zeros((packed.n_tok, K))
    lam = np.zeros((packed.n_obs, K))
    pi = np.zeros((packed.n_mis, K, packed.vmax))
    njk = np.zeros((D, K))
    mjk = np.zeros((D, K))
    with np.errstate(divide="ignore"):
        log_phi = np.log(est.phi_hat)
        log_eta = np.log(est.eta_hat)
        log_psi = np.log(est.psi_hat)
        log_1m_psi = np.log1p(-est.psi_hat)

    def run(bounds):
        lo, hi = bounds
        bad = np.full(1, -1, dtype=np.int64)
        status = _kernels.infer_range(
            lo, hi, K, est.nmar, int(n_sweeps),
            packed.tok_ptr, packed.tok_g, packed.tok_c, gamma,
            packed.obs_ptr, packed.obs_l, packed.obs_yptr, packed.obs_yv, packed.obs_yc,
            packed.obs_tot, lam,
            packed.mis_ptr, packed.mis_l, pi,
            packed.voff, packed.nv,
            est.alpha, log_phi, log_eta, log_psi, log_1m_psi,
            njk, mjk, bad,
        )
        return status, int(bad[0])

    edges = np.linspace(0, D, max(1, min(threads, D)) + 1).round().astype(np.int64)
    chunks = list(zip(edges[:-1], edges[1:]))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    for status, j in results:
        if status:
            raise NumericalError(f"degenerate responsibilities while inferring record {j}")
    x = est.alpha[None, :] + np.maximum(njk, 0) + np.maximum(mjk, 0)
    return x / x.sum(axis=1, keepdims=True)


def infer_mixture(record, est, n_sweeps=DEFAULT_SWEEPS):
    """Mixture of a single patient record; an empty record yields ``alpha / sum(alpha)``."""
    return infer_mixtures([record], est, n_sweeps)[0]


def corpus_mixtures(corpus, est, n_sweeps=DEFAULT_SWEEPS, threads=1):
    return infer_mixtures(patient_records(corpus), est, n_sweeps, threads)


def lab_topic_score(est, value=1):
    """``psi * eta[value]`` normalized over labs within each topic (labs x K).

    Labs with fewer than ``value + 1`` values score 0.
    """
    L, K = est.schema.L, est.K
    out = np.zeros((L, K))
    if L == 0:
        return out
    ok = est.schema.V > value
    rows = est.schema.value_offsets[:-1][ok] + value
    out[ok] = est.psi_hat[ok] * est.eta_hat[rows]
    tot = out.sum(axis=0, keepdims=True)
    return np.divide(out, tot, out=np.zeros_like(out), where=tot > 0)


@dataclass
class TopicReport:
    topic: int
    features: dict
    labs: list


def _ranked(weights, n):
    ids = np.arange(1, len(weights) + 1)
    order = np.lexsort((ids, -weights))[: max(0, n)]
    return [(int(ids[i]), float(weights[i])) for i in order]


def top_features(est, k, n, value=1):
    """Top-``n`` features per regular type and top-``n`` labs of topic ``k`` (0-based).

    Ties fall to the smaller id.  Lists hold ``(id, weight)`` pairs.
    """
    if not 0 <= k < est.K:
        raise ValidationError(f"topic {k} out of range 0..{est.K - 1}")
    feats = {}
    for t, ts in enumerate(est.schema.regular_types):
        feats[ts.type_id] = _ranked(est.phi(t)[:, k], n)
    labs = _ranked(lab_topic_score(est, value)[:, k], n) if est.schema.L else []
    return TopicReport(k, feats, labs)


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------


def write_topic_features(est, path, top_n=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["topic", "type_id", "feature_id", "weight"])
        for k in range(est.K):
            for t, ts in enumerate(est.schema.regular_types):
                col = est.phi(t)[:, k]
                rows = _ranked(col, len(col) if top_n is None else top_n)
                for fid, weight in rows:
                    w.writerow([k + 1, ts.type_id, fid, repr(weight)])


def write_lab_scores(est, path, value=1, top_n=None):
    score = lab_topic_score(est, value)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["topic", "lab_id", "score"])
        for k in range(est.K):
            rows = _ranked(score[:, k], est.schema.L if top_n is None else top_n)
            for lid, s in rows:
                w.writerow([k + 1, lid, repr(s)])


def write_mixtures(patient_ids, theta, path):
    K = theta.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id"] + [f"theta_{k + 1}" for k in range(K)])
        for pid, row in zip(patient_ids, theta):
            w.writerow([int(pid)] + [repr(float(x)) for x in row])


def read_mixtures(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[0] != "patient_id":
            raise ValidationError(f"{path}: not a mixture table")
        ids, rows = [], []
        for row in r:
            ids.append(int(row[0]))
            rows.append([float(x) for x in row[1:]])
    return np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)


def read_table(path):
    """Generic CSV reader returning the header and rows as strings."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]
