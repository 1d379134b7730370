"""Joint collapsed variational Bayes (CVB0) training.

The E-step sweeps patients and, for every distinct regular token, observed
lab and missing lab, removes the variable's own expected contribution from
the shared statistics, recomputes its responsibilities and adds them back.
The M-step applies one fixed-point step to every Dirichlet/Beta
hyperparameter under a Gamma hyperprior.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, gammaln

from . import _kernels
from .errors import NumericalError, ValidationError

logger = logging.getLogger(__name__)

HYPER_FLOOR = 1e-8
# "type": one shared concentration per regular type; "feature": one per feature
BETA_MODES = ("type", "feature")
_STATUS = {1: "regular token", 2: "observed lab", 3: "missing lab"}


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class PatientRecord:
    """One patient's evidence in 0-based schema indices.

    ``tokens`` rows are ``(type, feature, count)``, ``observed`` rows are
    ``(test, value, count)`` and ``missing`` lists tests known to be unobserved.
    Tests in neither table are treated as unknown and contribute nothing.
    """

    tokens: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    observed: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    missing: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1, 3)
        self.observed = np.asarray(self.observed, dtype=np.int64).reshape(-1, 3)
        self.missing = np.asarray(self.missing, dtype=np.int64).reshape(-1)

    @property
    def empty(self):
        return len(self.tokens) == 0 and len(self.observed) == 0 and len(self.missing) == 0


def patient_records(corpus):
    """Per-patient records of a corpus; every unobserved test is missing."""
    out = []
    tp, lp = corpus.tok_ptr, corpus.lab_ptr
    L = corpus.schema.L
    for j in range(corpus.D):
        s = slice(tp[j], tp[j + 1])
        tokens = np.stack([corpus.tok_type[s], corpus.tok_feature[s], corpus.tok_count[s]], axis=1)
        s = slice(lp[j], lp[j + 1])
        observed = np.stack([corpus.lab_test[s], corpus.lab_value[s], corpus.lab_count[s]], axis=1)
        missing = np.setdiff1d(np.arange(L), observed[:, 0])
        out.append(PatientRecord(tokens, observed, missing))
    return out


@dataclass
class Packed:
    """CSR arrays over patients in the layout the compiled sweeps expect."""

    D: int
    tok_ptr: np.ndarray
    tok_g: np.ndarray
    tok_t: np.ndarray
    tok_c: np.ndarray
    obs_ptr: np.ndarray
    obs_l: np.ndarray
    obs_yptr: np.ndarray
    obs_yv: np.ndarray
    obs_yc: np.ndarray
    obs_tot: np.ndarray
    mis_ptr: np.ndarray
    mis_l: np.ndarray
    voff: np.ndarray
    nv: np.ndarray
    vmax: int

    @property
    def n_tok(self):
        return len(self.tok_g)

    @property
    def n_obs(self):
        return len(self.obs_l)

    @property
    def n_mis(self):
        return len(self.mis_l)


def pack_records(schema, records, mixview=True):
    fo, vo = schema.feature_offsets, schema.value_offsets
    tok_ptr, obs_ptr, mis_ptr = [0], [0], [0]
    tok_rows, obs_l, obs_yptr, yv, yc, tot, mis = [], [], [0], [], [], [], []
    for rec in records:
        toks = rec.tokens if mixview else rec.tokens[:0]
        if len(toks):
            toks = toks[np.lexsort((toks[:, 1], toks[:, 0]))]
            tok_rows.append(toks)
        tok_ptr.append(tok_ptr[-1] + len(toks))
        obs = rec.observed
        tests = np.unique(obs[:, 0]) if len(obs) else obs[:0, 0]
        for l in tests:
            rows = obs[obs[:, 0] == l]
            rows = rows[np.argsort(rows[:, 1], kind="stable")]
            values, inv = np.unique(rows[:, 1], return_inverse=True)
            counts = np.bincount(inv, weights=rows[:, 2]).astype(np.float64)
            obs_l.append(l)
            yv.extend(vo[l] + values)
            yc.extend(counts)
            tot.append(counts.sum())
            obs_yptr.append(obs_yptr[-1] + len(values))
        obs_ptr.append(obs_ptr[-1] + len(tests))
        miss = np.unique(rec.missing)
        mis.extend(miss)
        mis_ptr.append(mis_ptr[-1] + len(miss))
    toks = np.concatenate(tok_rows) if tok_rows else np.zeros((0, 3), dtype=np.int64)
    i64 = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    f64 = lambda x: np.asarray(x, dtype=np.float64)  # noqa: E731
    return Packed(
        D=len(records),
        tok_ptr=i64(tok_ptr),
        tok_g=i64(fo[toks[:, 0]] + toks[:, 1]),
        tok_t=i64(toks[:, 0]),
        tok_c=f64(toks[:, 2]),
        obs_ptr=i64(obs_ptr),
        obs_l=i64(obs_l),
        obs_yptr=i64(obs_yptr),
        obs_yv=i64(yv),
        obs_yc=f64(yc),
        obs_tot=f64(tot),
        mis_ptr=i64(mis_ptr),
        mis_l=i64(mis),
        voff=i64(vo[:-1]) if schema.L else np.zeros(0, dtype=np.int64),
        nv=i64(schema.V),
        vmax=schema.v_max,
    )


def pack_corpus(corpus, mixview=True):
    return pack_records(corpus.schema, patient_records(corpus), mixview)


@dataclass
class Hyperparams:
    """Dirichlet/Beta hyperparameters and their Gamma hyperpriors.

    ``beta`` is flat over all regular features and ``zeta`` flat over all lab
    value slots (see :class:`~mixtopic.corpus.Schema` offsets).
    ``hyperprior`` maps ``alpha``, ``beta``, ``zeta`` and ``ab`` to
    ``(shape, rate)`` pairs.
    """

    alpha: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    hyperprior: dict = field(
        default_factory=lambda: {k: (2.0, 1.0) for k in ("alpha", "beta", "zeta", "ab")}
    )

    @classmethod
    def initial(cls, schema, K, alpha=1.0, beta=0.1, zeta=1.0, a=1.0, b=1.0, hyperprior=None):
        hp = cls(
            alpha=np.full(K, float(alpha)),
            beta=np.full(schema.n_features, float(beta)),
            zeta=np.full(schema.n_values, float(zeta)),
            a=np.full(schema.L, float(a)),
            b=np.full(schema.L, float(b)),
        )
        if hyperprior:
            hp.hyperprior.update({k: tuple(map(float, v)) for k, v in hyperprior.items()})
        hp.check()
        return hp

    @property
    def K(self):
        return len(self.alpha)

    def check(self):
        for name in ("alpha", "beta", "zeta", "a", "b"):
            x = getattr(self, name)
            if not np.all(np.isfinite(x)) or np.any(x <= 0):
                raise ValidationError(f"hyperparameter {name} must be finite and positive")

    def sums(self, schema):
        beta_sum = np.add.reduceat(self.beta, schema.feature_offsets[:-1]) if schema.T else np.zeros(0)
        zeta_sum = np.add.reduceat(self.zeta, schema.value_offsets[:-1]) if schema.L else np.zeros(0)
        return beta_sum, zeta_sum

    def copy(self):
        return Hyperparams(
            self.alpha.copy(), self.beta.copy(), self.zeta.copy(), self.a.copy(), self.b.copy(),
            dict(self.hyperprior),
        )


@dataclass
class GlobalStats:
    """Expected sufficient statistics shared across patients.

    ``nwk`` (features x K) and ``ntk`` (types x K) for regular tokens; ``mkv``
    (value slots x K) and ``mlk`` (labs x K) for lab results; ``plk``/``qlk``
    (labs x K) for observed/missing test mass.
    """

    nwk: np.ndarray
    ntk: np.ndarray
    mkv: np.ndarray
    mlk: np.ndarray
    plk: np.ndarray
    qlk: np.ndarray

    NAMES = ("nwk", "ntk", "mkv", "mlk", "plk", "qlk")

    @classmethod
    def zeros(cls, schema, K):
        return cls(
            np.zeros((schema.n_features, K)),
            np.zeros((schema.T, K)),
            np.zeros((schema.n_values, K)),
            np.zeros((schema.L, K)),
            np.zeros((schema.L, K)),
            np.zeros((schema.L, K)),
        )

    def arrays(self):
        return [getattr(self, n) for n in self.NAMES]

    def copy(self):
        return GlobalStats(*[x.copy() for x in self.arrays()])

    def max_abs_diff(self, other):
        return max(
            (float(np.max(np.abs(x - y))) if x.size else 0.0)
            for x, y in zip(self.arrays(), other.arrays())
        )


@dataclass
class Posteriors:
    """Responsibilities of every patient plus their topic loads.

    ``gamma`` rows follow packed token order, ``lam`` packed observed-lab order
    and ``pi`` packed missing-lab order; ``njk``/``mjk`` are ``D x K``.
    """

    gamma: np.ndarray
    lam: np.ndarray
    pi: np.ndarray
    njk: np.ndarray
    mjk: np.ndarray

    def copy(self):
        return Posteriors(*(x.copy() for x in (self.gamma, self.lam, self.pi, self.njk, self.mjk)))

    def theta(self, alpha):
        x = alpha[None, :] + np.maximum(self.njk, 0) + np.maximum(self.mjk, 0)
        return x / x.sum(axis=1, keepdims=True)


@dataclass
class TrainConfig:
    K: int
    max_iters: int = 100
    tol: float = 1e-5
    min_iters: int = 0
    seed: int = 0
    nmar: bool = True
    mixview: bool = True
    hyper_update_every: int = 1
    hyper_burnin: int = 50
    threads: int = 1
    shards: int | None = None
    init_noise: float = 0.1
    init_alpha: float = 1.0
    init_beta: float = 0.1
    init_zeta: float = 1.0
    init_a: float = 1.0
    init_b: float = 1.0
    hyperprior: dict | None = None
    beta_mode: str = "type"

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValidationError(f"K must be >= 1, got {self.K}")
        if not self.tol > 0:
            raise ValidationError("tol must be > 0")
        if self.max_iters < 0:
            raise ValidationError("max_iters must be >= 0")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if self.beta_mode not in BETA_MODES:
            raise ValidationError(f"beta_mode must be one of {BETA_MODES}")
        self.K = int(self.K)

    @property
    def n_shards(self):
        return int(self.shards or self.threads)

    @property
    def variant(self):
        return ("nmar" if self.nmar else "mar") + "-" + ("mixview" if self.mixview else "labview")

    def to_dict(self):
        d = dict(self.__dict__)
        if d["tol"] == math.inf:
            d["tol"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("tol") == "inf":
            d["tol"] = math.inf
        return cls(**d)


@dataclass
class TraceRow:
    iter: int
    loglik: float
    delta: float
    seconds: float

    def csv(self):
        return f"{self.iter},{self.loglik!r},{self.delta!r},{self.seconds:.6f}"


TRACE_HEADER = "iter,loglik,delta,seconds"
TRACE_HEADER_UNTIMED = "iter,loglik,delta"


@dataclass
class TrainedModel:
    schema: object
    config: TrainConfig
    hyper: Hyperparams
    stats: GlobalStats
    trace: list
    iteration: int = 0
    initial_loglik: float = float("nan")
    patient_ids: np.ndarray | None = None
    posteriors: Posteriors | None = None

    @property
    def K(self):
        return self.config.K


# ---------------------------------------------------------------------------
# single-variable updates (reference forms of the compiled kernel)
# ---------------------------------------------------------------------------


def _normalize(w):
    s = w.sum()
    if not (s > 0 and np.isfinite(s)):
        raise NumericalError(f"degenerate responsibilities {w!r}")
    return w / s


def update_gamma(alpha, n_jk, m_jk, beta_w, beta_sum, n_wk, n_k):
    """Responsibilities of one regular token over topics.

    All counts must already exclude the token's own contribution.  ``n_wk`` is
    the feature's per-topic count and ``n_k`` the per-topic total of its type.
    """
    doc = alpha + n_jk + m_jk
    return _normalize(doc * (beta_w + n_wk) / (beta_sum + n_k + _kernels.EPS))


def update_lambda_observed(alpha, n_jk, m_jk, zeta, m_kv, y, a, b, p_k, q_k, nmar=True):
    """Topic responsibilities of one observed lab test.

    ``zeta`` and ``y`` have one entry per value; ``m_kv`` is ``K x V``.  Each
    value's term enters ``y_v`` times.  ``p_k`` excludes this test's own mass.
    """
    y = np.asarray(y, dtype=np.float64)
    logw = np.log(alpha + n_jk + m_jk)
    den = np.log(zeta.sum() + m_kv.sum(axis=1) + _kernels.EPS)
    logw = logw + (y[None, :] * (np.log(zeta[None, :] + m_kv) - den[:, None])).sum(axis=1)
    if nmar:
        logw = logw + np.log(a + p_k) - np.log(a + p_k + b + q_k + _kernels.EPS)
    return _normalize(np.exp(logw - logw.max()))


def update_pi_missing(alpha, n_jk, m_jk, zeta, m_kv, a, b, p_k, q_k):
    """Joint topic x value responsibilities (``K x V``) of one missing test."""
    doc = alpha + n_jk + m_jk
    value = (zeta[None, :] + m_kv) / (zeta.sum() + m_kv.sum(axis=1) + _kernels.EPS)[:, None]
    obs = (b + q_k) / (a + p_k + b + q_k + _kernels.EPS)
    return _normalize(doc[:, None] * value * obs[:, None])


# ---------------------------------------------------------------------------
# initialization and aggregation
# ---------------------------------------------------------------------------


def _noisy_simplex(rng, shape, amplitude):
    # 1 + U*amp over the block, i.e. 1/K + U*amp/K before renormalizing
    x = 1.0 + rng.random(shape) * amplitude
    axes = tuple(range(1, len(shape)))
    return x / x.sum(axis=axes, keepdims=True)


def aggregate(packed, post, schema, K, nmar):
    """Rebuild global statistics and loads from scratch out of ``post``."""
    stats = GlobalStats.zeros(schema, K)
    njk = np.zeros((packed.D, K))
    mjk = np.zeros((packed.D, K))
    tok_j = np.repeat(np.arange(packed.D), np.diff(packed.tok_ptr))
    cg = packed.tok_c[:, None] * post.gamma
    np.add.at(stats.nwk, packed.tok_g, cg)
    np.add.at(stats.ntk, packed.tok_t, cg)
    np.add.at(njk, tok_j, cg)

    obs_j = np.repeat(np.arange(packed.D), np.diff(packed.obs_ptr))
    tl = packed.obs_tot[:, None] * post.lam
    np.add.at(mjk, obs_j, tl)
    np.add.at(stats.mlk, packed.obs_l, tl)
    if nmar:
        np.add.at(stats.plk, packed.obs_l, tl)
    y_o = np.repeat(np.arange(packed.n_obs), np.diff(packed.obs_yptr))
    np.add.at(stats.mkv, packed.obs_yv, packed.obs_yc[:, None] * post.lam[y_o])

    if nmar and packed.n_mis:
        mis_j = np.repeat(np.arange(packed.D), np.diff(packed.mis_ptr))
        mass = post.pi.sum(axis=2)
        np.add.at(mjk, mis_j, mass)
        np.add.at(stats.mlk, packed.mis_l, mass)
        np.add.at(stats.qlk, packed.mis_l, mass)
        for v in range(packed.vmax):
            has = packed.nv[packed.mis_l] > v
            np.add.at(stats.mkv, packed.voff[packed.mis_l[has]] + v, post.pi[has, :, v])
    return stats, njk, mjk


def init_posteriors(packed, schema, cfg):
    """Uniform responsibilities plus seeded positive noise, renormalized.

    Each entry starts at ``1/K`` plus a uniform draw in ``[0, init_noise/K)``.
    """
    if packed.D < 1:
        raise ValidationError("cannot train on an empty corpus")
    K = cfg.K
    amp = cfg.init_noise
    ss = np.random.SeedSequence(cfg.seed)
    rg, rl, rp = (np.random.default_rng(s) for s in ss.spawn(3))
    gamma = _noisy_simplex(rg, (packed.n_tok, K), amp)
    lam = _noisy_simplex(rl, (packed.n_obs, K), amp)
    pi = np.zeros((packed.n_mis, K, packed.vmax))
    if cfg.nmar and packed.n_mis:
        noise = 1.0 + rp.random(pi.shape) * amp
        valid = np.arange(packed.vmax)[None, :] < packed.nv[packed.mis_l][:, None]
        noise *= valid[:, None, :]
        pi = noise / noise.sum(axis=(1, 2), keepdims=True)
    post = Posteriors(gamma, lam, pi, np.zeros((packed.D, K)), np.zeros((packed.D, K)))
    stats, post.njk, post.mjk = aggregate(packed, post, schema, K, cfg.nmar)
    return post, stats


# ---------------------------------------------------------------------------
# E-step, likelihood, M-step
# ---------------------------------------------------------------------------


def _shard_bounds(D, n):
    n = max(1, min(n, D))
    return np.linspace(0, D, n + 1).round().astype(np.int64)


def _run_range(lo, hi, packed, post, stats, hp, schema, nmar):
    beta_sum, zeta_sum = hp.sums(schema)
    bad = np.full(1, -1, dtype=np.int64)
    status = _kernels.sweep_range(
        lo, hi, hp.K, nmar,
        packed.tok_ptr, packed.tok_g, packed.tok_t, packed.tok_c, post.gamma,
        packed.obs_ptr, packed.obs_l, packed.obs_yptr, packed.obs_yv, packed.obs_yc,
        packed.obs_tot, post.lam,
        packed.mis_ptr, packed.mis_l, post.pi,
        packed.voff, packed.nv,
        hp.alpha, hp.beta, beta_sum, hp.zeta, zeta_sum, hp.a, hp.b,
        post.njk, post.mjk, stats.nwk, stats.ntk, stats.mkv, stats.mlk, stats.plk, stats.qlk,
        bad,
    )
    return status, int(bad[0])


def e_step(packed, post, stats, hp, schema, cfg, executor=None):
    """One full sweep over all patients; updates ``post`` and ``stats`` in place.

    With more than one shard, every shard starts from the same snapshot of
    the global statistics, runs sequentially on a private copy, and the
    per-shard deltas are summed back in shard order.  Returns the collapsed
    training log joint after the sweep.
    """
    bounds = _shard_bounds(packed.D, cfg.n_shards)
    if len(bounds) == 2:
        results = [_run_range(0, packed.D, packed, post, stats, hp, schema, cfg.nmar)]
    else:
        snapshot = stats.copy()
        locals_ = [stats.copy() for _ in range(len(bounds) - 1)]

        def job(s):
            return _run_range(bounds[s], bounds[s + 1], packed, post, locals_[s], hp, schema, cfg.nmar)

        if executor is not None:
            results = list(executor.map(job, range(len(locals_))))
        else:
            results = [job(s) for s in range(len(locals_))]
        for name in GlobalStats.NAMES:
            total = getattr(stats, name)
            base = getattr(snapshot, name)
            for loc in locals_:
                total += getattr(loc, name) - base
    for status, j in results:
        if status:
            raise NumericalError(f"non-finite {_STATUS[status]} update for patient index {j}")
    return joint_log_likelihood(stats, hp, post.njk, post.mjk, schema)


def joint_log_likelihood(stats, hp, njk, mjk, schema):
    """Collapsed log joint with expected counts in place of hard counts."""
    pos = lambda x: np.maximum(x, 0.0)  # noqa: E731
    alpha = hp.alpha
    total = 0.0
    D = njk.shape[0]
    if D:
        N = pos(njk) + pos(mjk)
        total += D * (gammaln(alpha.sum()) - gammaln(alpha).sum())
        total += gammaln(alpha[None, :] + N).sum() - gammaln(alpha.sum() + N.sum(axis=1)).sum()
    beta_sum, zeta_sum = hp.sums(schema)
    if schema.T:
        total += float((gammaln(beta_sum) - gammaln(pos(stats.ntk) + beta_sum[:, None]).T).sum())
        total += float((gammaln(hp.beta[:, None] + pos(stats.nwk)) - gammaln(hp.beta)[:, None]).sum())
    if schema.L:
        total += float((gammaln(zeta_sum) - gammaln(pos(stats.mlk) + zeta_sum[:, None]).T).sum())
        total += float((gammaln(hp.zeta[:, None] + pos(stats.mkv)) - gammaln(hp.zeta)[:, None]).sum())
        a, b = hp.a[:, None], hp.b[:, None]
        p, q = pos(stats.plk), pos(stats.qlk)
        total += float(
            (gammaln(a + b) - gammaln(a) - gammaln(b)
             + gammaln(a + p) + gammaln(b + q) - gammaln(a + b + p + q)).sum()
        )
    if not np.isfinite(total):
        raise NumericalError("non-finite training log likelihood")
    return float(total)


def _fixed_point(x, num, den, shape, rate, name):
    """One Minka step ``x <- (shape-1 + x*num) / (rate + den)`` with guards."""
    denom = rate + den
    new = (shape - 1.0 + x * num) / np.where(denom > 0, denom, 1.0)
    bad = ~(denom > 0) | ~np.isfinite(new)
    if np.any(bad):
        logger.warning("%s fixed point: %d non-positive denominators kept", name, int(bad.sum()))
        new = np.where(bad, x, new)
    return np.maximum(new, HYPER_FLOOR)


def m_step(stats, hp, njk, mjk, schema, update_beta=True, update_zeta=True, update_ab=True,
           beta_mode="type"):
    """One empirical-Bayes fixed-point step for every hyperparameter.

    With ``beta_mode="type"`` all features of a type share one value, updated
    from digamma sums pooled over the type's features; ``"feature"`` updates
    every feature's value separately.
    """
    pos = lambda x: np.maximum(x, 0.0)  # noqa: E731
    new = hp.copy()
    hprior = hp.hyperprior

    N = pos(njk) + pos(mjk)
    alpha, asum = hp.alpha, hp.alpha.sum()
    num = (digamma(alpha[None, :] + N) - digamma(alpha)[None, :]).sum(axis=0)
    den = (digamma(asum + N.sum(axis=1)) - digamma(asum)).sum()
    new.alpha = _fixed_point(alpha, num, den, *hprior["alpha"], "alpha")

    beta_sum, zeta_sum = hp.sums(schema)
    if update_beta and schema.T:
        num = (digamma(hp.beta[:, None] + pos(stats.nwk)) - digamma(hp.beta)[:, None]).sum(axis=1)
        den_t = (digamma(beta_sum[:, None] + pos(stats.ntk)) - digamma(beta_sum)[:, None]).sum(axis=1)
        if beta_mode == "feature":
            new.beta = _fixed_point(hp.beta, num, den_t[schema.feature_type], *hprior["beta"], "beta")
        else:
            fo = schema.feature_offsets
            # shared value per type: pooled numerator, denominator scaled by W_t
            shared = np.add.reduceat(hp.beta, fo[:-1]) / schema.W
            num_t = np.add.reduceat(num, fo[:-1])
            upd = _fixed_point(shared, num_t, schema.W * den_t, *hprior["beta"], "beta")
            new.beta = upd[schema.feature_type]
    if schema.L and update_zeta:
        num = (digamma(hp.zeta[:, None] + pos(stats.mkv)) - digamma(hp.zeta)[:, None]).sum(axis=1)
        den_l = (digamma(zeta_sum[:, None] + pos(stats.mlk)) - digamma(zeta_sum)[:, None]).sum(axis=1)
        new.zeta = _fixed_point(hp.zeta, num, den_l[schema.value_lab], *hprior["zeta"], "zeta")
    if schema.L and update_ab:
        a, b = hp.a[:, None], hp.b[:, None]
        p, q = pos(stats.plk), pos(stats.qlk)
        den = (digamma(a + b + p + q) - digamma(a + b)).sum(axis=1)
        num_a = (digamma(a + p) - digamma(a)).sum(axis=1)
        num_b = (digamma(b + q) - digamma(b)).sum(axis=1)
        new.a = _fixed_point(hp.a, num_a, den, *hprior["ab"], "a")
        new.b = _fixed_point(hp.b, num_b, den, *hprior["ab"], "b")
    return new


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(corpus, cfg, resume=None, callback=None, packed=None, hyper=None):
    """Alternate E- and M-steps until the relative log-likelihood change < tol.

    ``resume`` continues a model that still carries its posteriors; the run
    then performs ``cfg.max_iters`` further iterations.  ``hyper`` replaces the
    initial hyperparameters of a fresh run.  ``callback(model)`` is invoked
    after every iteration with the live model.
    """
    schema = corpus.schema
    if packed is None:
        packed = pack_corpus(corpus, cfg.mixview)
    if resume is not None:
        if resume.posteriors is None:
            raise ValidationError("model has no posteriors to resume from")
        if resume.schema != schema:
            raise ValidationError("corpus schema does not match the model")
        model = TrainedModel(
            schema, cfg, resume.hyper.copy(), resume.stats.copy(), list(resume.trace),
            resume.iteration, resume.initial_loglik, corpus.patient_ids.copy(),
            resume.posteriors.copy(),
        )
    else:
        if hyper is not None:
            hp = hyper.copy()
            hp.check()
            if hp.K != cfg.K:
                raise ValidationError("hyperparameter K disagrees with the config")
        else:
            hp = Hyperparams.initial(
                schema, cfg.K, cfg.init_alpha, cfg.init_beta, cfg.init_zeta,
                cfg.init_a, cfg.init_b, cfg.hyperprior,
            )
        post, stats = init_posteriors(packed, schema, cfg)
        ll0 = joint_log_likelihood(stats, hp, post.njk, post.mjk, schema)
        model = TrainedModel(schema, cfg, hp, stats, [], 0, ll0, corpus.patient_ids.copy(), post)

    prev = model.trace[-1].loglik if model.trace else model.initial_loglik
    executor = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 and cfg.n_shards > 1 else None
    every = cfg.hyper_update_every
    try:
        for _ in range(cfg.max_iters):
            t0 = time.perf_counter()
            post = model.posteriors
            ll = e_step(packed, post, model.stats, model.hyper, schema, cfg, executor)
            model.iteration += 1
            if every and model.iteration > cfg.hyper_burnin and model.iteration % every == 0:
                model.hyper = m_step(
                    model.stats, model.hyper, post.njk, post.mjk, schema,
                    update_beta=cfg.mixview, update_ab=cfg.nmar, beta_mode=cfg.beta_mode,
                )
            delta = ll - prev
            model.trace.append(TraceRow(model.iteration, ll, delta, time.perf_counter() - t0))
            logger.debug("iter %d loglik %.6f delta %.3g", model.iteration, ll, delta)
            if callback is not None:
                callback(model)
            rel = abs(delta) / abs(prev) if prev else math.inf
            prev = ll
            if rel < cfg.tol and model.iteration >= cfg.min_iters:
                break
    finally:
        if executor is not None:
            executor.shutdown()
    return model


def write_trace(trace, path, timings=True):
    """Trace CSV; ``timings=False`` drops the seconds column so reruns match byte for byte."""
    with open(path, "w") as fh:
        if timings:
            fh.write(TRACE_HEADER + "\n")
            for row in trace:
                fh.write(row.csv() + "\n")
        else:
            fh.write(TRACE_HEADER_UNTIMED + "\n")
            for row in trace:
                fh.write(f"{row.iter},{row.loglik!r},{row.delta!r}\n")


def read_trace(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header not in (TRACE_HEADER, TRACE_HEADER_UNTIMED):
            raise ValidationError(f"unexpected trace header {header!r}")
        for line in fh:
            f = line.strip().split(",")
            secs = float(f[3]) if len(f) == 4 else float("nan")
            rows.append(TraceRow(int(f[0]), float(f[1]), float(f[2]), secs))
    return rows


def with_config(model, **changes):
    return replace(model, config=replace(model.config, **changes))
