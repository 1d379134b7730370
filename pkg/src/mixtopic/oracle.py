"""Exact inference on tiny corpora by enumerating every latent assignment.

The collapsed joint of each assignment is computed as a product of sequential
Polya-urn predictive probabilities rather than through log-Gamma ratios, so
it shares no arithmetic with :func:`mixtopic.inference.joint_log_likelihood`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .inference import Hyperparams, TrainConfig, pack_corpus, train

MAX_SPACE = 10**7
CHUNK = 1 << 16


@dataclass
class _Var:
    kind: str  # "z", "h_obs", "h_mis", "y_mis"
    patient: int
    index: int  # type/lab index
    item: int  # feature index, or -1
    values: tuple = ()  # observed (value, count) pairs


@dataclass
class OracleResult:
    """Exact log marginal and single-variable posterior marginals.

    ``z`` holds one K-vector per token instance (corpus row order, counts
    expanded), ``h_observed`` one per observed test, ``h_missing`` and
    ``y_missing`` one per missing test (patient order, then test order).
    """

    log_marginal: float
    z: np.ndarray
    h_observed: np.ndarray
    h_missing: np.ndarray
    y_missing: np.ndarray
    space: int
    log_joint: np.ndarray | None = None
    assignments: np.ndarray | None = None


def _variables(corpus, nmar):
    zs, hobs, hmis = [], [], []
    tp, lp = corpus.tok_ptr, corpus.lab_ptr
    L = corpus.schema.L
    for j in range(corpus.D):
        for e in range(tp[j], tp[j + 1]):
            for _ in range(int(corpus.tok_count[e])):
                zs.append(_Var("z", j, int(corpus.tok_type[e]), int(corpus.tok_feature[e])))
        seen = {}
        for r in range(lp[j], lp[j + 1]):
            seen.setdefault(int(corpus.lab_test[r]), []).append(
                (int(corpus.lab_value[r]), int(corpus.lab_count[r]))
            )
        for l in range(L):
            if l in seen:
                hobs.append(_Var("h_obs", j, l, -1, tuple(seen[l])))
            elif nmar:
                hmis.append(_Var("h_mis", j, l, -1))
    return zs, hobs, hmis


def assignment_space(corpus, K, nmar=True):
    zs, hobs, hmis = _variables(corpus, nmar)
    V = corpus.schema.V
    size = K ** (len(zs) + len(hobs) + len(hmis))
    for v in hmis:
        size *= int(V[v.index])
    return size


def brute_force_oracle(corpus, hp, K, nmar=True, max_space=MAX_SPACE, keep_table=False):
    """Enumerate all topic (and hidden value) assignments of a tiny corpus.

    With ``keep_table`` the result also carries every assignment (columns:
    token topics, observed-test topics, missing-test topics, missing-test
    values) and its log joint.
    """
    schema = corpus.schema
    zs, hobs, hmis = _variables(corpus, nmar)
    space = assignment_space(corpus, K, nmar)
    if space > max_space:
        raise ValidationError(
            f"assignment space {space:.3g} exceeds the limit {max_space:.3g}"
        )
    # digit layout: z vars, observed h, missing h, missing y
    radices = [K] * (len(zs) + len(hobs) + len(hmis)) + [int(schema.V[v.index]) for v in hmis]
    n_z, n_ho, n_hm = len(zs), len(hobs), len(hmis)

    alpha = np.asarray(hp.alpha, dtype=np.float64)
    alpha_sum = math.fsum(alpha)
    fo, vo = schema.feature_offsets, schema.value_offsets
    beta_sum = [math.fsum(hp.beta[fo[t]:fo[t + 1]]) for t in range(schema.T)]
    zeta_sum = [math.fsum(hp.zeta[vo[l]:vo[l + 1]]) for l in range(schema.L)]

    strides = np.ones(len(radices), dtype=np.int64)
    for i in range(len(radices) - 2, -1, -1):
        strides[i] = strides[i + 1] * radices[i + 1]

    logp_all = np.empty(space)
    digits_chunks = []
    for start in range(0, space, CHUNK):
        idx = np.arange(start, min(space, start + CHUNK), dtype=np.int64)
        S = len(idx)
        dig = (idx[:, None] // strides[None, :]) % np.asarray(radices, dtype=np.int64)[None, :]
        rows = np.arange(S)
        Njk = np.zeros((S, corpus.D, K))
        nwk = np.zeros((S, schema.n_features, K))
        ntk = np.zeros((S, max(schema.T, 1), K))
        mkv = np.zeros((S, max(schema.n_values, 1), K))
        mlk = np.zeros((S, max(schema.L, 1), K))
        plk = np.zeros((S, max(schema.L, 1), K))
        qlk = np.zeros((S, max(schema.L, 1), K))
        lp = np.zeros(S)

        def draw_topic(j, k):
            tot = Njk[:, j, :].sum(axis=1)
            out = np.log((alpha[k] + Njk[rows, j, k]) / (alpha_sum + tot))
            Njk[rows, j, k] += 1.0
            return out

        for i, v in enumerate(zs):
            k = dig[:, i]
            g = fo[v.index] + v.item
            lp += draw_topic(v.patient, k)
            lp += np.log((hp.beta[g] + nwk[rows, g, k]) / (beta_sum[v.index] + ntk[rows, v.index, k]))
            nwk[rows, g, k] += 1.0
            ntk[rows, v.index, k] += 1.0

        def draw_value(l, k, slot):
            out = np.log((hp.zeta[slot] + mkv[rows, slot, k]) / (zeta_sum[l] + mlk[rows, l, k]))
            mkv[rows, slot, k] += 1.0
            mlk[rows, l, k] += 1.0
            return out

        for i, v in enumerate(hobs):
            k = dig[:, n_z + i]
            l = v.index
            for value, count in v.values:
                for _ in range(count):
                    lp += draw_topic(v.patient, k)
                    lp += draw_value(l, k, vo[l] + value)
                    if nmar:
                        p, q = plk[rows, l, k], qlk[rows, l, k]
                        lp += np.log((hp.a[l] + p) / (hp.a[l] + hp.b[l] + p + q))
                        plk[rows, l, k] += 1.0

        for i, v in enumerate(hmis):
            k = dig[:, n_z + n_ho + i]
            value = dig[:, n_z + n_ho + n_hm + i]
            l = v.index
            lp += draw_topic(v.patient, k)
            lp += draw_value(l, k, vo[l] + value)
            p, q = plk[rows, l, k], qlk[rows, l, k]
            lp += np.log((hp.b[l] + q) / (hp.a[l] + hp.b[l] + p + q))
            qlk[rows, l, k] += 1.0

        logp_all[start:start + S] = lp
        digits_chunks.append(dig)

    mx = float(logp_all.max())
    w = np.exp(logp_all - mx)
    total = math.fsum(w)
    log_marginal = mx + math.log(total)
    w /= total
    dig = np.concatenate(digits_chunks) if digits_chunks else np.zeros((0, len(radices)), dtype=np.int64)

    def marg(col, size):
        return np.bincount(dig[:, col], weights=w, minlength=size)

    z = np.array([marg(i, K) for i in range(n_z)]).reshape(n_z, K)
    ho = np.array([marg(n_z + i, K) for i in range(n_ho)]).reshape(n_ho, K)
    hm = np.array([marg(n_z + n_ho + i, K) for i in range(n_hm)]).reshape(n_hm, K)
    vmax = schema.v_max
    ym = np.zeros((n_hm, vmax))
    for i in range(n_hm):
        ym[i, : radices[n_z + n_ho + n_hm + i]] = marg(n_z + n_ho + n_hm + i, radices[n_z + n_ho + n_hm + i])
    if keep_table:
        return OracleResult(log_marginal, z, ho, hm, ym, space, logp_all, dig)
    return OracleResult(log_marginal, z, ho, hm, ym, space)


def cvb_marginals(corpus, hp, K, nmar=True, max_iters=500, tol=1e-12, seed=0):
    """Converged CVB0 marginals laid out like :class:`OracleResult` (hyperparameters fixed)."""
    cfg = TrainConfig(K=K, max_iters=max_iters, tol=tol, seed=seed, nmar=nmar, hyper_update_every=0)
    packed = pack_corpus(corpus)
    model = train(corpus, cfg, packed=packed, hyper=hp)
    post = model.posteriors
    z = np.repeat(post.gamma, packed.tok_c.astype(np.int64), axis=0)
    if nmar:
        hm = post.pi.sum(axis=2)
        ym = post.pi.sum(axis=1)
    else:
        hm = np.zeros((0, K))
        ym = np.zeros((0, corpus.schema.v_max))
    return OracleResult(float("nan"), z, post.lam.copy(), hm, ym, 0)


def total_variation(p, q):
    """Row-wise total-variation distance of two stacks of distributions."""
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def compare(exact, approx):
    """Total-variation distance of every single-variable marginal."""
    return np.concatenate([
        total_variation(exact.z, approx.z),
        total_variation(exact.h_observed, approx.h_observed),
        total_variation(exact.h_missing, approx.h_missing),
        total_variation(exact.y_missing, approx.y_missing),
    ])


def write_marginals(result, path):
    """CSV ``variable,index,state,probability`` for diffing exact and CVB outputs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "index", "state", "probability"])
        for name, arr in (("z", result.z), ("h_observed", result.h_observed),
                          ("h_missing", result.h_missing), ("y_missing", result.y_missing)):
            for i, row in enumerate(arr):
                for s, p in enumerate(row):
                    w.writerow([name, i, s + 1, repr(float(p))])


def random_tiny_hyper(schema, K, rng):
    """Asymmetric random hyperparameters for oracle checks."""
    return Hyperparams(
        alpha=rng.uniform(0.3, 2.0, K),
        beta=rng.uniform(0.2, 1.5, schema.n_features),
        zeta=rng.uniform(0.3, 1.5, schema.n_values),
        a=rng.uniform(0.5, 2.0, schema.L),
        b=rng.uniform(0.5, 2.0, schema.L),
    )
