"""Compiled CVB0 sweeps.

Layout conventions shared with :mod:`mixtopic.inference`:

* regular tokens are distinct ``(t, w)`` entries per patient in CSR form
  (``tok_ptr``); ``tok_g`` is the flat feature index, ``tok_t`` its type;
* observed labs are CSR over patients (``obs_ptr``); each one owns a run of
  ``(value slot, count)`` pairs in ``obs_yptr``/``obs_yv``/``obs_yc``;
  ``obs_yv`` holds flat value slots ``value_offsets[l] + v``;
* missing labs are CSR over patients (``mis_ptr``) with a ``K x Vmax`` block
  of ``pi`` each; cells with ``v >= V_l`` stay zero.

Status codes: 0 ok, 1 non-finite or zero normalizer in a token update,
2 in an observed-lab update, 3 in a missing-lab update.  ``bad[0]`` receives
the failing patient index.
"""

import math

import numpy as np
from numba import njit

EPS = 1e-12
LOG_FLOOR = 1e-300


@njit(cache=True, nogil=True)
def _pos(x):
    return x if x > 0.0 else 0.0


@njit(cache=True, nogil=True)
def sweep_range(
    lo, hi, K, nmar,
    tok_ptr, tok_g, tok_t, tok_c, gamma,
    obs_ptr, obs_l, obs_yptr, obs_yv, obs_yc, obs_tot, lam,
    mis_ptr, mis_l, pi,
    voff, nv,
    alpha, beta, beta_sum, zeta, zeta_sum, a, b,
    njk, mjk, nwk, ntk, mkv, mlk, plk, qlk,
    bad,
):
    """One leave-one-out CVB0 pass over patients ``lo..hi-1``, in place."""
    w = np.empty(K)
    lw = np.empty(K)
    vmax = pi.shape[2]
    cell = np.empty((K, vmax))
    for j in range(lo, hi):
        # regular tokens
        for e in range(tok_ptr[j], tok_ptr[j + 1]):
            g = tok_g[e]
            t = tok_t[e]
            c = tok_c[e]
            s = 0.0
            for k in range(K):
                x = c * gamma[e, k]
                nwk[g, k] -= x
                ntk[t, k] -= x
                njk[j, k] -= x
                doc = alpha[k] + _pos(njk[j, k]) + _pos(mjk[j, k])
                w[k] = doc * (beta[g] + _pos(nwk[g, k])) / (beta_sum[t] + _pos(ntk[t, k]) + EPS)
                s += w[k]
            if not (s > 0.0 and s < np.inf):
                bad[0] = j
                return 1
            for k in range(K):
                r = w[k] / s
                gamma[e, k] = r
                x = c * r
                nwk[g, k] += x
                ntk[t, k] += x
                njk[j, k] += x

        # observed labs
        for o in range(obs_ptr[j], obs_ptr[j + 1]):
            l = obs_l[o]
            tot = obs_tot[o]
            for k in range(K):
                x = tot * lam[o, k]
                mjk[j, k] -= x
                mlk[l, k] -= x
                if nmar:
                    plk[l, k] -= x
                for yi in range(obs_yptr[o], obs_yptr[o + 1]):
                    mkv[obs_yv[yi], k] -= obs_yc[yi] * lam[o, k]
            mx = -np.inf
            for k in range(K):
                v = math.log(alpha[k] + _pos(njk[j, k]) + _pos(mjk[j, k]))
                den = math.log(zeta_sum[l] + _pos(mlk[l, k]) + EPS)
                for yi in range(obs_yptr[o], obs_yptr[o + 1]):
                    r = obs_yv[yi]
                    v += obs_yc[yi] * (math.log(zeta[r] + _pos(mkv[r, k])) - den)
                if nmar:
                    p = a[l] + _pos(plk[l, k])
                    v += math.log(p) - math.log(p + b[l] + _pos(qlk[l, k]) + EPS)
                lw[k] = v
                if v > mx:
                    mx = v
            s = 0.0
            for k in range(K):
                w[k] = math.exp(lw[k] - mx)
                s += w[k]
            if not (s > 0.0 and s < np.inf):
                bad[0] = j
                return 2
            for k in range(K):
                r = w[k] / s
                lam[o, k] = r
                x = tot * r
                mjk[j, k] += x
                mlk[l, k] += x
                if nmar:
                    plk[l, k] += x
                for yi in range(obs_yptr[o], obs_yptr[o + 1]):
                    mkv[obs_yv[yi], k] += obs_yc[yi] * r

        if not nmar:
            continue

        # missing labs: joint topic x hidden value
        for mi in range(mis_ptr[j], mis_ptr[j + 1]):
            l = mis_l[mi]
            base = voff[l]
            V = nv[l]
            for k in range(K):
                sk = 0.0
                for v in range(V):
                    x = pi[mi, k, v]
                    mkv[base + v, k] -= x
                    sk += x
                mjk[j, k] -= sk
                mlk[l, k] -= sk
                qlk[l, k] -= sk
            s = 0.0
            for k in range(K):
                doc = alpha[k] + _pos(njk[j, k]) + _pos(mjk[j, k])
                q = b[l] + _pos(qlk[l, k])
                obs = q / (a[l] + _pos(plk[l, k]) + q + EPS)
                den = zeta_sum[l] + _pos(mlk[l, k]) + EPS
                for v in range(V):
                    x = doc * (zeta[base + v] + _pos(mkv[base + v, k])) / den * obs
                    cell[k, v] = x
                    s += x
            if not (s > 0.0 and s < np.inf):
                bad[0] = j
                return 3
            for k in range(K):
                sk = 0.0
                for v in range(V):
                    r = cell[k, v] / s
                    pi[mi, k, v] = r
                    mkv[base + v, k] += r
                    sk += r
                mjk[j, k] += sk
                mlk[l, k] += sk
                qlk[l, k] += sk
    return 0


@njit(cache=True, nogil=True)
def infer_range(
    lo, hi, K, nmar, n_sweeps,
    tok_ptr, tok_g, tok_c, gamma,
    obs_ptr, obs_l, obs_yptr, obs_yv, obs_yc, obs_tot, lam,
    mis_ptr, mis_l, pi,
    voff, nv,
    alpha, log_phi, log_eta, log_psi, log_1m_psi,
    njk, mjk,
    bad,
):
    """Per-patient CVB0 with topic parameters held fixed at point estimates.

    Only the patient's own loads ``njk``/``mjk`` are leave-one-out; responsibilities
    start uniform so the result does not depend on any random stream.
    """
    w = np.empty(K)
    lw = np.empty(K)
    vmax = pi.shape[2]
    cell = np.empty((K, vmax))
    for j in range(lo, hi):
        for k in range(K):
            njk[j, k] = 0.0
            mjk[j, k] = 0.0
        for e in range(tok_ptr[j], tok_ptr[j + 1]):
            for k in range(K):
                gamma[e, k] = 1.0 / K
                njk[j, k] += tok_c[e] / K
        for o in range(obs_ptr[j], obs_ptr[j + 1]):
            for k in range(K):
                lam[o, k] = 1.0 / K
                mjk[j, k] += obs_tot[o] / K
        if nmar:
            for mi in range(mis_ptr[j], mis_ptr[j + 1]):
                V = nv[mis_l[mi]]
                for k in range(K):
                    for v in range(V):
                        pi[mi, k, v] = 1.0 / (K * V)
                    mjk[j, k] += 1.0 / K

        for _ in range(n_sweeps):
            for e in range(tok_ptr[j], tok_ptr[j + 1]):
                g = tok_g[e]
                c = tok_c[e]
                mx = -np.inf
                for k in range(K):
                    njk[j, k] -= c * gamma[e, k]
                    v = math.log(alpha[k] + _pos(njk[j, k]) + _pos(mjk[j, k])) + log_phi[g, k]
                    lw[k] = v
                    if v > mx:
                        mx = v
                s = 0.0
                for k in range(K):
                    w[k] = math.exp(lw[k] - mx)
                    s += w[k]
                if not (s > 0.0 and s < np.inf):
                    bad[0] = j
                    return 1
                for k in range(K):
                    gamma[e, k] = w[k] / s
                    njk[j, k] += c * gamma[e, k]

            for o in range(obs_ptr[j], obs_ptr[j + 1]):
                l = obs_l[o]
                tot = obs_tot[o]
                mx = -np.inf
                for k in range(K):
                    mjk[j, k] -= tot * lam[o, k]
                    v = math.log(alpha[k] + _pos(njk[j, k]) + _pos(mjk[j, k]))
                    for yi in range(obs_yptr[o], obs_yptr[o + 1]):
                        v += obs_yc[yi] * log_eta[obs_yv[yi], k]
                    if nmar:
                        v += log_psi[l, k]
                    lw[k] = v
                    if v > mx:
                        mx = v
                s = 0.0
                for k in range(K):
                    w[k] = math.exp(lw[k] - mx)
                    s += w[k]
                if not (s > 0.0 and s < np.inf):
                    bad[0] = j
                    return 2
                for k in range(K):
                    lam[o, k] = w[k] / s
                    mjk[j, k] += tot * lam[o, k]

            if not nmar:
                continue
            for mi in range(mis_ptr[j], mis_ptr[j + 1]):
                l = mis_l[mi]
                base = voff[l]
                V = nv[l]
                mx = -np.inf
                for k in range(K):
                    sk = 0.0
                    for v in range(V):
                        sk += pi[mi, k, v]
                    mjk[j, k] -= sk
                    d = math.log(alpha[k] + _pos(mjk[j, k]) + _pos(njk[j, k])) + log_1m_psi[l, k]
                    for v in range(V):
                        x = d + log_eta[base + v, k]
                        cell[k, v] = x
                        if x > mx:
                            mx = x
                s = 0.0
                for k in range(K):
                    for v in range(V):
                        cell[k, v] = math.exp(cell[k, v] - mx)
                        s += cell[k, v]
                if not (s > 0.0 and s < np.inf):
                    bad[0] = j
                    return 3
                for k in range(K):
                    sk = 0.0
                    for v in range(V):
                        pi[mi, k, v] = cell[k, v] / s
                        sk += pi[mi, k, v]
                    mjk[j, k] += sk
    return 0
