"""Synthetic corpora drawn from the full generative process.

Global topic parameters come from one seeded stream; every patient draws from
its own stream derived from ``(seed, patient index)``, so corpora do not
depend on the order or parallelism of generation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Corpus, Schema, write_corpus, write_meta
from .errors import ValidationError

_GLOBAL_STREAM = 0
_PATIENT_STREAM = 1
_HYPER_STREAM = 2


@dataclass
class SimConfig:
    """Dimensions, priors and optional fixed parameters of a simulation.

    Scalar priors are broadcast; ``"sample"`` draws each prior entry from a
    Gamma(2, 1) hyperprior.  ``theta`` (D x K), ``phi`` (per type, W_t x K),
    ``eta`` (per lab, K x V_l) and ``psi`` (L x K) override sampling when given.
    """

    D: int
    K: int
    W: list
    V: list = field(default_factory=list)
    tokens_per_type: tuple = (20, 60)
    alpha: object = 1.0
    beta: object = 0.1
    zeta: object = 1.0
    a: object = 1.0
    b: object = 1.0
    repeat: tuple = (1, 1)
    theta: object = None
    phi: object = None
    eta: object = None
    psi: object = None
    seed: int = 0

    def __post_init__(self):
        if self.D < 0:
            raise ValidationError("D must be >= 0")
        if self.K < 1:
            raise ValidationError("K must be >= 1")
        if any(int(w) < 1 for w in self.W):
            raise ValidationError("every type needs W_t >= 1")
        if any(int(v) < 2 for v in self.V):
            raise ValidationError("every lab needs V_l >= 2")
        lo, hi = self.tokens_per_type
        if lo < 0 or hi < lo:
            raise ValidationError("tokens_per_type must be a range lo <= hi")
        lo, hi = self.repeat
        if lo < 1 or hi < lo:
            raise ValidationError("repeat must be a range 1 <= lo <= hi")

    @property
    def T(self):
        return len(self.W)

    @property
    def L(self):
        return len(self.V)

    @property
    def schema(self):
        return Schema.build(self.W, self.V)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        for key in ("tokens_per_type", "repeat"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json_dict(self):
        d = asdict(self)
        for key in ("theta", "phi", "eta", "psi"):
            x = d[key]
            if x is not None:
                d[key] = np.asarray(x).tolist() if key in ("theta", "psi") else [
                    np.asarray(e).tolist() for e in x
                ]
        return d


@dataclass
class GroundTruth:
    theta: np.ndarray
    phi: list
    eta: list
    psi: np.ndarray
    y: np.ndarray
    h: np.ndarray
    r: np.ndarray
    repeats: np.ndarray

    @property
    def D(self):
        return self.theta.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return GroundTruth(
            self.theta[idx], self.phi, self.eta, self.psi,
            self.y[idx], self.h[idx], self.r[idx], self.repeats[idx],
        )


def _prior(value, size, rng):
    if isinstance(value, str):
        if value != "sample":
            raise ValidationError(f"unknown prior setting {value!r}")
        return rng.gamma(2.0, 1.0, size=size)
    x = np.broadcast_to(np.asarray(value, dtype=np.float64), size).copy()
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValidationError("prior values must be positive and finite")
    return x


def _check_simplex(x, axis, name):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or not np.allclose(x.sum(axis=axis), 1.0, atol=1e-8):
        raise ValidationError(f"{name} is not a valid simplex array")
    return x


def _dirichlet(rng, alpha, size=None):
    # gamma draws for tiny concentrations underflow to all-zero rows; retry
    while True:
        x = rng.dirichlet(alpha, size=size)
        if np.all(np.isfinite(x)) and np.all(x.sum(axis=-1) > 0):
            return x


def _draw_globals(cfg):
    K = cfg.K
    hrng = np.random.default_rng([cfg.seed, _HYPER_STREAM])
    alpha = _prior(cfg.alpha, K, hrng)
    beta = [_prior(cfg.beta, int(w), hrng) for w in cfg.W]
    zeta = [_prior(cfg.zeta, int(v), hrng) for v in cfg.V]
    a = _prior(cfg.a, cfg.L, hrng)
    b = _prior(cfg.b, cfg.L, hrng)

    rng = np.random.default_rng([cfg.seed, _GLOBAL_STREAM])
    if cfg.phi is not None:
        phi = [_check_simplex(p, 0, "phi") for p in cfg.phi]
        if [p.shape for p in phi] != [(int(w), K) for w in cfg.W]:
            raise ValidationError("phi shapes do not match W x K")
    else:
        phi = [_dirichlet(rng, bt, size=K).T.copy() for bt in beta]
    if cfg.eta is not None:
        eta = [_check_simplex(e, 1, "eta") for e in cfg.eta]
        if [e.shape for e in eta] != [(K, int(v)) for v in cfg.V]:
            raise ValidationError("eta shapes do not match K x V_l")
    else:
        eta = [_dirichlet(rng, z, size=K) for z in zeta]
    if cfg.psi is not None:
        psi = np.asarray(cfg.psi, dtype=np.float64).reshape(cfg.L, K)
        if np.any(psi < 0) or np.any(psi > 1):
            raise ValidationError("psi entries must lie in [0, 1]")
    else:
        psi = np.stack([rng.beta(a[l], b[l], size=K) for l in range(cfg.L)]) if cfg.L else np.zeros((0, K))
    theta = None
    if cfg.theta is not None:
        theta = _check_simplex(np.asarray(cfg.theta).reshape(cfg.D, K), 1, "theta")
    return alpha, phi, eta, psi, theta


def _categorical(rng, p, n=None):
    """Index draws from probability vector(s) ``p`` by inverse CDF."""
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(n if n is not None else p.shape[:-1]) * cdf[..., -1]
    if p.ndim == 1:
        return np.minimum(np.searchsorted(cdf, u, side="right"), p.shape[-1] - 1)
    idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def simulate(cfg):
    """Draw a corpus and its ground truth.

    Lab rows appear in the corpus only for tests whose indicator came up 1;
    the ground truth keeps hidden values of missing tests as well.
    """
    K, D, L = cfg.K, cfg.D, cfg.L
    schema = cfg.schema
    alpha, phi, eta, psi, theta_fixed = _draw_globals(cfg)
    eta_pad = np.zeros((L, K, schema.v_max))
    for l, e in enumerate(eta):
        eta_pad[l, :, : e.shape[1]] = e

    theta = np.zeros((D, K))
    y = np.zeros((D, L), dtype=np.int64)
    h = np.zeros((D, L), dtype=np.int64)
    r = np.zeros((D, L), dtype=bool)
    repeats = np.zeros((D, L), dtype=np.int64)
    tok = [[], [], [], []]
    lo, hi = cfg.tokens_per_type
    rlo, rhi = cfg.repeat
    for j in range(D):
        rng = np.random.default_rng([cfg.seed, _PATIENT_STREAM, j])
        th = theta_fixed[j] if theta_fixed is not None else _dirichlet(rng, alpha)
        theta[j] = th
        for t in range(cfg.T):
            M = int(rng.integers(lo, hi + 1))
            nz = rng.multinomial(M, th)
            counts = np.zeros(int(cfg.W[t]), dtype=np.int64)
            for k in np.flatnonzero(nz):
                counts += rng.multinomial(nz[k], phi[t][:, k])
            w = np.flatnonzero(counts)
            tok[0].append(np.full(len(w), j))
            tok[1].append(np.full(len(w), t))
            tok[2].append(w)
            tok[3].append(counts[w])
        if L:
            hj = _categorical(rng, th, L)
            h[j] = hj
            y[j] = _categorical(rng, eta_pad[np.arange(L), hj])
            r[j] = rng.random(L) < psi[np.arange(L), hj]
            repeats[j] = np.where(r[j], rng.integers(rlo, rhi + 1, size=L), 0)

    tokens = tuple(np.concatenate(c) if c else np.zeros(0, dtype=np.int64) for c in tok)
    jj, ll = np.nonzero(r)
    labs = (jj, ll, y[jj, ll], repeats[jj, ll])
    corpus = Corpus.from_arrays(schema, np.arange(1, D + 1), tokens, labs)
    truth = GroundTruth(theta, phi, eta, psi, y, h, r, repeats)
    return corpus, truth


@dataclass
class MaskedTargets:
    """Missing tests with their hidden true values (0-based indices)."""

    patient: np.ndarray
    lab: np.ndarray
    value: np.ndarray

    def __len__(self):
        return len(self.patient)

    def subset_patients(self, idx):
        """Targets of the given patients, renumbered to positions in ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        pos = {int(p): i for i, p in enumerate(idx)}
        keep = np.array([int(p) in pos for p in self.patient], dtype=bool)
        new = np.array([pos[int(p)] for p in self.patient[keep]], dtype=np.int64)
        return MaskedTargets(new, self.lab[keep], self.value[keep])


def masked_eval_split(truth, fraction=1.0, seed=0):
    """The (patient, test) pairs that were never observed, with true values.

    ``fraction < 1`` keeps a seeded random subset of those pairs.
    """
    jj, ll = np.nonzero(~truth.r)
    if fraction < 1.0:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.permutation(len(jj))[: int(round(fraction * len(jj)))])
        jj, ll = jj[keep], ll[keep]
    return MaskedTargets(jj.astype(np.int64), ll.astype(np.int64), truth.y[jj, ll])


def write_simulation(prefix, corpus, truth):
    """Write ``prefix.meta``, ``prefix.data``, ``prefix.truth`` and ``prefix.params.npz``.

    The truth sidecar lists every lab pair in data-file layout with a sixth
    column: 1 when the test was observed, 0 when its value was hidden.
    """
    schema = corpus.schema
    paths = [f"{prefix}.meta", f"{prefix}.data", f"{prefix}.truth", f"{prefix}.params.npz"]
    write_meta(schema, paths[0])
    write_corpus(corpus, paths[1])
    lab_type = schema.lab_type_id
    with open(paths[2], "w") as fh:
        fh.write("# patient_id type_id lab_id value count observed\n")
        for j in range(truth.D):
            pid = corpus.patient_ids[j]
            for l in range(schema.L):
                obs = int(truth.r[j, l])
                count = int(truth.repeats[j, l]) if obs else 1
                fh.write(f"{pid} {lab_type} {l + 1} {truth.y[j, l] + 1} {count} {obs}\n")
    arrays = {"theta": truth.theta, "psi": truth.psi}
    for t, p in enumerate(truth.phi):
        arrays[f"phi_{t + 1}"] = p
    for l, e in enumerate(truth.eta):
        arrays[f"eta_{l + 1}"] = e
    np.savez(paths[3], **arrays)
    return paths


def read_truth_sidecar(path, corpus):
    """Masked targets from a truth sidecar, aligned to ``corpus`` patients."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            pid, _, l, v, _, obs = (int(x) for x in line.split())
            if not obs:
                rows.append((corpus.index_of(pid), l - 1, v - 1))
    a = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return MaskedTargets(a[:, 0], a[:, 1], a[:, 2])
