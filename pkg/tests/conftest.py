import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mixtopic.corpus import Corpus, Schema
from mixtopic.estimates import TopicEstimates

settings.register_profile(
    "default",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "invariant: property-based test (hypothesis)")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")


def pytest_collection_modifyitems(config, items):
    for item in items:
        if getattr(getattr(item, "obj", None), "is_hypothesis_test", False):
            item.add_marker(pytest.mark.invariant)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

PROPERTY_CASES = 100


def random_corpus(rng, D=None, W=None, V=None, max_count=3, p_token=0.4, p_lab=0.6):
    """Small random corpus; every patient gets at least one row."""
    D = int(rng.integers(1, 6)) if D is None else D
    W = list(rng.integers(1, 5, size=int(rng.integers(1, 3)))) if W is None else W
    V = list(rng.integers(2, 4, size=int(rng.integers(0, 3)))) if V is None else V
    schema = Schema.build(W, V)
    tok = [[], [], [], []]
    lab = [[], [], [], []]
    for j in range(D):
        for t, w_t in enumerate(W):
            for w in range(w_t):
                if rng.random() < p_token:
                    tok[0].append(j); tok[1].append(t); tok[2].append(w)
                    tok[3].append(int(rng.integers(1, max_count + 1)))
        for l, v_l in enumerate(V):
            if rng.random() < p_lab:
                for v in rng.choice(v_l, size=int(rng.integers(1, v_l + 1)), replace=False):
                    lab[0].append(j); lab[1].append(l); lab[2].append(int(v))
                    lab[3].append(int(rng.integers(1, max_count + 1)))
        if not any(p == j for p in tok[0]) and not any(p == j for p in lab[0]):
            tok[0].append(j); tok[1].append(0); tok[2].append(0); tok[3].append(1)
    ids = rng.choice(np.arange(1, 1000), size=D, replace=False)
    return Corpus.from_arrays(schema, ids, tuple(tok), tuple(lab))


@st.composite
def corpora(draw, max_D=5):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return random_corpus(rng, D=int(rng.integers(1, max_D + 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_estimates(W, V, K, rng=None, phi=None, eta=None, psi=None, alpha=None, nmar=True):
    """Topic estimates built directly; unspecified tables are random simplices."""
    schema = Schema.build(W, V)
    rng = rng or np.random.default_rng(0)

    def simplex(offsets, n):
        x = rng.uniform(0.1, 1.0, (n, K))
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            x[lo:hi] /= x[lo:hi].sum(axis=0)
        return x

    phi = simplex(schema.feature_offsets, schema.n_features) if phi is None else np.asarray(phi, float)
    eta = simplex(schema.value_offsets, schema.n_values) if eta is None else np.asarray(eta, float)
    psi = rng.uniform(0.1, 0.9, (schema.L, K)) if psi is None else np.asarray(psi, float)
    alpha = np.ones(K) if alpha is None else np.asarray(alpha, float)
    return TopicEstimates(
        schema, phi, eta, psi, alpha, np.full(schema.n_features, 0.1),
        np.ones(schema.n_values), np.ones(schema.L), np.ones(schema.L), nmar=nmar,
    )


def planted_labels(theta, topic=0, slope=15.0, center=0.3, seed=5):
    """Binary outcomes drawn through a logistic link on one topic's share."""
    rng = np.random.default_rng(seed)
    p = 1.0 / (1.0 + np.exp(-slope * (theta[:, topic] - center)))
    return (rng.random(len(p)) < p).astype(np.int64)


def twenty_point_set():
    """Fixed, non-separable 20-row design used by the solver cross-checks."""
    rng = np.random.default_rng(20)
    X = rng.normal(size=(20, 3))
    y = (X @ [1.5, -1.0, 0.5] + rng.normal(scale=1.5, size=20) > 0).astype(np.int64)
    return X, y
