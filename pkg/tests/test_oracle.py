import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixtopic.corpus import Corpus, Schema
from mixtopic.errors import ValidationError
from mixtopic.inference import Hyperparams
from mixtopic.oracle import (
    assignment_space, brute_force_oracle, compare, cvb_marginals, random_tiny_hyper, write_marginals,
)

from conftest import random_corpus


def _corpus(W, V, tokens, labs, D):
    s = Schema.build(W, V)
    return Corpus.from_arrays(s, np.arange(1, D + 1), tuple(map(list, zip(*tokens))) if tokens else None,
                              tuple(map(list, zip(*labs))) if labs else None)


def _permuted(hp, perm):
    return Hyperparams(hp.alpha[perm], hp.beta.copy(), hp.zeta.copy(), hp.a.copy(), hp.b.copy())


def test_single_topic():
    c = _corpus([2], [2], [(0, 0, 1, 2)], [(0, 0, 1, 1)], D=2)
    res = brute_force_oracle(c, Hyperparams.initial(c.schema, 1), 1)
    assert np.allclose(res.z, 1) and np.allclose(res.h_observed, 1) and np.allclose(res.h_missing, 1)
    assert math.isfinite(res.log_marginal)


def test_single_topic_marginal_matches_dirichlet_multinomial():
    # one patient, two tokens of feature 1 from W=2 with beta=1: p = 1/2 * 2/3
    c = _corpus([2], [], [(0, 0, 0, 2)], [], D=1)
    hp = Hyperparams.initial(c.schema, 1, beta=1.0)
    res = brute_force_oracle(c, hp, 1)
    assert abs(res.log_marginal - math.log(1 / 3)) < 1e-12


def test_symmetric_instance_uniform():
    c = _corpus([2], [2], [(0, 0, 0, 1), (0, 0, 1, 1)], [(0, 0, 0, 1)], D=1)
    res = brute_force_oracle(c, Hyperparams.initial(c.schema, 2), 2)
    assert np.allclose(res.z, 0.5) and np.allclose(res.h_observed, 0.5)


def test_space_refusal():
    c = _corpus([2], [], [(0, 0, 0, 30)], [], D=1)
    assert assignment_space(c, 2) == 2**30
    with pytest.raises(ValidationError, match="exceeds"):
        brute_force_oracle(c, Hyperparams.initial(c.schema, 2), 2)


def test_mar_has_no_missing_variables():
    c = _corpus([2], [2, 2], [(0, 0, 0, 1)], [(0, 0, 1, 1)], D=1)
    res = brute_force_oracle(c, Hyperparams.initial(c.schema, 2), 2, nmar=False)
    assert res.h_missing.shape == (0, 2) and res.y_missing.shape[0] == 0


@given(st.integers(0, 2**32 - 1))
def test_marginals_normalized_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    c = random_corpus(rng, D=int(rng.integers(1, 3)), W=[int(rng.integers(1, 4))], V=[2], max_count=2,
                      p_token=0.5)
    if assignment_space(c, 2) > 2**14:
        c = c.subset([0])
    hp = random_tiny_hyper(c.schema, 2, rng)
    res = brute_force_oracle(c, hp, 2)
    for arr in (res.z, res.h_observed, res.h_missing, res.y_missing):
        assert np.allclose(arr.sum(axis=1), 1, atol=1e-12)
    swapped = brute_force_oracle(c, _permuted(hp, [1, 0]), 2)
    assert abs(swapped.log_marginal - res.log_marginal) < 1e-9
    assert np.allclose(swapped.z, res.z[:, ::-1], atol=1e-12)


def test_cvb_close_to_exact_on_two_patients():
    # D=2, K=2, W=2 with two tokens per patient, one lab with one test missing
    c = _corpus([2], [2], [(0, 0, 0, 1), (0, 0, 1, 1), (1, 0, 1, 2)], [(0, 0, 0, 1)], D=2)
    hp = Hyperparams.initial(c.schema, 2, beta=0.5)
    hp.alpha[:] = [0.7, 1.4]
    exact = brute_force_oracle(c, hp, 2)
    approx = cvb_marginals(c, hp, 2)
    assert exact.h_missing.shape[0] == 1
    assert compare(exact, approx).max() <= 0.15


def test_write_marginals(tmp_path):
    c = _corpus([2], [2], [(0, 0, 0, 1)], [(0, 0, 1, 1)], D=1)
    res = brute_force_oracle(c, Hyperparams.initial(c.schema, 2), 2)
    write_marginals(res, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "variable,index,state,probability" and len(lines) == 1 + 2 + 2
