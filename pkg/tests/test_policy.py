import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from varlab.policy import TabularPolicy, init_from_reference, init_zeros, load_policy, save_policy
from varlab.space import make_space

logit_rows = arrays(np.float64, st.integers(2, 12), elements=st.floats(-1e3, 1e3))


def test_zero_logits_log_prob():
    p = TabularPolicy(np.zeros((1, 4)))
    assert p.log_prob(0, 2) == pytest.approx(math.log(0.25), abs=1e-15)


def test_log_prob_ln3():
    p = TabularPolicy([[math.log(3.0), 0.0]])
    assert p.log_prob(0, 0) == pytest.approx(math.log(3 / 4), abs=1e-15)
    assert p.log_prob(0, 0) == pytest.approx(-0.287682, abs=1e-6)


def test_as_distribution():
    np.testing.assert_allclose(TabularPolicy(np.zeros((2, 5))).as_distribution(1), 0.2, atol=1e-15)
    np.testing.assert_allclose(TabularPolicy([[0.0, math.log(9.0)]]).as_distribution(0), [0.1, 0.9], atol=1e-15)


def test_saturation():
    logits = np.zeros((1, 6))
    logits[0, 3] = 50.0
    d = TabularPolicy(logits).as_distribution(0)
    # the five losers carry exp(-50) each
    assert d.sum() - d[3] < 1e-20
    assert d[3] == pytest.approx(1.0, abs=1e-20)


def test_out_of_range():
    p = TabularPolicy(np.zeros((2, 3)))
    with pytest.raises(IndexError):
        p.log_prob(2, 0)
    with pytest.raises(IndexError):
        p.as_distribution(-1)


@settings(max_examples=100, deadline=None)
@given(logit_rows, st.floats(-1e3, 1e3))
def test_shift_invariance(row, c):
    a = TabularPolicy(row[None, :]).as_distribution(0)
    b = TabularPolicy(row[None, :] + c).as_distribution(0)
    assert np.max(np.abs(a - b)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(logit_rows)
def test_normalized_under_large_logits(row):
    p = TabularPolicy(row[None, :])
    total = sum(math.exp(p.log_prob(0, y)) for y in range(row.size))
    assert abs(total - 1.0) < 1e-12
    assert np.all(np.isfinite(p.log_probs()))


def test_init_from_reference():
    space = make_space(3, 8, "random-dirichlet", seed=7)
    pol = init_from_reference(space)
    assert np.max(np.abs(pol.probs() - space.ref_policy)) < 1e-12
    uni = init_from_reference(make_space(2, 4))
    assert np.all(uni.logits == uni.logits[0, 0])
    assert np.all(init_zeros(space).logits == 0)


def test_checkpoint_round_trip(tmp_path, rng):
    pol = TabularPolicy(rng.normal(size=(3, 7)) * 1e3)
    pol.logits[0, 0] = 0.1 + 0.2
    pol.logits[1, 1] = 5e-324
    path = tmp_path / "p.json"
    save_policy(path, pol)
    back = load_policy(path)
    assert back.logits.tobytes() == pol.logits.tobytes()
