import numpy as np
import pytest
from conftest import brute_loglik, brute_viterbi, random_hmm, random_sequence

from mixhmm.core import HMMParameters, Offsets, Sequence
from mixhmm.inference import (
    BrokenChainError,
    emission_log_density,
    forward_backward,
    sequence_log_likelihood,
    viterbi,
)


def test_standard_normal_at_mean():
    got = emission_log_density([1.3], 0.0, [1.3], [1.0], [0.0])
    assert got == pytest.approx(-0.918938533, abs=1e-9)


def test_masked_dimension_marginalizes():
    two = emission_log_density([0.4, 99.0], 1.0, [0.1, 0.0], [0.5, 2.0], [0.2, 0.3], mask=[True, False])
    one = emission_log_density([0.4], 1.0, [0.1], [0.5], [0.2])
    assert two == pytest.approx(one, abs=1e-14)


def test_mean_shift_identity():
    mu, var, v, r, m, d = np.array([0.5, -1.0]), np.array([0.3, 2.0]), np.array([1.0, 0.2]), 0.7, -0.4, 2.5
    y = mu + (v + m) * d + r
    got = emission_log_density(y, d, mu, var, v, r, m)
    assert got == pytest.approx(float(np.sum(-0.5 * np.log(2 * np.pi * var))), abs=1e-12)


def test_emission_rejects_nonfinite_observed_entry():
    with pytest.raises(ValueError, match="dimension 1"):
        emission_log_density([0.0, np.inf], 0.0, [0.0, 0.0], [1.0, 1.0], [0.0, 0.0])
    assert emission_log_density([0.0, np.inf], 0.0, [0.0, 0.0], [1.0, 1.0], [0.0, 0.0], mask=[True, False]) < 0
    # without a mask NaN means missing
    assert emission_log_density([np.nan], 0.0, [0.0], [1.0], [0.0]) == 0.0


@pytest.mark.parametrize("trial", range(60))
def test_matches_path_enumeration(trial):
    rng = np.random.default_rng(trial)
    T, L, D = rng.integers(1, 5), rng.integers(1, 4), rng.integers(1, 3)
    flat = random_hmm(rng, L, D, zero_prob=0.3 if trial % 3 == 0 else 0.0)
    seq = random_sequence(rng, T, D)
    off = Offsets(rng.normal(size=D), rng.normal(size=D)) if trial % 2 else None
    r = off.r if off else None
    m = off.m if off else None

    post = forward_backward(seq, flat, off)
    assert post.loglik == pytest.approx(brute_loglik(seq, flat, r, m), abs=1e-10)

    dec = viterbi(seq, flat, off)
    path, lp = brute_viterbi(seq, flat, r, m)
    assert dec.states.tolist() == path.tolist()
    assert dec.map_loglik == pytest.approx(lp, abs=1e-10)
    assert dec.map_loglik <= post.loglik + 1e-12

    assert np.allclose(post.gamma.sum(axis=1), 1.0, atol=1e-10)
    if T > 1:
        assert np.allclose(post.xi.sum(axis=(1, 2)), 1.0, atol=1e-10)
        assert np.allclose(post.xi.sum(axis=2), post.gamma[:-1], atol=1e-8)
        assert np.allclose(post.xi.sum(axis=1), post.gamma[1:], atol=1e-8)


def test_gamma_matches_enumerated_marginals(rng):
    from conftest import enumerate_paths

    flat = random_hmm(rng, 3, 2)
    seq = random_sequence(rng, 4, 2)
    paths = enumerate_paths(seq, flat)
    lps = np.array([lp for _, lp in paths])
    w = np.exp(lps - lps.max())
    w /= w.sum()
    gamma = np.zeros((4, 3))
    for (p, _), wi in zip(paths, w):
        for t, s in enumerate(p):
            gamma[t, s] += wi
    assert np.allclose(forward_backward(seq, flat).gamma, gamma, atol=1e-10)


def test_single_state_is_sum_of_emissions(rng):
    flat = random_hmm(rng, 1, 2)
    seq = random_sequence(rng, 5, 2)
    expected = sum(
        emission_log_density(seq.observations[t], seq.inputs[t], flat.mu[0], flat.var[0], flat.v[0], mask=seq.mask[t])
        for t in range(5)
    )
    post = forward_backward(seq, flat)
    assert post.loglik == pytest.approx(expected, abs=1e-10)
    assert np.all(post.gamma == 1.0)
    dec = viterbi(seq, flat)
    assert dec.states.tolist() == [0] * 5
    assert dec.map_loglik == pytest.approx(post.loglik, abs=1e-10)


def test_identity_chain_stays_in_start_state(rng):
    L = 3
    flat = HMMParameters([1.0, 0.0, 0.0], np.eye(L), rng.normal(size=(L, 1)), np.ones((L, 1)), np.zeros((L, 1)))
    seq = random_sequence(rng, 6, 1, doses=False)
    assert viterbi(seq, flat).states.tolist() == [0] * 6


def test_loglik_equals_forward_backward(rng):
    flat = random_hmm(rng, 3, 2)
    seq = random_sequence(rng, 7, 2)
    assert sequence_log_likelihood(seq, flat) == forward_backward(seq, flat).loglik


def test_all_masked_single_step_is_zero(rng):
    flat = random_hmm(rng, 3, 2)
    seq = Sequence("a", [[np.nan, np.nan]], [[False, False]], [0.0])
    # only the rounding of sum(pi) remains
    assert sequence_log_likelihood(seq, flat) == pytest.approx(0.0, abs=1e-12)


def test_masking_matches_reduced_dimension(rng):
    flat = random_hmm(rng, 2, 2)
    seq = random_sequence(rng, 4, 2, p_missing=0.0)
    masked = Sequence("a", seq.observations, np.column_stack([seq.mask[:, 0], np.zeros(4, bool)]), seq.inputs)
    reduced = Sequence("a", seq.observations[:, :1], seq.mask[:, :1], seq.inputs)
    flat1 = HMMParameters(flat.pi, flat.A, flat.mu[:, :1], flat.var[:, :1], flat.v[:, :1])
    assert sequence_log_likelihood(masked, flat) == pytest.approx(sequence_log_likelihood(reduced, flat1), abs=1e-12)


def test_shift_covariance(rng):
    flat = random_hmm(rng, 3, 2)
    seq = random_sequence(rng, 6, 2)
    c = 3.7
    shifted = Sequence("a", seq.observations + np.array([0.0, c]), seq.mask, seq.inputs)
    flat2 = HMMParameters(flat.pi, flat.A, flat.mu + np.array([0.0, c]), flat.var, flat.v)
    assert sequence_log_likelihood(shifted, flat2) == pytest.approx(sequence_log_likelihood(seq, flat), abs=1e-9)


def test_masked_entries_are_ignored(rng):
    flat = random_hmm(rng, 2, 2)
    seq = random_sequence(rng, 5, 2, p_missing=0.4)
    other = Sequence("a", np.where(seq.mask, seq.observations, -42.0), seq.mask, seq.inputs)
    a, b = forward_backward(seq, flat), forward_backward(other, flat)
    assert a.loglik == b.loglik
    assert np.array_equal(a.gamma, b.gamma)


def test_left_to_right_zeros_stay_unreachable(rng):
    A = np.array([[0.6, 0.4, 0.0], [0.0, 0.7, 0.3], [0.0, 0.0, 1.0]])
    flat = HMMParameters([1.0, 0.0, 0.0], A, [[0.0], [1.0], [2.0]], np.ones((3, 1)), np.zeros((3, 1)), True)
    seq = random_sequence(rng, 4, 1)
    post = forward_backward(seq, flat)
    assert post.gamma[0].tolist() == [1.0, 0.0, 0.0]
    assert np.all(np.tril(post.xi.sum(axis=0), -1) == 0.0)
    assert post.loglik == pytest.approx(brute_loglik(seq, flat), abs=1e-10)


def test_unreachable_sequence_raises_broken_chain():
    # state 0 has no outgoing mass
    flat = HMMParameters([1.0, 0.0], [[0.0, 0.0], [0.0, 1.0]], [[0.0], [0.0]], [[1.0], [1.0]], [[0.0], [0.0]])
    seq = Sequence.from_values("bad", [[0.0], [0.0]])
    with pytest.raises(BrokenChainError, match="bad"):
        forward_backward(seq, flat)
