import itertools

import numpy as np
import pytest
from scipy.stats import norm

from mixhmm.core import HMMParameters, MixtureParameters, ModelSpec, Sequence, SequenceDataset
from mixhmm.synthdata import simulate_paper_experiment

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------


def random_hmm(rng, L, D, inputs=True, zero_prob=0.0):
    pi = rng.dirichlet(np.ones(L))
    A = rng.dirichlet(np.ones(L), size=L)
    if zero_prob:
        drop = rng.random((L, L)) < zero_prob
        np.fill_diagonal(drop, False)
        A = np.where(drop, 0.0, A)
        A = A / A.sum(axis=1, keepdims=True)
    mu = rng.normal(0, 1.5, size=(L, D))
    var = rng.uniform(0.2, 2.0, size=(L, D))
    v = rng.normal(0, 1, size=(L, D)) if inputs else np.zeros((L, D))
    return HMMParameters(pi, A, mu, var, v)


def random_sequence(rng, T, D, id="s", p_missing=0.25, doses=True):
    y = rng.normal(0, 2, size=(T, D))
    mask = rng.random((T, D)) > p_missing
    d = rng.uniform(0, 2, size=T) * (rng.random(T) < 0.7) if doses else np.zeros(T)
    # stored values under the mask are garbage on purpose
    return Sequence(id, np.where(mask, y, 1e300), mask, d)


def random_mixture(rng, K, sizes, D, inputs=True):
    comps = [random_hmm(rng, L, D, inputs) for L in sizes]
    return MixtureParameters(rng.dirichlet(np.ones(K)), comps)


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------


def oracle_emission(seq, t, flat, l, r, m):
    total = 0.0
    for d in range(seq.observations.shape[1]):
        if seq.mask[t, d]:
            mean = flat.mu[l, d] + r[d] + (flat.v[l, d] + m[d]) * seq.inputs[t]
            total += norm.logpdf(seq.observations[t, d], mean, np.sqrt(flat.var[l, d]))
    return total


def enumerate_paths(seq, flat, r=None, m=None):
    """(path, joint log-probability) for every state path."""
    D = seq.observations.shape[1]
    r = np.zeros(D) if r is None else np.asarray(r)
    m = np.zeros(D) if m is None else np.asarray(m)
    T, L = seq.length, flat.n_states
    em = np.array([[oracle_emission(seq, t, flat, l, r, m) for l in range(L)] for t in range(T)])
    with np.errstate(divide="ignore"):
        lpi, lA = np.log(flat.pi), np.log(flat.A)
    out = []
    for path in itertools.product(range(L), repeat=T):
        lp = lpi[path[0]] + em[0, path[0]]
        for t in range(1, T):
            lp += lA[path[t - 1], path[t]] + em[t, path[t]]
        out.append((path, lp))
    return out


def brute_loglik(seq, flat, r=None, m=None):
    lps = np.array([lp for _, lp in enumerate_paths(seq, flat, r, m)])
    top = lps.max()
    return top + np.log(np.sum(np.exp(lps - top)))


def brute_viterbi(seq, flat, r=None, m=None):
    best, best_lp = None, -np.inf
    for path, lp in enumerate_paths(seq, flat, r, m):
        if lp > best_lp:
            best, best_lp = path, lp
    return np.array(best), best_lp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def benchmark_data():
    return simulate_paper_experiment(0)


@pytest.fixture
def two_seq_dataset():
    a = Sequence.from_values("a", [[0.0, 1.0], [np.nan, 2.0], [1.0, 1.5]])
    b = Sequence.from_values("b", [[0.5, 0.5], [1.0, np.nan]], inputs=[0.0, 1.0])
    return SequenceDataset((a, b), 2)


def spec_for(mix: MixtureParameters, **kw) -> ModelSpec:
    D = mix.components[0].dim
    return ModelSpec(mix.n_components, mix.states_per_component, D, **kw)
