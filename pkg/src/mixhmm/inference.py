"""Exact log-space inference for a Gaussian-emission HMM with input effects.

Sequences are processed as a padded batch. Steps past a sequence's end are
given emission log-density 0; they never change likelihoods or posteriors of
real steps and are dropped from every returned quantity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import HMMParameters, NumericalError, Offsets, PersonalEffects, Sequence, SequenceDataset

LOG_2PI = float(np.log(2.0 * np.pi))


class BrokenChainError(NumericalError):
    pass


@dataclass(frozen=True)
class Posteriors:
    gamma: np.ndarray  # (T, L)
    xi: np.ndarray  # (T-1, L, L)
    loglik: float


@dataclass(frozen=True)
class DecodedPath:
    states: np.ndarray
    map_loglik: float


@dataclass(frozen=True)
class Batch:
    """Zero-padded arrays for a list of sequences."""

    ids: tuple[str, ...]
    y: np.ndarray  # (N, T, D), 0 where unobserved
    mask: np.ndarray  # (N, T, D) bool
    d: np.ndarray  # (N, T)
    lengths: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.y.shape[1])[None, :] < self.lengths[:, None]


def stack(sequences) -> Batch:
    seqs = list(sequences.sequences if isinstance(sequences, SequenceDataset) else sequences)
    N = len(seqs)
    T = max(s.length for s in seqs)
    D = seqs[0].observations.shape[1]
    y = np.zeros((N, T, D))
    mask = np.zeros((N, T, D), dtype=bool)
    d = np.zeros((N, T))
    lengths = np.zeros(N, dtype=int)
    for i, s in enumerate(seqs):
        n = s.length
        mask[i, :n] = s.mask
        y[i, :n] = np.where(s.mask, s.observations, 0.0)
        d[i, :n] = s.inputs
        lengths[i] = n
    return Batch(tuple(s.id for s in seqs), y, mask, d, lengths)


def _effect_arrays(effects, n: int, dim: int):
    """Normalize ``None`` / Offsets / PersonalEffects to four (N, D) arrays."""
    if effects is None:
        z = np.zeros((n, dim))
        return z, z, z, z
    if isinstance(effects, PersonalEffects):
        return effects.r_mean, effects.m_mean, effects.r_var, effects.m_var
    if isinstance(effects, Offsets):
        return tuple(
            np.broadcast_to(np.asarray(x, dtype=float), (n, dim))
            for x in (effects.r, effects.m, effects.r_var, effects.m_var)
        )
    raise TypeError(f"unsupported offsets type {type(effects).__name__}")


def batch_log_emissions(
    batch: Batch, flat: HMMParameters, effects=None, variance_correction: bool = False
) -> np.ndarray:
    """(N, T, L) emission log-densities summed over observed dimensions.

    With ``variance_correction`` the result is the expected log-density under
    Gaussian q(r), q(m): an extra ``-(r_var + d^2 m_var) / (2 var)`` per
    observed entry.
    """
    r, m, r_var, m_var = _effect_arrays(effects, batch.n, flat.dim)
    dd = batch.d[:, :, None, None]
    mean = flat.mu[None, None] + r[:, None, None, :] + (flat.v[None, None] + m[:, None, None, :]) * dd
    sq = (batch.y[:, :, None, :] - mean) ** 2
    if variance_correction:
        sq = sq + r_var[:, None, None, :] + dd**2 * m_var[:, None, None, :]
    var = flat.var[None, None]
    term = -0.5 * (LOG_2PI + np.log(var) + sq / var)
    return np.sum(np.where(batch.mask[:, :, None, :], term, 0.0), axis=-1)


def logsumexp(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Log-sum-exp along one axis; an all ``-inf`` slice gives ``-inf``."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def _raise_broken(batch: Batch, bad: np.ndarray):
    i = int(np.flatnonzero(bad)[0])
    raise BrokenChainError(
        f"broken chain: sequence {batch.ids[i]!r} has zero probability under the model "
        "(all transition mass from reachable states is zero)"
    )


def batch_forward(log_pi, log_A, log_e, lengths):
    """Forward log-messages (N, T, L) and per-sequence log-likelihoods."""
    N, T, L = log_e.shape
    alpha = np.empty((N, T, L))
    alpha[:, 0] = log_pi[None] + log_e[:, 0]
    for t in range(1, T):
        alpha[:, t] = log_e[:, t] + logsumexp(alpha[:, t - 1, :, None] + log_A[None], axis=1)
    last = alpha[np.arange(N), lengths - 1]
    return alpha, logsumexp(last, axis=1)


def batch_backward(log_A, log_e):
    N, T, L = log_e.shape
    beta = np.zeros((N, T, L))
    for t in range(T - 2, -1, -1):
        beta[:, t] = logsumexp(log_A[None] + (log_e[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
    return beta


def batch_posteriors(batch: Batch, flat: HMMParameters, log_e: np.ndarray, full_xi: bool = False):
    """Run forward-backward on a batch.

    Returns ``(gamma, xi, loglik)`` where gamma is (N, T, L) with padded rows
    zeroed, loglik is (N,), and xi is either the full (N, T-1, L, L) array
    (padded slices zeroed) or its sum over time, (N, L, L).
    """
    log_pi = _log(flat.pi)
    log_A = _log(flat.A)
    with np.errstate(invalid="ignore"):
        alpha, ll = batch_forward(log_pi, log_A, log_e, batch.lengths)
    if not np.all(np.isfinite(ll)):
        _raise_broken(batch, ~np.isfinite(ll))
    beta = batch_backward(log_A, log_e)
    valid = batch.valid
    s = alpha + beta
    gamma = np.exp(s - logsumexp(s, axis=2, keepdims=True))
    gamma = np.where(valid[:, :, None], gamma, 0.0)
    N, T, L = log_e.shape
    if T > 1:
        lx = (
            alpha[:, :-1, :, None]
            + log_A[None, None]
            + (log_e[:, 1:] + beta[:, 1:])[:, :, None, :]
        )
        norm = logsumexp(lx.reshape(N, T - 1, L * L), axis=2)
        xi = np.exp(lx - norm[:, :, None, None])
        xi = np.where(valid[:, 1:, None, None], xi, 0.0)
    else:
        xi = np.zeros((N, 0, L, L))
    if not full_xi:
        xi = xi.sum(axis=1)
    return gamma, xi, ll


def batch_loglik(batch: Batch, flat: HMMParameters, log_e: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        _, ll = batch_forward(_log(flat.pi), _log(flat.A), log_e, batch.lengths)
    if not np.all(np.isfinite(ll)):
        _raise_broken(batch, ~np.isfinite(ll))
    return ll


def batch_viterbi(batch: Batch, flat: HMMParameters, log_e: np.ndarray):
    """Most likely paths (list of int arrays) and their joint log-probabilities."""
    log_pi, log_A = _log(flat.pi), _log(flat.A)
    N, T, L = log_e.shape
    delta = np.empty((N, T, L))
    back = np.zeros((N, T, L), dtype=int)
    delta[:, 0] = log_pi[None] + log_e[:, 0]
    for t in range(1, T):
        cand = delta[:, t - 1, :, None] + log_A[None]
        # argmax returns the first maximum, i.e. ties go to the lower index
        back[:, t] = np.argmax(cand, axis=1)
        delta[:, t] = log_e[:, t] + np.max(cand, axis=1)
    paths, scores = [], np.empty(N)
    for i in range(N):
        n = int(batch.lengths[i])
        last = delta[i, n - 1]
        s = int(np.argmax(last))
        scores[i] = last[s]
        path = np.empty(n, dtype=int)
        path[-1] = s
        for t in range(n - 1, 0, -1):
            path[t - 1] = back[i, t, path[t]]
        paths.append(path)
    if not np.all(np.isfinite(scores)):
        _raise_broken(batch, ~np.isfinite(scores))
    return paths, scores


# ---------------------------------------------------------------------------
# single-sequence API
# ---------------------------------------------------------------------------


def emission_log_density(y, d_t: float, mu, var, v, r=0.0, m=0.0, mask=None) -> float:
    """Diagonal Gaussian log-density of one visit under one state.

    Entries are skipped where ``mask`` is False, or where ``y`` is NaN when no
    mask is given. A visit with nothing observed has log-density exactly 0.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mask = ~np.isnan(y) if mask is None else np.atleast_1d(np.asarray(mask, dtype=bool))
    mu, var, v = (np.broadcast_to(np.asarray(a, dtype=float), y.shape) for a in (mu, var, v))
    r, m = (np.broadcast_to(np.asarray(a, dtype=float), y.shape) for a in (r, m))
    if not np.isfinite(d_t):
        raise ValueError(f"non-finite input d_t={d_t}")
    total = 0.0
    for k in np.flatnonzero(mask):
        vals = (y[k], mu[k], var[k], v[k], r[k], m[k])
        if not all(np.isfinite(vals)):
            raise ValueError(f"non-finite value in dimension {k}")
        mean = mu[k] + r[k] + (v[k] + m[k]) * d_t
        total += -0.5 * (LOG_2PI + np.log(var[k]) + (y[k] - mean) ** 2 / var[k])
    return float(total)


def _single(seq: Sequence, flat: HMMParameters, offsets):
    batch = stack([seq])
    if isinstance(offsets, PersonalEffects):
        offsets = offsets.offsets(0)
    return batch, batch_log_emissions(batch, flat, offsets)


def forward_backward(seq: Sequence, flat: HMMParameters, offsets: Offsets | None = None) -> Posteriors:
    batch, log_e = _single(seq, flat, offsets)
    gamma, xi, ll = batch_posteriors(batch, flat, log_e, full_xi=True)
    return Posteriors(gamma[0], xi[0], float(ll[0]))


def viterbi(seq: Sequence, flat: HMMParameters, offsets: Offsets | None = None) -> DecodedPath:
    batch, log_e = _single(seq, flat, offsets)
    paths, scores = batch_viterbi(batch, flat, log_e)
    return DecodedPath(paths[0], float(scores[0]))


def sequence_log_likelihood(seq: Sequence, flat: HMMParameters, offsets: Offsets | None = None) -> float:
    batch, log_e = _single(seq, flat, offsets)
    return float(batch_loglik(batch, flat, log_e)[0])
