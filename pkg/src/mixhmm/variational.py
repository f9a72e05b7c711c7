"""Coordinate-ascent variational EM for personalized models.

Each sequence i carries Gaussian factors q(r_i) and q(m_i) with diagonal
covariance; the state posterior q(x_i) is the exact HMM posterior under the
expected emission log-densities. Evaluated at that optimal q(x), the bound is

    ELBO = sum_i log sum_x p(x) exp(E_q[log p(y_i | x, r_i, m_i)])
           - KL(q(r) || p(r)) - KL(q(m) || p(m))

and every sub-step below (q(x), q(r), q(m), theta, recentering) is an exact
coordinate maximizer, so the bound never decreases across a sweep.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import em
from . import inference as inf
from .core import FitResult, HMMParameters, ModelSpec, PersonalEffects, Sequence, SequenceDataset


@dataclass(frozen=True)
class ELBOReport:
    total: float
    expected_loglik: float
    kl_r: float
    kl_m: float


def gaussian_kl(mean, var, prior_var) -> float:
    """KL(N(mean, var) || N(0, prior_var)) summed over entries."""
    mean, var = np.asarray(mean, dtype=float), np.asarray(var, dtype=float)
    ratio = var / prior_var
    return float(0.5 * np.sum(ratio + mean**2 / prior_var - 1.0 - np.log(ratio)))


# ---------------------------------------------------------------------------
# batched updates
# ---------------------------------------------------------------------------


def _weights(batch: inf.Batch, gamma: np.ndarray, flat: HMMParameters) -> np.ndarray:
    # gamma_{t,l} / var_{l,d} on observed entries, (N, T, L, D)
    return gamma[:, :, :, None] * batch.mask[:, :, None, :] / flat.var[None, None]


def batch_update_r(batch, gamma, flat, m_mean, prior_var):
    W = _weights(batch, gamma, flat)
    dd = batch.d[:, :, None, None]
    resid = batch.y[:, :, None, :] - flat.mu[None, None] - (flat.v[None, None] + m_mean[:, None, None, :]) * dd
    prec = 1.0 / prior_var + W.sum(axis=(1, 2))
    mean = np.sum(W * resid, axis=(1, 2)) / prec
    return mean, 1.0 / prec


def batch_update_m(batch, gamma, flat, r_mean, prior_var):
    W = _weights(batch, gamma, flat)
    dd = batch.d[:, :, None, None]
    resid = (batch.y[:, :, None, :] - flat.mu[None, None] - r_mean[:, None, None, :] - flat.v[None, None] * dd) * dd
    prec = 1.0 / prior_var + np.sum(W * dd**2, axis=(1, 2))
    mean = np.sum(W * resid, axis=(1, 2)) / prec
    return mean, 1.0 / prec


# ---------------------------------------------------------------------------
# single-sequence API
# ---------------------------------------------------------------------------


def _gamma_batch(seq: Sequence, posteriors) -> tuple[inf.Batch, np.ndarray]:
    batch = inf.stack([seq])
    return batch, np.asarray(posteriors.gamma)[None]


def update_personal_offsets(seq: Sequence, posteriors, flat: HMMParameters, prior_var_r: float, m_mean=None):
    """Optimal Gaussian q(r) for one sequence given q(x) and the mean of q(m)."""
    batch, gamma = _gamma_batch(seq, posteriors)
    m = np.zeros((1, flat.dim)) if m_mean is None else np.asarray(m_mean, dtype=float).reshape(1, -1)
    mean, var = batch_update_r(batch, gamma, flat, m, prior_var_r)
    return mean[0], var[0]


def update_personal_input_effects(seq: Sequence, posteriors, flat: HMMParameters, prior_var_m: float, r_mean=None):
    """Optimal Gaussian q(m) for one sequence given q(x) and the mean of q(r)."""
    batch, gamma = _gamma_batch(seq, posteriors)
    r = np.zeros((1, flat.dim)) if r_mean is None else np.asarray(r_mean, dtype=float).reshape(1, -1)
    mean, var = batch_update_m(batch, gamma, flat, r, prior_var_m)
    return mean[0], var[0]


def elbo(dataset: SequenceDataset, flat: HMMParameters, effects: PersonalEffects | None, spec: ModelSpec) -> ELBOReport:
    batch = inf.stack(dataset)
    if effects is None or not spec.personalized:
        ll = float(np.sum(inf.batch_loglik(batch, flat, inf.batch_log_emissions(batch, flat))))
        return ELBOReport(ll, ll, 0.0, 0.0)
    log_e = inf.batch_log_emissions(batch, flat, effects, variance_correction=True)
    expected = float(np.sum(inf.batch_loglik(batch, flat, log_e)))
    kl_r = gaussian_kl(effects.r_mean, effects.r_var, spec.prior_var_r) if spec.personal_state_offset else 0.0
    kl_m = gaussian_kl(effects.m_mean, effects.m_var, spec.prior_var_m) if spec.personal_input_effect else 0.0
    return ELBOReport(expected - kl_r - kl_m, expected, kl_r, kl_m)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


class Personalizer:
    """Variational hook plugged into the shared EM loop."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def initial(self, batch: inf.Batch) -> PersonalEffects:
        n, D = batch.n, batch.y.shape[2]
        z = np.zeros((n, D))
        r_mean = z
        if self.spec.personal_state_offset:
            cnt = batch.mask.sum(axis=1)
            tot = batch.y.sum(axis=1)
            pooled = tot.sum(axis=0) / np.maximum(cnt.sum(axis=0), 1)
            r_mean = np.where(cnt > 0, tot / np.maximum(cnt, 1) - pooled[None], 0.0)
        r_var = np.full((n, D), self.spec.prior_var_r) if self.spec.personal_state_offset else z
        m_var = np.full((n, D), self.spec.prior_var_m) if self.spec.personal_input_effect else z
        return PersonalEffects(r_mean, r_var, z, m_var, batch.ids)

    def kl(self, effects: PersonalEffects) -> float:
        s = self.spec
        out = 0.0
        if s.personal_state_offset:
            out += gaussian_kl(effects.r_mean, effects.r_var, s.prior_var_r)
        if s.personal_input_effect:
            out += gaussian_kl(effects.m_mean, effects.m_var, s.prior_var_m)
        return out

    def update(self, batch, gamma, flat, effects: PersonalEffects) -> PersonalEffects:
        s = self.spec
        r_mean, r_var, m_mean, m_var = effects.r_mean, effects.r_var, effects.m_mean, effects.m_var
        if s.personal_state_offset:
            r_mean, r_var = batch_update_r(batch, gamma, flat, m_mean, s.prior_var_r)
        if s.personal_input_effect:
            m_mean, m_var = batch_update_m(batch, gamma, flat, r_mean, s.prior_var_m)
        return PersonalEffects(r_mean, r_var, m_mean, m_var, effects.ids)

    def recenter(self, flat: HMMParameters, effects: PersonalEffects):
        """Move the population mean of the offsets into the shared parameters.

        The emission means are unchanged and the KL terms can only shrink.
        """
        mu, v = flat.mu, flat.v
        r_mean, m_mean = effects.r_mean, effects.m_mean
        if self.spec.personal_state_offset:
            c = r_mean.mean(axis=0)
            mu = mu + c[None]
            r_mean = r_mean - c[None]
        if self.spec.personal_input_effect:
            c = m_mean.mean(axis=0)
            v = v + c[None]
            m_mean = m_mean - c[None]
        return (
            replace(flat, mu=mu, v=v),
            PersonalEffects(r_mean, effects.r_var, m_mean, effects.m_var, effects.ids),
        )


def fit_personalized(dataset: SequenceDataset, spec: ModelSpec, options: em.FitOptions = em.FitOptions()) -> FitResult:
    """Variational EM fit; the objective trace holds ELBO values.

    With both personal flags off this is exactly ``em.fit``.
    """
    if not spec.personalized:
        return em.fit(dataset, spec, options)
    return em.fit_restarts(dataset, spec, options, Personalizer(spec), objective="elbo")


def fit_model(dataset: SequenceDataset, spec: ModelSpec, options: em.FitOptions = em.FitOptions()) -> FitResult:
    """Dispatch to the personalized or plain fitter according to ``spec``."""
    return fit_personalized(dataset, spec, options)
