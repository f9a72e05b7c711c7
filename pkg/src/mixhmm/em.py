"""Baum-Welch EM with input-effect regression for mixtures of (IO)HMMs.

A mixture is fitted as its flattened block-diagonal HMM. Off-block and
left-to-right transition zeros are set at initialization and survive every
M-step because their pairwise posteriors are exactly zero.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import inference as inf
from .core import (
    VARIANCE_FLOOR,
    FitResult,
    HMMParameters,
    MixtureParameters,
    ModelSpec,
    PersonalEffects,
    SequenceDataset,
    ValidationError,
    Violation,
    validate_dataset,
)
from .mixture import BlockMap, assign_clusters, build_block_diagonal, extract_components

log = logging.getLogger(__name__)

RESPONSIBILITY_TOL = 1e-12
INIT_STRATEGIES = ("random-obs", "spread-quantile")


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 500
    rel_tol: float = 1e-6
    n_restarts: int = 5
    seed: int = 0
    variance_floor: float = VARIANCE_FLOOR
    init_strategy: str = "spread-quantile"
    transition_concentration: float | None = 10.0
    alpha_mode: str = "hard"
    n_jobs: int = 1

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"init_strategy must be one of {INIT_STRATEGIES}")
        if self.transition_concentration is not None and not self.transition_concentration > 0:
            raise ValueError("transition_concentration must be > 0 or None")
        if self.alpha_mode not in ("hard", "soft"):
            raise ValueError("alpha_mode must be 'hard' or 'soft'")


def check_inputs(dataset: SequenceDataset, spec: ModelSpec) -> None:
    problems = validate_dataset(dataset) + spec.validate()
    if not problems and dataset.dim != spec.obs_dim:
        problems.append(
            Violation("spec", "obs_dim", f"spec has D={spec.obs_dim}, dataset has D={dataset.dim}")
        )
    if problems:
        raise ValidationError(problems)


def restart_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _initial_transitions(L: int, left_to_right: bool, rng=None, concentration=None) -> np.ndarray:
    """Uniform rows over the allowed entries, optionally Dirichlet-jittered.

    Jitter breaks the symmetry between components that start with identical
    emissions; disallowed (below-diagonal) entries stay exactly zero.
    """
    allowed = np.triu(np.ones((L, L))) if left_to_right else np.ones((L, L))
    if concentration is None or rng is None:
        return allowed / allowed.sum(axis=1, keepdims=True)
    A = np.zeros((L, L))
    for i in range(L):
        cols = np.flatnonzero(allowed[i])
        A[i, cols] = rng.dirichlet(np.full(cols.size, concentration))
    return A


def sequence_mean_deviations(dataset: SequenceDataset) -> np.ndarray:
    """Per-sequence observed mean minus the pooled mean, (N, D).

    Dimensions a sequence never observes get 0.
    """
    obs = [np.where(s.mask, s.observations, 0.0) for s in dataset]
    cnt = np.array([s.mask.sum(axis=0) for s in dataset], dtype=float)
    tot = np.array([o.sum(axis=0) for o in obs])
    pooled = tot.sum(axis=0) / np.maximum(cnt.sum(axis=0), 1.0)
    means = tot / np.maximum(cnt, 1.0)
    return np.where(cnt > 0, means - pooled[None], 0.0)


def initialize(
    dataset: SequenceDataset,
    spec: ModelSpec,
    seed=0,
    strategy: str = "spread-quantile",
    variance_floor: float = VARIANCE_FLOOR,
    transition_concentration: float | None = 10.0,
) -> MixtureParameters:
    """Starting parameters for EM.

    Initial distributions and mixing weights are uniform, variances are the
    pooled per-dimension data variance and input effects are zero. Transition
    rows are uniform over allowed entries (upper triangle for left-to-right),
    or Dirichlet draws with the given concentration around uniform. Means are
    randomly chosen observed visits (``random-obs``) or per-dimension
    quantiles spread across the states (``spread-quantile``). With personal
    state offsets, the data are first centred per sequence.
    """
    rng = np.random.default_rng(seed)
    D = dataset.dim
    if spec.personal_state_offset:
        dev = sequence_mean_deviations(dataset)
        obs = np.concatenate([s.observations - dev[i] for i, s in enumerate(dataset)])
    else:
        obs = np.concatenate([s.observations for s in dataset])
    mask = np.concatenate([s.mask for s in dataset])
    if not mask.any():
        raise ValueError("dataset has no observed entries")
    counts = mask.sum(axis=0)
    safe = np.maximum(counts, 1)
    mean = np.where(mask, obs, 0.0).sum(axis=0) / safe
    var = (np.where(mask, obs - mean, 0.0) ** 2).sum(axis=0) / safe
    mean = np.where(counts > 0, mean, 0.0)
    var = np.where(counts > 1, var, 1.0)
    var = np.maximum(var, variance_floor)
    rows = np.flatnonzero(mask.any(axis=1))

    comps = []
    for L in spec.states_per_component:
        if strategy == "random-obs":
            pick = rng.choice(rows, size=L, replace=rows.size < L)
            mu = np.where(mask[pick], obs[pick], mean[None])
        elif strategy == "spread-quantile":
            qs = (np.arange(L) + 0.5) / L
            mu = np.empty((L, D))
            for d in range(D):
                col = obs[mask[:, d], d]
                mu[:, d] = np.quantile(col, qs) if col.size else mean[d]
        else:
            raise ValueError(f"unknown init strategy {strategy!r}")
        comps.append(
            HMMParameters(
                np.full(L, 1.0 / L),
                _initial_transitions(L, spec.left_to_right, rng, transition_concentration),
                mu,
                np.tile(var, (L, 1)),
                np.zeros((L, D)),
                spec.left_to_right,
            )
        )
    K = spec.n_components
    return MixtureParameters(np.full(K, 1.0 / K), comps)


# ---------------------------------------------------------------------------
# E and M steps
# ---------------------------------------------------------------------------


def e_step(dataset: SequenceDataset, flat: HMMParameters, effects=None):
    """Posteriors for every sequence and the summed log-likelihood."""
    batch = inf.stack(dataset)
    log_e = inf.batch_log_emissions(batch, flat, effects)
    gamma, xi, ll = inf.batch_posteriors(batch, flat, log_e, full_xi=True)
    posts = []
    for i, n in enumerate(batch.lengths):
        posts.append(inf.Posteriors(gamma[i, :n], xi[i, : n - 1], float(ll[i])))
    return posts, float(np.sum(ll))


def m_step_arrays(
    batch: inf.Batch,
    gamma: np.ndarray,
    xi_sum: np.ndarray,
    previous: HMMParameters,
    effects=None,
    use_inputs: bool = False,
    variance_floor: float = VARIANCE_FLOOR,
) -> HMMParameters:
    """M-step from padded responsibilities.

    ``gamma`` is (N, T, L) with padded rows zero; ``xi_sum`` is the per
    sequence sum of pairwise posteriors, (N, L, L). ``effects`` supplies the
    current offsets (plug-in means) and their variances; the variances enter
    the variance update as expected squared residual.
    """
    pi = gamma[:, 0].sum(axis=0)
    pi = pi / pi.sum()

    A_acc = xi_sum.sum(axis=0)
    row = A_acc.sum(axis=1, keepdims=True)
    A = np.where(row > RESPONSIBILITY_TOL, A_acc / np.where(row > 0, row, 1.0), previous.A)

    r, m, r_var, m_var = inf._effect_arrays(effects, batch.n, previous.dim)
    d = batch.d
    target = batch.y - r[:, None, :] - m[:, None, :] * d[:, :, None]
    extra = r_var[:, None, :] + (d**2)[:, :, None] * m_var[:, None, :]
    W = gamma[:, :, :, None] * batch.mask[:, :, None, :]
    S0 = W.sum(axis=(0, 1))
    safe0 = np.where(S0 > 0, S0, 1.0)
    Sy = np.einsum("ntld,ntd->ld", W, target)
    if use_inputs:
        S1 = np.einsum("ntld,nt->ld", W, d)
        S2 = np.einsum("ntld,nt->ld", W, d**2)
        Sdy = np.einsum("ntld,ntd->ld", W, d[:, :, None] * target)
        det = S0 * S2 - S1**2
        joint = (S2 >= RESPONSIBILITY_TOL) & (det > 1e-10 * S0 * S2)
        safe_det = np.where(joint, det, 1.0)
        mu = np.where(joint, (S2 * Sy - S1 * Sdy) / safe_det, Sy / safe0)
        v = np.where(joint, (S0 * Sdy - S1 * Sy) / safe_det, 0.0)
    else:
        mu = Sy / safe0
        v = np.zeros_like(mu)
    resid = target[:, :, None, :] - mu[None, None] - v[None, None] * d[:, :, None, None]
    sq = np.einsum("ntld,ntld->ld", W, resid**2) + np.einsum("ntld,ntd->ld", W, extra)
    var = np.maximum(sq / safe0, variance_floor)

    keep = S0 < RESPONSIBILITY_TOL
    mu = np.where(keep, previous.mu, mu)
    v = np.where(keep, previous.v, v)
    var = np.where(keep, previous.var, var)
    return HMMParameters(pi, A, mu, var, v, previous.left_to_right)


def m_step(
    dataset: SequenceDataset,
    posteriors,
    spec: ModelSpec,
    previous: HMMParameters,
    effects=None,
    variance_floor: float = VARIANCE_FLOOR,
) -> HMMParameters:
    batch = inf.stack(dataset)
    N, T = batch.d.shape
    L = previous.n_states
    gamma = np.zeros((N, T, L))
    xi_sum = np.zeros((N, L, L))
    for i, p in enumerate(posteriors):
        gamma[i, : p.gamma.shape[0]] = p.gamma
        xi_sum[i] = p.xi.sum(axis=0)
    return m_step_arrays(batch, gamma, xi_sum, previous, effects, spec.use_inputs, variance_floor)


# ---------------------------------------------------------------------------
# fitting loop
# ---------------------------------------------------------------------------


@dataclass
class _RunState:
    flat: HMMParameters
    block_map: BlockMap
    effects: PersonalEffects
    trace: list
    n_iters: int
    converged: bool


def run(batch: inf.Batch, spec: ModelSpec, options: FitOptions, init: MixtureParameters, personal=None) -> _RunState:
    """Iterate E/M steps from ``init`` until the objective stalls.

    ``personal`` is an optional hook object (see the variational module)
    providing ``initial``, ``kl``, ``update`` and ``recenter``; without it
    this is plain EM and the objective is the log-likelihood.
    """
    flat, bm = build_block_diagonal(init)
    D = flat.dim
    effects = personal.initial(batch) if personal else PersonalEffects.zeros(batch.n, D, batch.ids)
    trace: list[float] = []
    n_iters, converged = 0, False
    while True:
        log_e = inf.batch_log_emissions(batch, flat, effects, variance_correction=personal is not None)
        gamma, xi_sum, ll = inf.batch_posteriors(batch, flat, log_e)
        obj = float(np.sum(ll))
        if personal:
            obj -= personal.kl(effects)
        trace.append(obj)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= options.rel_tol * abs(trace[-2]):
            converged = True
            break
        if n_iters >= options.max_iters:
            break
        if personal:
            effects = personal.update(batch, gamma, flat, effects)
        flat = m_step_arrays(batch, gamma, xi_sum, flat, effects, spec.use_inputs, options.variance_floor)
        if personal:
            flat, effects = personal.recenter(flat, effects)
        n_iters += 1
    return _RunState(flat, bm, effects, trace, n_iters, converged)


def finalize(batch: inf.Batch, spec: ModelSpec, options: FitOptions, state: _RunState, restart: int, objective: str) -> FitResult:
    """Decode, label and package a finished run."""
    log_e = inf.batch_log_emissions(batch, state.flat, state.effects)
    ll = inf.batch_loglik(batch, state.flat, log_e)
    paths, scores = inf.batch_viterbi(batch, state.flat, log_e)
    labels = assign_clusters(paths, state.block_map)
    params = extract_components(state.flat, state.block_map, labels, options.alpha_mode)
    return FitResult(
        params=params,
        effects=state.effects,
        objective_trace=list(state.trace),
        loglik=float(np.sum(ll)),
        map_loglik=float(np.sum(scores)),
        paths=paths,
        labels=labels,
        n_iters=state.n_iters,
        converged=state.converged,
        spec=spec,
        objective=objective,
        restart=restart,
        ids=batch.ids,
        n_sequences=batch.n,
    )


def fit_restarts(dataset, spec, options, personal=None, objective="loglik") -> FitResult:
    check_inputs(dataset, spec)
    batch = inf.stack(dataset)
    seeds = restart_seeds(options.seed, options.n_restarts)

    def one(k):
        init = initialize(
            dataset, spec, seeds[k], options.init_strategy, options.variance_floor, options.transition_concentration
        )
        return run(batch, spec, options, init, personal)

    if options.n_jobs > 1 and options.n_restarts > 1:
        with ThreadPoolExecutor(max_workers=options.n_jobs) as pool:
            states = list(pool.map(one, range(options.n_restarts)))
    else:
        states = [one(k) for k in range(options.n_restarts)]
    best = 0
    for k, st in enumerate(states):
        log.debug("restart %d: objective %.6f after %d iterations", k, st.trace[-1], st.n_iters)
        if st.trace[-1] > states[best].trace[-1]:
            best = k
    return finalize(batch, spec, options, states[best], best, objective)


def fit(dataset: SequenceDataset, spec: ModelSpec, options: FitOptions = FitOptions()) -> FitResult:
    """Best-of-restarts maximum-likelihood fit of a non-personalized model."""
    if spec.personalized:
        raise ValueError("spec has personal offsets enabled; use variational.fit_personalized")
    return fit_restarts(dataset, spec, options)
