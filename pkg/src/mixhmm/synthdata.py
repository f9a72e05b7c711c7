"""Sampling from the model family, including the two-regime recovery benchmark.

Every sequence draws from its own generator, seeded from ``(seed, i)``, so a
sequence's content depends only on the seed and its index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    HMMParameters,
    MixtureParameters,
    ModelSpec,
    Sequence,
    SequenceDataset,
    _rows,
    model_from_dict,
    model_to_dict,
)

KERNEL_JITTER = 1e-8

BENCH_N = 200
BENCH_T = 30
BENCH_LENGTH_SCALE = 1.0
BENCH_KERNEL_SIGMA = 0.1
BENCH_OFFSET_BOUND = 1.0


@dataclass(frozen=True)
class EffectsConfig:
    """How per-sequence offsets and doses are drawn.

    ``r_dist="uniform"`` draws r ~ Uniform(r_low, r_high) per dimension,
    ``"normal"`` draws Normal(0, r_scale^2) and ``"none"`` fixes r at 0; the
    ``m_*`` fields do the same for m. ``doses`` turns on nondecreasing
    piecewise-constant dose series (used only when the spec has inputs).
    """

    r_dist: str = "none"  # none | uniform | normal
    r_low: float = -1.0
    r_high: float = 1.0
    r_scale: float = 1.0
    m_dist: str = "none"
    m_low: float = -0.5
    m_high: float = 0.5
    m_scale: float = 0.5
    doses: bool = False
    dose_change_prob: float = 0.15
    dose_step: tuple[float, float] = (0.2, 1.0)


@dataclass(frozen=True)
class NoiseConfig:
    """Additive noise on top of the state emissions.

    ``iid`` adds nothing beyond each state's Gaussian emission; ``se_kernel``
    also adds one zero-mean GP draw per sequence and dimension with a
    squared-exponential covariance over the visit index.
    """

    kind: str = "iid"
    length_scale: float = 1.0
    sigma: float = 0.1


@dataclass(eq=False)
class GroundTruth:
    labels: np.ndarray
    paths: list[np.ndarray]
    r: np.ndarray
    m: np.ndarray
    params: MixtureParameters
    spec: ModelSpec
    ids: tuple[str, ...] = ()

    def flat_paths(self) -> list[np.ndarray]:
        starts = np.concatenate([[0], np.cumsum(self.params.states_per_component)[:-1]])
        return [starts[z] + p for z, p in zip(self.labels, self.paths)]

    def to_dict(self) -> dict:
        return {
            "model": model_to_dict(self.spec, self.params),
            "ids": list(self.ids),
            "labels": [int(z) for z in self.labels],
            "paths": [[int(x) for x in p] for p in self.paths],
            "r": _rows(self.r),
            "m": _rows(self.m),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GroundTruth":
        spec, params, _ = model_from_dict(obj["model"])
        return cls(
            np.asarray(obj["labels"], dtype=int),
            [np.asarray(p, dtype=int) for p in obj["paths"]],
            np.asarray(obj["r"], dtype=float),
            np.asarray(obj["m"], dtype=float),
            params,
            spec,
            tuple(obj.get("ids", ())),
        )


def se_kernel_covariance(T: int, length_scale: float = 1.0, sigma: float = 0.1, times=None) -> np.ndarray:
    """Squared-exponential covariance over ``times`` (default 0..T-1) plus jitter."""
    if T < 1 or length_scale <= 0 or sigma <= 0:
        raise ValueError("need T >= 1, length_scale > 0, sigma > 0")
    t = np.arange(T, dtype=float) if times is None else np.asarray(times, dtype=float)
    diff = t[:, None] - t[None, :]
    K = sigma**2 * np.exp(-(diff**2) / (2.0 * length_scale**2))
    return K + KERNEL_JITTER * np.eye(T)


def _sequence_rng(seed, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


def _draw_offset(rng, dist, low, high, scale, D):
    if dist == "none":
        return np.zeros(D)
    if dist == "uniform":
        return rng.uniform(low, high, size=D)
    if dist == "normal":
        return rng.normal(0.0, scale, size=D)
    raise ValueError(f"unknown offset distribution {dist!r}")


def _dose_series(rng, T, cfg: EffectsConfig) -> np.ndarray:
    # starts untreated; each visit may raise the dose by a random step
    steps = rng.random(T) < cfg.dose_change_prob
    steps[0] = False
    amounts = rng.uniform(*cfg.dose_step, size=T) * steps
    return np.cumsum(amounts)


def simulate(
    spec: ModelSpec,
    params: MixtureParameters,
    effects: EffectsConfig = EffectsConfig(),
    n: int = 100,
    length: int = 30,
    seed=0,
    noise: NoiseConfig = NoiseConfig(),
) -> tuple[SequenceDataset, GroundTruth]:
    """Ancestral sampling of component, state path and observations."""
    if n < 1 or length < 1:
        raise ValueError("n and length must be >= 1")
    D = spec.obs_dim
    K = params.n_components
    chol = None
    if noise.kind == "se_kernel":
        chol = np.linalg.cholesky(se_kernel_covariance(length, noise.length_scale, noise.sigma))
    elif noise.kind != "iid":
        raise ValueError(f"unknown noise kind {noise.kind!r}")
    use_doses = effects.doses and spec.use_inputs
    seqs, labels, paths = [], [], []
    rs, ms = np.zeros((n, D)), np.zeros((n, D))
    for i in range(n):
        rng = _sequence_rng(seed, i)
        z = int(rng.choice(K, p=params.alpha))
        c = params.components[z]
        x = np.empty(length, dtype=int)
        x[0] = rng.choice(c.n_states, p=c.pi)
        for t in range(1, length):
            x[t] = rng.choice(c.n_states, p=c.A[x[t - 1]])
        r = _draw_offset(rng, effects.r_dist, effects.r_low, effects.r_high, effects.r_scale, D)
        m = _draw_offset(rng, effects.m_dist, effects.m_low, effects.m_high, effects.m_scale, D)
        doses = _dose_series(rng, length, effects) if use_doses else np.zeros(length)
        mean = c.mu[x] + r[None] + (c.v[x] + m[None]) * doses[:, None]
        y = mean + np.sqrt(c.var[x]) * rng.standard_normal((length, D))
        if chol is not None:
            y = y + (chol @ rng.standard_normal((length, D)))
        sid = f"s{i:04d}"
        seqs.append(Sequence(sid, y, np.ones_like(y, dtype=bool), doses, np.arange(length, dtype=float)))
        labels.append(z)
        paths.append(x)
        rs[i], ms[i] = r, m
    ds = SequenceDataset(tuple(seqs), D)
    truth = GroundTruth(np.asarray(labels), paths, rs, ms, params, spec, tuple(ds.ids))
    return ds, truth


def benchmark_model() -> tuple[ModelSpec, MixtureParameters]:
    """Two 2-state regimes with equal emissions and opposite switching rates."""
    spec = ModelSpec.uniform(2, 2, 1, personal_state_offset=True)
    mu = np.array([[0.0], [2.0]])
    var = np.array([[0.1], [0.1]])
    comps = [
        HMMParameters(np.full(2, 0.5), np.array([[0.8, 0.2], [0.2, 0.8]]), mu, var, np.zeros((2, 1))),
        HMMParameters(np.full(2, 0.5), np.array([[0.2, 0.8], [0.8, 0.2]]), mu, var, np.zeros((2, 1))),
    ]
    return spec, MixtureParameters(np.full(2, 0.5), comps)


def simulate_paper_experiment(
    seed=0,
    offset_low: float = -BENCH_OFFSET_BOUND,
    offset_high: float = BENCH_OFFSET_BOUND,
    n: int = BENCH_N,
    length: int = BENCH_T,
) -> tuple[SequenceDataset, GroundTruth]:
    """200 sequences of length 30 from the two-regime personalized mixture.

    Each visit is the state's Gaussian emission (mean 0 or 2, variance 0.1)
    shifted by a per-sequence offset r ~ Uniform(offset_low, offset_high),
    plus a smooth GP noise draw (SE kernel, length scale 1, sigma 0.1).
    """
    spec, params = benchmark_model()
    cfg = EffectsConfig(r_dist="uniform", r_low=offset_low, r_high=offset_high)
    noise = NoiseConfig("se_kernel", BENCH_LENGTH_SCALE, BENCH_KERNEL_SIGMA)
    return simulate(spec, params, cfg, n, length, seed, noise)
