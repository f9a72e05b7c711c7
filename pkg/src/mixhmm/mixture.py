"""A K-component mixture as one HMM with a block-diagonal transition matrix.

A path decoded under the flattened model never leaves the block it starts
in, so the block of a decoded path is the sequence's cluster label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .core import HMMParameters, MixtureParameters

EMPTY_COMPONENT_WEIGHT = 1e-6


class CrossBlockPathError(RuntimeError):
    """A decoded path visited states from more than one component."""


@dataclass(frozen=True)
class BlockMap:
    starts: tuple[int, ...]
    sizes: tuple[int, ...]

    @classmethod
    def from_sizes(cls, sizes) -> "BlockMap":
        sizes = tuple(int(s) for s in sizes)
        starts = tuple(int(x) for x in np.concatenate([[0], np.cumsum(sizes)[:-1]]))
        return cls(starts, sizes)

    @property
    def n_components(self) -> int:
        return len(self.sizes)

    @property
    def n_states(self) -> int:
        return int(sum(self.sizes))

    @property
    def component_of(self) -> np.ndarray:
        """Component index of every flat state."""
        return np.repeat(np.arange(len(self.sizes)), self.sizes)

    @property
    def local_index(self) -> np.ndarray:
        return np.concatenate([np.arange(s) for s in self.sizes])

    def block(self, k: int) -> slice:
        return slice(self.starts[k], self.starts[k] + self.sizes[k])

    def as_list(self) -> list[list[int]]:
        return [[s, n] for s, n in zip(self.starts, self.sizes)]


def build_block_diagonal(mix: MixtureParameters) -> tuple[HMMParameters, BlockMap]:
    comps = mix.components
    bm = BlockMap.from_sizes([c.n_states for c in comps])
    pi = np.concatenate([a * c.pi for a, c in zip(mix.alpha, comps)])
    A = block_diag(*[c.A for c in comps])
    flat = HMMParameters(
        pi,
        A,
        np.vstack([c.mu for c in comps]),
        np.vstack([c.var for c in comps]),
        np.vstack([c.v for c in comps]),
        left_to_right=all(c.left_to_right for c in comps),
    )
    return flat, bm


def assign_clusters(paths, block_map: BlockMap) -> np.ndarray:
    comp = block_map.component_of
    labels = np.empty(len(paths), dtype=int)
    for i, p in enumerate(paths):
        states = getattr(p, "states", p)
        ks = np.unique(comp[np.asarray(states, dtype=int)])
        if ks.size != 1:
            raise CrossBlockPathError(
                f"path {i} crosses blocks {ks.tolist()}; off-block transitions must be exactly zero"
            )
        labels[i] = ks[0]
    return labels


def hard_alpha(labels, n_components: int, eps: float = EMPTY_COMPONENT_WEIGHT) -> np.ndarray:
    """Cluster proportions; an empty component gets ``eps`` before renormalizing."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_components).astype(float)
    alpha = counts / max(counts.sum(), 1.0)
    alpha[counts == 0] = eps
    return alpha / alpha.sum()


def soft_alpha(flat: HMMParameters, block_map: BlockMap, eps: float = EMPTY_COMPONENT_WEIGHT) -> np.ndarray:
    """Block masses of the flattened initial distribution."""
    alpha = np.array([flat.pi[block_map.block(k)].sum() for k in range(block_map.n_components)])
    alpha[alpha <= 0] = eps
    return alpha / alpha.sum()


def extract_components(
    flat: HMMParameters,
    block_map: BlockMap,
    labels=None,
    alpha_mode: str = "hard",
) -> MixtureParameters:
    """Slice per-component parameters back out of a flattened model.

    ``alpha_mode="hard"`` takes mixing weights from the Viterbi label counts,
    ``"soft"`` from the flattened initial distribution's block masses.
    """
    K = block_map.n_components
    if alpha_mode == "hard":
        if labels is None:
            raise ValueError("hard alpha needs cluster labels")
        alpha = hard_alpha(labels, K)
    elif alpha_mode == "soft":
        alpha = soft_alpha(flat, block_map)
    else:
        raise ValueError(f"unknown alpha_mode {alpha_mode!r}")
    comps = []
    for k in range(K):
        b = block_map.block(k)
        pi = flat.pi[b]
        mass = pi.sum()
        pi = pi / mass if mass > 0 else np.full(block_map.sizes[k], 1.0 / block_map.sizes[k])
        # off-block entries are exactly zero, so block rows already sum to 1
        comps.append(HMMParameters(pi, flat.A[b, b], flat.mu[b], flat.var[b], flat.v[b], flat.left_to_right))
    return MixtureParameters(alpha, comps)
