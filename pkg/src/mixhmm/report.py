"""Post-fit summaries: parameter alignment, feature-group means, trajectories."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .core import FitResult, HMMParameters, MixtureParameters, SequenceDataset
from .mixture import BlockMap

MAX_EXHAUSTIVE = 6


@dataclass(frozen=True)
class Alignment:
    """``component_perm[j]`` is the fitted component matched to reference j;
    ``state_perms[j][l]`` the fitted state matched to reference state l."""

    component_perm: tuple[int, ...]
    state_perms: tuple[tuple[int, ...], ...]
    aligned: MixtureParameters
    transition_distance: float
    mean_distance: float

    def map_label(self, fitted_label: int) -> int:
        return self.component_perm.index(int(fitted_label))


def _permute_states(c: HMMParameters, perm) -> HMMParameters:
    p = np.asarray(perm)
    return HMMParameters(c.pi[p], c.A[np.ix_(p, p)], c.mu[p], c.var[p], c.v[p], c.left_to_right)


def _best_state_perm(fit: HMMParameters, ref: HMMParameters) -> tuple[tuple[int, ...], float]:
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(ref.n_states)):
        cost = float(np.sum((fit.mu[list(perm)] - ref.mu) ** 2))
        if cost < best_cost:
            best, best_cost = perm, cost
    return best, best_cost


def align_parameters(fitted: MixtureParameters, reference: MixtureParameters) -> Alignment:
    """Match fitted components and states to a reference by exhaustive search.

    Within each candidate (fitted, reference) component pair the states are
    matched by squared distance of means; components are then matched by
    the summed Frobenius distance of the state-aligned transition matrices.
    Ties keep the earliest permutation, so aligning an aligned fit returns
    identity permutations.
    """
    K = reference.n_components
    if fitted.n_components != K:
        raise ValueError(f"component count mismatch: fitted {fitted.n_components}, reference {K}")
    if sorted(fitted.states_per_component) != sorted(reference.states_per_component):
        raise ValueError("states per component differ between fitted and reference")
    if K > MAX_EXHAUSTIVE or max(reference.states_per_component) > MAX_EXHAUSTIVE:
        raise ValueError(f"exhaustive alignment supports at most {MAX_EXHAUSTIVE} components/states")
    pair = {}
    for i, fc in enumerate(fitted.components):
        for j, rc in enumerate(reference.components):
            if fc.n_states != rc.n_states or fc.dim != rc.dim:
                continue
            perm, mcost = _best_state_perm(fc, rc)
            aligned = _permute_states(fc, perm)
            pair[i, j] = (perm, float(np.linalg.norm(aligned.A - rc.A)), mcost, aligned)
    best, best_cost = None, np.inf
    for cperm in itertools.permutations(range(K)):
        if not all((cperm[j], j) in pair for j in range(K)):
            continue
        cost = sum(pair[cperm[j], j][1] for j in range(K))
        if cost < best_cost:
            best, best_cost = cperm, cost
    chosen = [pair[best[j], j] for j in range(K)]
    aligned = MixtureParameters(
        np.array([fitted.alpha[best[j]] for j in range(K)]), [c[3] for c in chosen]
    )
    return Alignment(
        tuple(best),
        tuple(tuple(c[0]) for c in chosen),
        aligned,
        float(best_cost),
        float(sum(c[2] for c in chosen)),
    )


def recovery_errors(aligned: MixtureParameters, reference: MixtureParameters) -> dict:
    """Largest absolute elementwise error per parameter block."""
    out = {}
    for name in ("pi", "A", "mu", "var", "v"):
        out[name] = max(
            float(np.max(np.abs(getattr(a, name) - getattr(r, name))))
            for a, r in zip(aligned.components, reference.components)
        )
    out["alpha"] = float(np.max(np.abs(aligned.alpha - reference.alpha)))
    return out


def cluster_purity(labels, true_labels, alignment: Alignment | None = None) -> float:
    """Fraction of sequences whose (aligned) label equals the generating one."""
    labels = np.asarray(labels, dtype=int)
    true_labels = np.asarray(true_labels, dtype=int)
    if alignment is not None:
        labels = np.array([alignment.map_label(k) for k in labels])
    return float(np.mean(labels == true_labels))


# ---------------------------------------------------------------------------
# feature groups
# ---------------------------------------------------------------------------


def group_summary(params: MixtureParameters, groups: dict[str, list[int]]) -> list[dict]:
    """Mean state mean and mean input effect over each group of features."""
    if not groups:
        raise ValueError("no feature groups given")
    D = params.components[0].dim
    for name, idx in groups.items():
        if len(idx) == 0:
            raise ValueError(f"feature group {name!r} is empty")
        bad = [i for i in idx if not (0 <= int(i) < D)]
        if bad:
            raise ValueError(f"feature group {name!r} has indices outside [0, {D}): {bad}")
    rows = []
    for k, c in enumerate(params.components):
        for l in range(c.n_states):
            for name, idx in groups.items():
                idx = [int(i) for i in idx]
                rows.append(
                    {
                        "component": k,
                        "state": l,
                        "group": name,
                        "state_mean": float(np.mean(c.mu[l, idx])),
                        "input_effect_mean": float(np.mean(c.v[l, idx])),
                    }
                )
    return rows


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(
        buf, ["component", "state", "group", "state_mean", "input_effect_mean"], lineterminator="\n"
    )
    w.writeheader()
    for r in rows:
        w.writerow({**r, "state_mean": repr(r["state_mean"]), "input_effect_mean": repr(r["input_effect_mean"])})
    return buf.getvalue()


def load_groups(path) -> dict[str, list[int]]:
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValueError("groups file must map names to index lists")
    return {str(k): [int(i) for i in v] for k, v in obj.items()}


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def export_trajectories(fit: FitResult, dataset: SequenceDataset) -> list[dict]:
    """One record per sequence: label, decoded path and per-visit severity.

    Severity of a visit is the sum over features of the decoded state's
    means. A visit with no observed entry is flagged missing but still has a
    decoded state.
    """
    bm = BlockMap.from_sizes(fit.params.states_per_component)
    mu = np.vstack([c.mu for c in fit.params.components])
    severity = mu.sum(axis=1)
    local = bm.local_index
    records = []
    for i, seq in enumerate(dataset):
        path = np.asarray(fit.paths[i], dtype=int)
        records.append(
            {
                "id": seq.id,
                "label": int(fit.labels[i]),
                "path": path.tolist(),
                "local_path": local[path].tolist(),
                "severity": severity[path].tolist(),
                "missing": (~seq.mask.any(axis=1)).tolist(),
            }
        )
    return records


def trajectories_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r) + "\n" for r in records)
