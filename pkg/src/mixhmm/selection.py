"""Information criteria and sweeps over the number of mixture components."""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import FitResult, ModelSpec, NumericalError, SequenceDataset
from .em import FitOptions
from .variational import fit_model

log = logging.getLogger(__name__)

CRITERIA = ("aic", "bic", "icl")


class SelectionError(RuntimeError):
    pass


def count_free_parameters(spec: ModelSpec, structured: bool = False) -> int:
    """Free-parameter count ``L^2 + 3 L D - 1`` with L the total state count.

    With ``structured=True`` the transition term counts only the diagonal
    blocks, ``sum_k L_k^2``.
    """
    L = spec.total_states
    trans = sum(Lk * Lk for Lk in spec.states_per_component) if structured else L * L
    return int(trans + 3 * L * spec.obs_dim - 1)


def n_instances(dataset: SequenceDataset, mode: str = "sequences") -> int:
    """Sample size for BIC: sequences, or visits with at least one observed entry."""
    if mode == "sequences":
        return len(dataset)
    if mode == "visits":
        return int(sum(int(s.mask.any(axis=1).sum()) for s in dataset))
    raise ValueError(f"unknown sample-size mode {mode!r}")


@dataclass(frozen=True)
class Criteria:
    aic: float
    bic: float
    icl: float
    k: int


def criteria(fit: FitResult, spec: ModelSpec, n: int, structured: bool = False) -> Criteria:
    k = count_free_parameters(spec, structured)
    ll, mll = fit.loglik, fit.map_loglik
    return Criteria(
        aic=-2.0 * ll + 2.0 * k,
        bic=-2.0 * ll + k * math.log(n),
        icl=-2.0 * mll + 2.0 * k,
        k=k,
    )


@dataclass
class SelectionRow:
    K: int
    k: int
    loglik: float
    map_loglik: float
    aic: float
    bic: float
    icl: float
    chosen: dict = field(default_factory=lambda: dict.fromkeys(CRITERIA, False))


@dataclass
class SelectionTable:
    rows: list[SelectionRow]
    chosen: dict
    fits: dict = field(default_factory=dict, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K", "k", "loglik", "map_loglik", "AIC", "BIC", "ICL", "chosen_AIC", "chosen_BIC", "chosen_ICL"])
        for r in self.rows:
            w.writerow(
                [r.K, r.k, repr(r.loglik), repr(r.map_loglik), repr(r.aic), repr(r.bic), repr(r.icl)]
                + [int(r.chosen[c]) for c in CRITERIA]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        for r in self.rows:
            cells = []
            for c in CRITERIA:
                mark = "*" if r.chosen[c] else ""
                cells.append(f"{c.upper()}={getattr(r, c):.4e}{mark}")
            lines.append(f"K={r.K}, " + ", ".join(cells))
        picks = ", ".join(f"{c.upper()} -> K={k}" for c, k in self.chosen.items())
        lines.append(f"selected: {picks}")
        return "\n".join(lines) + "\n"


def parse_k_range(text: str) -> list[int]:
    """``"1..5"``, ``"2,3,5"`` or a mix such as ``"1..3,6"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("empty K range")
    return out


def select(
    dataset: SequenceDataset,
    template: ModelSpec,
    k_range,
    options: FitOptions = FitOptions(),
    n_mode: str = "sequences",
    structured: bool = False,
) -> SelectionTable:
    """Fit every K in ``k_range`` and mark the minimizer of each criterion.

    Each K uses ``template.states_per_component[0]`` states per component and
    the same seed and restart count.
    """
    ks = list(k_range)
    if not ks:
        raise ValueError("k_range is empty")
    uniq = list(dict.fromkeys(int(k) for k in ks))
    if len(uniq) != len(ks):
        warnings.warn(f"duplicate K values dropped: {ks} -> {uniq}", stacklevel=2)
    if any(k < 1 for k in uniq):
        raise ValueError("every K must be >= 1")
    L = template.states_per_component[0]
    n = n_instances(dataset, n_mode)
    rows, fits = [], {}
    for K in uniq:
        spec = replace(template, n_components=K, states_per_component=(L,) * K)
        try:
            fit = fit_model(dataset, spec, options)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise SelectionError(f"fit failed for K={K}: {exc}") from exc
        c = criteria(fit, spec, n, structured)
        log.info("K=%d: loglik=%.6g map_loglik=%.6g", K, fit.loglik, fit.map_loglik)
        rows.append(SelectionRow(K, c.k, fit.loglik, fit.map_loglik, c.aic, c.bic, c.icl))
        fits[K] = fit
    chosen = {}
    for c in CRITERIA:
        best = min(range(len(rows)), key=lambda i: getattr(rows[i], c))
        rows[best].chosen[c] = True
        chosen[c] = rows[best].K
    return SelectionTable(rows, chosen, fits)
