"""Domain types, validation and JSON/CSV serialization.

Every array held by these types is made read-only on construction, so the
objects can be shared freely between threads.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

VARIANCE_FLOOR = 1e-6
SIMPLEX_TOL = 1e-12
RENORM_TOL = 1e-9


class ValidationError(ValueError):
    """Raised when a dataset, spec or parameter set has invariant violations."""

    def __init__(self, violations: list["Violation"]):
        self.violations = list(violations)
        super().__init__("\n".join(str(v) for v in self.violations))


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Violation:
    where: str
    field: str
    reason: str

    def __str__(self) -> str:
        return f"{self.where}: {self.field}: {self.reason}"


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Sequence:
    """One subject's longitudinal record.

    ``mask[t, d]`` is True where ``observations[t, d]`` was observed. Values
    under a False mask are never read.
    """

    id: str
    observations: np.ndarray
    mask: np.ndarray
    inputs: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float, copy=True)
        if obs.ndim == 1:
            obs = obs[:, None]
        object.__setattr__(self, "observations", _frozen(obs))
        object.__setattr__(self, "mask", _frozen(self.mask, dtype=bool))
        object.__setattr__(self, "inputs", _frozen(self.inputs))
        if self.times is not None:
            object.__setattr__(self, "times", _frozen(self.times))

    @classmethod
    def from_values(cls, id, observations, inputs=None, times=None) -> "Sequence":
        """Build from a (T, D) array where NaN marks a missing entry."""
        obs = np.asarray(observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        mask = ~np.isnan(obs)
        if inputs is None:
            inputs = np.zeros(obs.shape[0])
        return cls(str(id), np.where(mask, obs, 0.0), mask, inputs, times)

    @property
    def length(self) -> int:
        return self.observations.shape[0]

    @property
    def dim(self) -> int:
        return self.observations.shape[1] if self.observations.ndim == 2 else 0

    def __eq__(self, other):
        if not isinstance(other, Sequence):
            return NotImplemented
        same_times = (self.times is None and other.times is None) or (
            self.times is not None
            and other.times is not None
            and np.array_equal(self.times, other.times)
        )
        return (
            self.id == other.id
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(
                np.where(self.mask, self.observations, 0.0),
                np.where(other.mask, other.observations, 0.0),
            )
            and np.array_equal(self.inputs, other.inputs)
            and same_times
        )


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    sequences: tuple[Sequence, ...]
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.sequences]

    def __eq__(self, other):
        if not isinstance(other, SequenceDataset):
            return NotImplemented
        return self.dim == other.dim and self.sequences == other.sequences


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    n_components: int
    states_per_component: tuple[int, ...]
    obs_dim: int
    use_inputs: bool = False
    personal_state_offset: bool = False
    personal_input_effect: bool = False
    left_to_right: bool = False
    prior_var_r: float = 1.0
    prior_var_m: float = 1.0

    def __post_init__(self):
        object.__setattr__(
            self, "states_per_component", tuple(int(x) for x in self.states_per_component)
        )

    @classmethod
    def uniform(cls, n_components: int, n_states: int, obs_dim: int, **kw) -> "ModelSpec":
        """K components with the same number of states each."""
        return cls(n_components, (n_states,) * n_components, obs_dim, **kw)

    @property
    def total_states(self) -> int:
        return int(sum(self.states_per_component))

    @property
    def personalized(self) -> bool:
        return self.personal_state_offset or self.personal_input_effect

    def validate(self) -> list[Violation]:
        out = []
        if self.n_components < 1:
            out.append(Violation("spec", "n_components", "must be >= 1"))
        if len(self.states_per_component) != self.n_components:
            out.append(
                Violation(
                    "spec",
                    "states_per_component",
                    f"has {len(self.states_per_component)} entries for {self.n_components} components",
                )
            )
        if any(L < 1 for L in self.states_per_component):
            out.append(Violation("spec", "states_per_component", "every entry must be >= 1"))
        if self.obs_dim < 1:
            out.append(Violation("spec", "obs_dim", "must be >= 1"))
        if self.personal_input_effect and not self.use_inputs:
            out.append(
                Violation("spec", "personal_input_effect", "requires use_inputs")
            )
        for name in ("prior_var_r", "prior_var_m"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                out.append(Violation("spec", name, f"must be positive, got {val}"))
        return out


@dataclass(frozen=True, eq=False)
class HMMParameters:
    """Gaussian-emission HMM with diagonal covariances and state input effects."""

    pi: np.ndarray
    A: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    v: np.ndarray
    left_to_right: bool = False

    def __post_init__(self):
        for name in ("pi", "A", "mu", "var", "v"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def n_states(self) -> int:
        return self.pi.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def __eq__(self, other):
        if not isinstance(other, HMMParameters):
            return NotImplemented
        return self.left_to_right == other.left_to_right and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("pi", "A", "mu", "var", "v")
        )


@dataclass(frozen=True, eq=False)
class MixtureParameters:
    alpha: np.ndarray
    components: tuple[HMMParameters, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def states_per_component(self) -> tuple[int, ...]:
        return tuple(c.n_states for c in self.components)

    def __eq__(self, other):
        if not isinstance(other, MixtureParameters):
            return NotImplemented
        return np.array_equal(self.alpha, other.alpha) and self.components == other.components


@dataclass(frozen=True, eq=False)
class PersonalEffects:
    """Per-sequence Gaussian variational posteriors over the offsets r and m.

    Rows follow dataset order. A disabled offset is all zeros (mean and
    variance).
    """

    r_mean: np.ndarray
    r_var: np.ndarray
    m_mean: np.ndarray
    m_var: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("r_mean", "r_var", "m_mean", "m_var"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        object.__setattr__(self, "ids", tuple(self.ids))

    @classmethod
    def zeros(cls, n: int, dim: int, ids: Iterable[str] = ()) -> "PersonalEffects":
        z = np.zeros((n, dim))
        return cls(z, z, z, z, tuple(ids))

    def offsets(self, i: int) -> "Offsets":
        return Offsets(self.r_mean[i], self.m_mean[i], self.r_var[i], self.m_var[i])

    def __eq__(self, other):
        if not isinstance(other, PersonalEffects):
            return NotImplemented
        return self.ids == other.ids and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("r_mean", "r_var", "m_mean", "m_var")
        )


@dataclass(frozen=True)
class Offsets:
    """Offsets applied to one sequence's emission means.

    ``r_var``/``m_var`` are only used for the expected-log-density correction
    of the variational objective; plain likelihoods ignore them.
    """

    r: np.ndarray | float = 0.0
    m: np.ndarray | float = 0.0
    r_var: np.ndarray | float = 0.0
    m_var: np.ndarray | float = 0.0


@dataclass(eq=False)
class FitResult:
    params: MixtureParameters
    effects: PersonalEffects
    objective_trace: list[float]
    loglik: float
    map_loglik: float
    paths: list[np.ndarray]
    labels: np.ndarray
    n_iters: int
    converged: bool
    spec: ModelSpec | None = None
    objective: str = "loglik"
    restart: int = 0
    ids: tuple[str, ...] = ()
    n_sequences: int = 0

    @property
    def blocks(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for L in self.params.states_per_component:
            out.append((start, L))
            start += L
        return out


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_dataset(d: SequenceDataset) -> list[Violation]:
    out: list[Violation] = []
    try:
        seqs = list(d.sequences)
        D = int(d.dim)
    except Exception as exc:  # noqa: BLE001 - validation is total
        return [Violation("dataset", "structure", f"unreadable: {exc}")]
    if not seqs:
        out.append(Violation("dataset", "sequences", "dataset is empty"))
    if D < 1:
        out.append(Violation("dataset", "dim", f"must be >= 1, got {D}"))
    seen: set[str] = set()
    for k, s in enumerate(seqs):
        where = f"sequence {s.id!r}" if isinstance(s, Sequence) else f"sequence #{k}"
        if not isinstance(s, Sequence):
            out.append(Violation(where, "type", "not a Sequence"))
            continue
        if s.id in seen:
            out.append(Violation(where, "id", "duplicate id"))
        seen.add(s.id)
        obs, mask, inputs = s.observations, s.mask, s.inputs
        if obs.ndim != 2:
            out.append(Violation(where, "observations", f"must be T x D, got shape {obs.shape}"))
            continue
        T = obs.shape[0]
        if T < 1:
            out.append(Violation(where, "observations", "sequence has no time steps"))
        if obs.shape[1] != D:
            out.append(
                Violation(where, "observations", f"dim mismatch: has D={obs.shape[1]}, dataset D={D}")
            )
        if mask.shape != obs.shape:
            out.append(
                Violation(where, "mask", f"shape {mask.shape} differs from observations {obs.shape}")
            )
        elif np.any(mask & ~np.isfinite(obs)):
            t, dd = np.argwhere(mask & ~np.isfinite(obs))[0]
            out.append(Violation(where, "observations", f"non-finite observed value at t={t}, d={dd}"))
        if inputs.shape != (T,):
            out.append(Violation(where, "inputs", f"length {inputs.shape} differs from T={T}"))
        else:
            if not np.all(np.isfinite(inputs)):
                out.append(Violation(where, "inputs", "non-finite dose"))
            elif np.any(inputs < 0):
                t = int(np.argmax(inputs < 0))
                out.append(Violation(where, "inputs", f"negative dose {inputs[t]} at t={t}"))
        if s.times is not None:
            if s.times.shape != (T,):
                out.append(Violation(where, "times", f"length {s.times.shape} differs from T={T}"))
            elif T > 1 and not np.all(np.diff(s.times) > 0):
                out.append(Violation(where, "times", "not strictly increasing"))
    return out


def _check_simplex(v: np.ndarray, where: str, name: str, tol: float) -> list[Violation]:
    out = []
    if np.any(~np.isfinite(v)) or np.any(v < 0):
        out.append(Violation(where, name, "entries must be finite and >= 0"))
    elif abs(v.sum() - 1.0) > tol:
        out.append(Violation(where, name, f"sums to {v.sum():.15g}, not 1"))
    return out


def validate_parameters(
    p: MixtureParameters, s: ModelSpec, variance_floor: float = VARIANCE_FLOOR
) -> list[Violation]:
    out = list(s.validate())
    try:
        alpha = np.asarray(p.alpha, dtype=float)
        comps = list(p.components)
    except Exception as exc:  # noqa: BLE001
        return out + [Violation("params", "structure", f"unreadable: {exc}")]
    if alpha.shape != (s.n_components,):
        out.append(Violation("params", "alpha", f"has shape {alpha.shape}, expected ({s.n_components},)"))
    else:
        out += _check_simplex(alpha, "params", "alpha", SIMPLEX_TOL)
    if len(comps) != s.n_components:
        out.append(Violation("params", "components", f"{len(comps)} components, spec says {s.n_components}"))
    for k, (c, L) in enumerate(zip(comps, s.states_per_component)):
        where = f"component {k}"
        D = s.obs_dim
        shapes = {"pi": (L,), "A": (L, L), "mu": (L, D), "var": (L, D), "v": (L, D)}
        bad = False
        for name, shp in shapes.items():
            arr = getattr(c, name)
            if arr.shape != shp:
                out.append(Violation(where, name, f"shape {arr.shape}, expected {shp}"))
                bad = True
        if bad:
            continue
        out += _check_simplex(c.pi, where, "pi", SIMPLEX_TOL)
        if np.any(~np.isfinite(c.A)) or np.any(c.A < 0):
            out.append(Violation(where, "A", "entries must be finite and >= 0"))
        else:
            sums = c.A.sum(axis=1)
            for row in np.flatnonzero(np.abs(sums - 1.0) > SIMPLEX_TOL):
                out.append(Violation(where, "A", f"row {row} sums to {sums[row]:.15g}, not row-stochastic"))
            if s.left_to_right and np.any(np.tril(c.A, -1) != 0):
                i, j = np.argwhere(np.tril(c.A, -1) != 0)[0]
                out.append(
                    Violation(where, "A", f"left-to-right requires upper-triangular, A[{i},{j}]={c.A[i, j]}")
                )
        if not np.all(np.isfinite(c.mu)):
            out.append(Violation(where, "mu", "non-finite entries"))
        if not np.all(np.isfinite(c.var)) or np.any(c.var < variance_floor):
            out.append(Violation(where, "var", f"entries must be finite and >= {variance_floor}"))
        if not np.all(np.isfinite(c.v)):
            out.append(Violation(where, "v", "non-finite entries"))
        elif not s.use_inputs and np.any(c.v != 0):
            out.append(Violation(where, "v", "must be zero when use_inputs is off"))
    return out


def renormalized(p: MixtureParameters) -> MixtureParameters:
    """Renormalize simplex vectors that drift from 1 by less than RENORM_TOL."""

    def fix(v):
        s = v.sum(axis=-1, keepdims=True)
        ok = np.abs(s - 1.0) <= RENORM_TOL
        return np.where(ok & (s > 0), v / np.where(s > 0, s, 1.0), v)

    comps = [replace(c, pi=fix(c.pi), A=fix(c.A)) for c in p.components]
    return MixtureParameters(fix(p.alpha), comps)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------
# json's float repr is the shortest string that round-trips bit-for-bit.


def _rows(a: np.ndarray) -> list:
    return np.asarray(a, dtype=float).tolist()


def dataset_to_dict(d: SequenceDataset) -> dict:
    seqs = []
    for s in d.sequences:
        obs = [
            [float(x) if m else None for x, m in zip(row, mrow)]
            for row, mrow in zip(s.observations.tolist(), s.mask.tolist())
        ]
        rec: dict[str, Any] = {"id": s.id, "observations": obs, "inputs": _rows(s.inputs)}
        if s.times is not None:
            rec["times"] = _rows(s.times)
        seqs.append(rec)
    return {"dim": int(d.dim), "sequences": seqs}


def dataset_from_dict(obj: dict) -> SequenceDataset:
    dim = int(obj["dim"])
    seqs = []
    for rec in obj["sequences"]:
        rows = rec["observations"]
        T = len(rows)
        width = max((len(r) for r in rows), default=dim)
        obs = np.zeros((T, width))
        mask = np.zeros((T, width), dtype=bool)
        for t, row in enumerate(rows):
            for j, x in enumerate(row):
                if x is not None:
                    obs[t, j] = float(x)
                    mask[t, j] = True
        inputs = rec.get("inputs")
        inputs = np.zeros(T) if inputs is None else np.asarray(inputs, dtype=float)
        times = rec.get("times")
        seqs.append(
            Sequence(
                str(rec["id"]),
                obs,
                mask,
                inputs,
                None if times is None else np.asarray(times, dtype=float),
            )
        )
    return SequenceDataset(tuple(seqs), dim)


def spec_to_dict(s: ModelSpec) -> dict:
    out = {f.name: getattr(s, f.name) for f in fields(s)}
    out["states_per_component"] = list(s.states_per_component)
    return out


def spec_from_dict(obj: dict) -> ModelSpec:
    return ModelSpec(**obj)


def hmm_to_dict(c: HMMParameters) -> dict:
    return {
        "pi": _rows(c.pi),
        "A": _rows(c.A),
        "mu": _rows(c.mu),
        "var": _rows(c.var),
        "v": _rows(c.v),
    }


def hmm_from_dict(obj: dict, left_to_right: bool = False) -> HMMParameters:
    return HMMParameters(
        np.asarray(obj["pi"], dtype=float),
        np.asarray(obj["A"], dtype=float),
        np.atleast_2d(np.asarray(obj["mu"], dtype=float)),
        np.atleast_2d(np.asarray(obj["var"], dtype=float)),
        np.atleast_2d(np.asarray(obj["v"], dtype=float)),
        left_to_right,
    )


def effects_to_dict(e: PersonalEffects) -> dict:
    return {
        "ids": list(e.ids),
        "r_mean": _rows(e.r_mean),
        "r_var": _rows(e.r_var),
        "m_mean": _rows(e.m_mean),
        "m_var": _rows(e.m_var),
    }


def effects_from_dict(obj: dict) -> PersonalEffects:
    return PersonalEffects(
        np.asarray(obj["r_mean"], dtype=float),
        np.asarray(obj["r_var"], dtype=float),
        np.asarray(obj["m_mean"], dtype=float),
        np.asarray(obj["m_var"], dtype=float),
        tuple(obj.get("ids", ())),
    )


def model_to_dict(
    spec: ModelSpec, params: MixtureParameters, effects: PersonalEffects | None = None
) -> dict:
    blocks, start = [], 0
    for c in params.components:
        blocks.append([start, c.n_states])
        start += c.n_states
    out = {
        "spec": spec_to_dict(spec),
        "alpha": _rows(params.alpha),
        "components": [hmm_to_dict(c) for c in params.components],
        "blocks": blocks,
    }
    if effects is not None:
        out["effects"] = effects_to_dict(effects)
    return out


def model_from_dict(obj: dict) -> tuple[ModelSpec, MixtureParameters, PersonalEffects | None]:
    spec = spec_from_dict(obj["spec"])
    comps = [hmm_from_dict(c, spec.left_to_right) for c in obj["components"]]
    params = MixtureParameters(np.asarray(obj["alpha"], dtype=float), comps)
    eff = obj.get("effects")
    return spec, params, None if eff is None else effects_from_dict(eff)


def fit_to_dict(fit: FitResult, metadata: dict | None = None) -> dict:
    spec = fit.spec
    out = {
        "model": model_to_dict(spec, fit.params, fit.effects) if spec is not None else None,
        "objective": fit.objective,
        "objective_trace": [float(x) for x in fit.objective_trace],
        "loglik": float(fit.loglik),
        "map_loglik": float(fit.map_loglik),
        "n_iters": int(fit.n_iters),
        "converged": bool(fit.converged),
        "restart": int(fit.restart),
        "ids": list(fit.ids),
        "n_sequences": int(fit.n_sequences),
        "labels": [int(x) for x in fit.labels],
        "paths": [[int(x) for x in p] for p in fit.paths],
    }
    if metadata is not None:
        out["metadata"] = metadata
    return out


def fit_from_dict(obj: dict) -> FitResult:
    spec, params, effects = model_from_dict(obj["model"])
    if effects is None:
        effects = PersonalEffects.zeros(len(obj["ids"]), spec.obs_dim, obj["ids"])
    return FitResult(
        params=params,
        effects=effects,
        objective_trace=list(obj["objective_trace"]),
        loglik=obj["loglik"],
        map_loglik=obj["map_loglik"],
        paths=[np.asarray(p, dtype=int) for p in obj["paths"]],
        labels=np.asarray(obj["labels"], dtype=int),
        n_iters=obj["n_iters"],
        converged=obj["converged"],
        spec=spec,
        objective=obj.get("objective", "loglik"),
        restart=obj.get("restart", 0),
        ids=tuple(obj["ids"]),
        n_sequences=obj.get("n_sequences", len(obj["ids"])),
    )


def dumps(obj: dict) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def write_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def load_dataset(path: str | Path) -> SequenceDataset:
    """Read a dataset from JSON, or from long-format CSV when the suffix is .csv."""
    if str(path).lower().endswith(".csv"):
        with open(path, newline="") as fh:
            return dataset_from_long_csv(fh)
    return dataset_from_dict(read_json(path))


def save_dataset(d: SequenceDataset, path: str | Path) -> None:
    write_json(dataset_to_dict(d), path)


def dataset_from_long_csv(lines: Iterable[str], dim: int | None = None) -> SequenceDataset:
    """Parse long-format rows ``id,t,feature_index,value,dose``.

    An empty ``value`` is a missing entry; a visit without any row for a
    feature leaves that feature missing. Sequences keep first-appearance
    order and visits are sorted by ``t``.
    """
    reader = csv.DictReader(lines)
    missing = {"id", "t", "feature_index", "value", "dose"} - set(reader.fieldnames or [])
    if missing:
        raise ValueError(f"CSV is missing columns: {sorted(missing)}")
    visits: dict[str, dict[float, dict]] = {}
    max_feat = -1
    for lineno, row in enumerate(reader, start=2):
        sid = row["id"]
        t = float(row["t"])
        j = int(row["feature_index"])
        if j < 0:
            raise ValueError(f"line {lineno}: negative feature_index {j}")
        max_feat = max(max_feat, j)
        visit = visits.setdefault(sid, {}).setdefault(t, {"values": {}, "dose": 0.0})
        val = (row["value"] or "").strip()
        if val and val.lower() not in ("na", "nan", "null"):
            visit["values"][j] = float(val)
        dose = (row["dose"] or "").strip()
        if dose:
            visit["dose"] = float(dose)
    D = dim if dim is not None else max_feat + 1
    seqs = []
    for sid, by_t in visits.items():
        ts = sorted(by_t)
        obs = np.zeros((len(ts), D))
        mask = np.zeros((len(ts), D), dtype=bool)
        doses = np.zeros(len(ts))
        for k, t in enumerate(ts):
            for j, x in by_t[t]["values"].items():
                obs[k, j] = x
                mask[k, j] = True
            doses[k] = by_t[t]["dose"]
        seqs.append(Sequence(sid, obs, mask, doses, np.asarray(ts)))
    return SequenceDataset(tuple(seqs), D)
