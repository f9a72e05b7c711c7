import math

import numpy as np
import pytest
from conftest import random_sequence

from mixhmm.core import FitResult, ModelSpec, SequenceDataset
from mixhmm.em import FitOptions
from mixhmm.selection import (
    SelectionError,
    count_free_parameters,
    criteria,
    n_instances,
    parse_k_range,
    select,
)


@pytest.mark.parametrize("L, D, k", [(8, 59, 1479), (16, 59, 3087), (1, 1, 3)])
def test_free_parameter_count(L, D, k):
    assert count_free_parameters(ModelSpec.uniform(1, L, D)) == k


def test_count_uses_total_states_across_components():
    spec = ModelSpec.uniform(2, 4, 59)
    assert count_free_parameters(spec) == 1479
    assert count_free_parameters(spec, structured=True) == 2 * 16 + 3 * 8 * 59 - 1


def _fit(ll, mll):
    return FitResult(params=None, effects=None, objective_trace=[], loglik=ll, map_loglik=mll, paths=[], labels=np.array([]), n_iters=0, converged=True)


def test_criteria_substitution():
    c = criteria(_fit(0.0, 0.0), ModelSpec.uniform(1, 1, 1), math.e**2)
    assert (c.aic, c.bic, c.icl, c.k) == (6.0, pytest.approx(6.0, abs=1e-12), 6.0, 3)


def test_criteria_are_exact_affine_functions():
    spec = ModelSpec.uniform(2, 3, 4)
    f = _fit(-1234.5678, -1300.25)
    c = criteria(f, spec, 200)
    k = count_free_parameters(spec)
    assert c.aic == -2.0 * f.loglik + 2.0 * k
    assert c.bic == -2.0 * f.loglik + k * math.log(200)
    assert c.icl == -2.0 * f.map_loglik + 2.0 * k
    assert c.icl >= c.aic and c.bic >= c.aic


def test_n_instances_modes(two_seq_dataset):
    assert n_instances(two_seq_dataset) == 2
    assert n_instances(two_seq_dataset, "visits") == 5
    with pytest.raises(ValueError):
        n_instances(two_seq_dataset, "points")


@pytest.mark.parametrize("text, ks", [("1..3", [1, 2, 3]), ("2,5", [2, 5]), ("1..2,4", [1, 2, 4]), ("3", [3])])
def test_parse_k_range(text, ks):
    assert parse_k_range(text) == ks


@pytest.mark.parametrize("text", ["", "3..1", "a"])
def test_parse_k_range_rejects(text):
    with pytest.raises(ValueError):
        parse_k_range(text)


def small_ds(rng):
    return SequenceDataset(tuple(random_sequence(rng, 6, 1, f"s{i}", doses=False) for i in range(8)), 1)


def test_single_k_row(rng):
    table = select(small_ds(rng), ModelSpec.uniform(1, 2, 1), [1], FitOptions(max_iters=10, n_restarts=1))
    assert len(table.rows) == 1
    assert table.chosen == {"aic": 1, "bic": 1, "icl": 1}
    row = table.rows[0]
    assert row.chosen == {"aic": True, "bic": True, "icl": True}
    assert row.icl >= row.aic


def test_duplicate_k_warns_and_dedups(rng):
    with pytest.warns(UserWarning, match="duplicate"):
        table = select(small_ds(rng), ModelSpec.uniform(1, 2, 1), [1, 2, 1], FitOptions(max_iters=5, n_restarts=1))
    assert [r.K for r in table.rows] == [1, 2]


def test_table_formats(rng):
    table = select(small_ds(rng), ModelSpec.uniform(1, 2, 1), [1, 2], FitOptions(max_iters=5, n_restarts=1))
    csv_lines = table.to_csv().splitlines()
    assert csv_lines[0] == "K,k,loglik,map_loglik,AIC,BIC,ICL,chosen_AIC,chosen_BIC,chosen_ICL"
    assert len(csv_lines) == 3
    fields = csv_lines[1].split(",")
    assert fields[0] == "1" and float(fields[4]) == table.rows[0].aic
    text = table.to_text().splitlines()
    assert text[0].startswith("K=1, AIC=")
    assert "e+" in text[0] or "e-" in text[0]
    assert text[-1].startswith("selected: AIC -> K=")


def test_failing_fit_names_k(rng, monkeypatch):
    from mixhmm import selection
    from mixhmm.core import NumericalError

    def boom(ds, spec, opts):
        if spec.n_components == 2:
            raise NumericalError("bad")
        return orig(ds, spec, opts)

    orig = selection.fit_model
    monkeypatch.setattr(selection, "fit_model", boom)
    with pytest.raises(SelectionError, match="K=2"):
        select(small_ds(rng), ModelSpec.uniform(1, 2, 1), [1, 2], FitOptions(max_iters=5, n_restarts=1))
