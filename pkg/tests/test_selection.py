from __future__ import annotations

import math

import numpy as np
import pytest

from tenar.errors import ValidationError
from tenar.estimators import FitOptions, fit_lse
from tenar.model import ModelSpec
from tenar.selection import (
    GridCell,
    Penalty,
    _argmin,
    g1,
    g2,
    ic_value,
    penalty_value,
    select_joint,
    select_separate,
)
from tenar.simulate import random_model, simulate_series


def test_penalty_formulas():
    assert g1((3, 3, 3), math.e) == pytest.approx(1 / math.e)
    assert g1((7,), math.e) == pytest.approx(1 / math.e)
    assert g2((3, 3, 3), 100) == pytest.approx(25 * math.log(100) / 2700)
    assert penalty_value("IC2", (3, 3, 3), 100) == g2((3, 3, 3), 100)


@pytest.mark.parametrize("g", [g1, g2])
def test_penalty_rates(g):
    dims = (3, 3, 3)
    d = 27
    ns = [100, 1000, 10_000, 100_000, 1_000_000]
    vals = [g(dims, n) for n in ns]
    growth = [n / d * g(dims, n) for n in ns]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert all(b > a for a, b in zip(growth, growth[1:]))


def test_ic_by_hand():
    m = random_model(ModelSpec((2, 2), (1,)), 0.8, seed=1)
    x = simulate_series(m, 200, seed=1)
    opts = FitOptions(rel_tol=1e-6)
    n = 200 - 2
    sse = fit_lse(x[1:], ModelSpec((2, 2), (1,)), opts).objective
    want = 0.5 * math.log(sse / (4 * n)) + g1((2, 2), n) * 1
    assert ic_value(x, (1,), Penalty.IC1, opts, p_max=2) == pytest.approx(want, rel=1e-12)
    white = 0.5 * math.log(float(np.sum(x[2:] ** 2)) / (4 * n))
    assert ic_value(x, (0, 0), Penalty.IC1, opts) == pytest.approx(white, rel=1e-12)
    with pytest.raises(ValidationError):
        ic_value(x, (1, 1), p_max=1)
    with pytest.raises(ValidationError):
        ic_value(x, (-1,))


def test_grid_sizes():
    m = random_model(ModelSpec((2, 2), (1,)), 0.8, seed=2)
    x = simulate_series(m, 150, seed=2)
    rep = select_joint(x, 1, 1)
    assert [c.kranks for c in rep.grid] == [(0,), (1,)]
    rep = select_joint(x, 2, 2)
    assert len(rep.grid) == 9
    rep = select_separate(x, 2, 2)
    assert len(rep.grid) == 2 * 3
    assert rep.grid[2] is rep.grid[5]  # the all-r_max cell is fitted once
    with pytest.raises(ValidationError):
        select_joint(x, 0, 1)


def test_white_noise_selects_nothing():
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(5):
        x = rng.standard_normal((400, 2, 3))
        hits += select_joint(x, 2, 1).chosen == ()
    assert hits == 5


def test_joint_not_worse_than_separate():
    m = random_model(ModelSpec((2, 2, 2), (1, 1)), 0.8, seed=4)
    x = simulate_series(m, 400, seed=4)
    joint = select_joint(x, 2, 2)
    sep = select_separate(x, 2, 2)
    by_cfg = {c.kranks: c.ic for c in joint.grid}
    chosen_joint = min(c.ic for c in joint.grid)
    padded = tuple(sep.chosen) + (0,) * (2 - len(sep.chosen))
    assert chosen_joint <= by_cfg[padded]


def test_true_single_lag_inside_larger_search():
    spec = ModelSpec((3, 3, 3), (1,))
    zeros = 0
    for s in range(4):
        m = random_model(spec, 0.8, seed=10 + s)
        x = simulate_series(m, 1000, seed=20 + s)
        rep = select_separate(x, 3, 1)
        zeros += rep.chosen[1:] == (0, 0)
        assert rep.chosen[0] == 1 and rep.order == 1
    assert zeros == 4


def test_adding_a_term_raises_ic():
    spec = ModelSpec((3, 3, 3), (1,))
    m = random_model(spec, 0.8, seed=5)
    x = simulate_series(m, 1000, seed=5)
    assert ic_value(x, (2,)) > ic_value(x, (1,))


def test_argmin_skips_failed_cells():
    cells = [
        GridCell((0,), -1.0, 1.0, 0, True),
        GridCell((1,), -5.0, 1.0, 3, False),
        GridCell((2,), math.inf, math.inf, 0, False, "singular"),
    ]
    assert _argmin(cells).kranks == (1,)
    with pytest.raises(ValidationError):
        _argmin(cells[2:])


def test_report_table():
    m = random_model(ModelSpec((2, 2), (1,)), 0.8, seed=2)
    x = simulate_series(m, 150, seed=2)
    rows = select_separate(x, 1, 2).table()
    assert [r["kranks"] for r in rows] == [[0], [1], [2]]
    assert set(rows[0]) == {"kranks", "ic", "sse", "sweeps", "converged", "error"}


def test_sse_never_rises_along_nested_chain():
    # each cell is also started from its predecessor: one term fewer at the
    # lag holding the most terms
    m = random_model(ModelSpec((2, 2, 2), (2, 1)), 0.8, seed=6)
    x = simulate_series(m, 300, seed=6)
    rep = select_joint(x, 2, 2)
    sse = {c.kranks: c.sse for c in rep.grid}
    for kr, value in sse.items():
        if not any(kr):
            continue
        j = max(range(len(kr)), key=lambda i: (kr[i], i))
        pred = kr[:j] + (kr[j] - 1,) + kr[j + 1:]
        assert value <= sse[pred] * (1 + 1e-12)
