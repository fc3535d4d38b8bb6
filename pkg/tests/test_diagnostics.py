import csv

import numpy as np
import pytest

from bqci import diagnostics as dg
from bqci import iteration as it
from bqci import stress_update as su
from bqci import torus_field as tf

KAPPA = 0.25


def _small_state(coarse=True):
    grid = tf.Grid3(16, 16, 16)
    tgrid = tf.TimeGrid(0.75, 4.25, 9)
    e_vals = np.full(9, 10 * KAPPA)
    return it.initial_state(grid, tgrid, mu=2, kappa=KAPPA, e_vals=e_vals,
                            M=0.05, lam=4, coarse=coarse)


def test_initial_state_residual_at_roundoff():
    state = _small_state()
    res = dg.system_residual(state, "fine")
    assert res["momentum_sup"] < 1e-12
    assert res["flux_sup"] < 1e-12
    assert len(res["momentum_slices"]) == state.tgrid.nt


def test_coarse_residual_needs_stores():
    state = _small_state(coarse=False)
    with pytest.raises(ValueError):
        dg.system_residual(state, "coarse")


def test_unknown_stencil_rejected():
    state = _small_state()
    with pytest.raises(ValueError):
        dg.system_residual(state, "banana")


def test_full_step_keeps_residual_at_floor(mini_stepped):
    state, _ = mini_stepped
    check = dg.richardson_floor(state)
    assert check["passed"]
    assert check["momentum_ratio"] <= check["tolerance"]
    assert check["flux_ratio"] <= check["tolerance"]
    # the coarse half-resolution stencil must actually see a larger error
    assert check["momentum_coarse"] > check["momentum_fine"]


def test_full_step_cancels_projected_blocks(mini_stepped):
    state, _ = mini_stepped
    proj = dg.block_projection(state)
    assert proj["completed"] == 6
    assert len(proj["gamma_cancelled"]) == 6
    assert len(proj["flux_cancelled"]) == 3
    assert proj["max_cancelled"] <= 1e-10 * KAPPA


def test_corrupted_transport_breaks_closure():
    clean = _small_state()
    it.begin_step(clean, 0.9, 0.9)
    su.run_substep(clean, 1, 4, 0.9, 0.9)
    base = dg.system_residual(clean, "fine")["momentum_sup"]

    broken = _small_state()
    it.begin_step(broken, 0.9, 0.9)
    su.run_substep(broken, 1, 4, 0.9, 0.9, corrupt_transport=1.1)
    bad = dg.system_residual(broken, "fine")["momentum_sup"]

    assert base < 1e-12
    assert bad > 1e6 * max(base, 1e-14)


def test_lambda_scaling_slopes():
    out = dg.lambda_scaling()
    for name, slope in out["slopes"].items():
        assert -1.2 < slope < -0.8, (name, slope)
    # fold alignment against the grid adds jitter to individual rungs, so
    # only the overall decay is checked pointwise
    for norms in out["norms"].values():
        assert norms[0] > 4 * norms[-1]


def test_mu_scaling_slope():
    out = dg.mu_scaling()
    assert -1.3 < out["slope"] < -0.7
    assert all(a > b for a, b in zip(out["norms"], out["norms"][1:]))


def test_mollification_scaling_slope():
    out = dg.mollification_scaling()
    assert 0.7 < out["slope"] < 1.3
    assert all(a < b for a, b in zip(out["norms"], out["norms"][1:]))


def test_write_csv_round_trip(tmp_path):
    path = tmp_path / "table.csv"
    dg.write_csv(path, ["lam", "norm"], [[16, 0.5], [32, 0.25]])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["lam", "norm"]
    assert [float(x) for x in rows[1]] == [16.0, 0.5]
    assert [float(x) for x in rows[2]] == [32.0, 0.25]
