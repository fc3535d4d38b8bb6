import numpy as np
import pytest

from bqci import iteration as it
from bqci import torus_field as tf

KAPPA = 0.25


@pytest.fixture(scope="session")
def mini_stepped():
    """One full six-substep update on a small grid.

    The grid and frequency are chosen so the sampled carriers fold onto
    high grid modes (16 * 2^c = +/-8 mod 24), which keeps the mollified
    engine inputs clean and the equation residual at the discretization
    floor.  Shared session-wide because the run takes tens of seconds.
    """
    grid = tf.Grid3(24, 24, 24)
    tgrid = tf.TimeGrid(0.75, 4.25, 9)
    e_vals = it.energy_profile(tgrid.times(), (0.75, 4.25), (0.75, 4.25),
                               10 * KAPPA)
    state = it.initial_state(grid, tgrid, mu=2, kappa=KAPPA, e_vals=e_vals,
                             M=0.05, lam=4)
    it.begin_step(state, 0.9, 0.9)
    report = it.run_step(state, lams=[16] * 6, ells=[0.9] * 6,
                         ellzs=[0.9] * 6)
    return state, report
