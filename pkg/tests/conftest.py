"""Shared fixtures: the small "desk" problem used across the test suite.

The desk setup is deliberately modest (12 modes, no drifting) so that mode
tables and automata are cheap enough to build once per session.
"""

import pytest

from viaplan.vehicle import DEFAULT_PARAMS, build_automaton, build_mode_table

DESK_T_PP = 0.2
# transitions certified over a whole planning segment: at shorter windows the
# floor-speed straight cannot reach any same-speed turn and the robust kernel
# erodes to nothing on every track we ship
DESK_T_T = 0.2


@pytest.fixture(scope="session")
def desk_table():
    return build_mode_table(
        DEFAULT_PARAMS,
        v_min=1.0,
        v_max=2.5,
        v_step=0.5,
        n_delta=3,
        t_pp=DESK_T_PP,
        drift_specs=None,
    )


@pytest.fixture(scope="session")
def desk_automaton(desk_table):
    return build_automaton(desk_table, DEFAULT_PARAMS, t_t=DESK_T_T)
