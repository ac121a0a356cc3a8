"""Discrete-time path-planning model over the mode automaton.

While a mode is held, the planar pose evolves under constant body-frame
velocities (v_x, v_y, omega): a straight line when omega = 0, otherwise a
circular arc. The one-step map has a closed form, so segment endpoints,
intra-segment samples, and the per-mode Lipschitz constants used by the
kernel computations are all exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .grid import TWO_PI
from .vehicle import Mode, ModeTable, TransitionAutomaton

__all__ = [
    "PPState",
    "PPConfig",
    "displacement",
    "step",
    "admissible",
    "lipschitz",
    "sample_path",
]

# below this |omega*T| the arc formula loses digits to cancellation; switch
# to its 4th-order Taylor expansion
ARC_TAYLOR_THRESHOLD = 1e-6


class PPState(NamedTuple):
    X: float        # m
    Y: float        # m
    phi: float      # rad, in [0, 2*pi)
    q: int          # mode id


@dataclass(frozen=True, slots=True)
class PPConfig:
    """Segment duration and intra-segment constraint-sample count."""

    t_pp: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.t_pp <= 0.0:
            raise ValueError("t_pp must be positive")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")


def displacement(mode: Mode, T: float) -> tuple[float, float, float]:
    """Body-frame displacement (dx, dy, dphi) after holding `mode` for T.

    Exact integral of the constant-velocity kinematics. Near omega*T = 0 the
    arc formula is evaluated through its Taylor expansion (error O((wT)^5)),
    which reproduces the straight-line formula at omega = 0.
    """
    v_x, v_y, w = mode.v_x, mode.v_y, mode.omega
    a = w * T
    if abs(a) < ARC_TAYLOR_THRESHOLD:
        # sin(a)/w = T*(1 - a^2/6 + a^4/120), (1-cos(a))/w = T*(a/2 - a^3/24)
        s = T * (1.0 - a * a / 6.0 + a**4 / 120.0)
        c = T * (a / 2.0 - a**3 / 24.0)
        dx = v_x * s - v_y * c
        dy = v_x * c + v_y * s
    else:
        sa, ca = np.sin(a), np.cos(a)
        dx = (v_x * sa + v_y * (ca - 1.0)) / w
        dy = (v_x * (1.0 - ca) + v_y * sa) / w
    return float(dx), float(dy), float(a)


def _resolve(u, table: ModeTable | None) -> Mode:
    if isinstance(u, Mode):
        return u
    if table is None:
        raise ValueError("a ModeTable is required to resolve a mode id")
    return table.by_id(int(u))


def step(x: PPState, u, T: float, table: ModeTable | None = None) -> PPState:
    """One planning step: hold mode `u` (an id or a Mode) for duration T."""
    mode = _resolve(u, table)
    dx, dy, dphi = displacement(mode, T)
    cp, sp = np.cos(x.phi), np.sin(x.phi)
    return PPState(
        X=x.X + cp * dx - sp * dy,
        Y=x.Y + sp * dx + cp * dy,
        phi=float((x.phi + dphi) % TWO_PI),
        q=mode.q,
    )


def admissible(x: PPState, automaton: TransitionAutomaton) -> list[int]:
    """Mode ids the automaton allows from x.q, ascending.

    Nonempty for any automaton whose diagonal is true (every mode may be
    held), which build_automaton guarantees for the tables shipped here.
    """
    return automaton.successors(x.q)


def lipschitz(mode: Mode, T: float) -> float:
    """Infinity-norm Lipschitz bound of step(., mode, T) in (X, Y, phi).

    The Jacobian of the one-step map is identity in (X, Y), has unit phi-phi
    entry, and couples phi into (X, Y) through the rotated body displacement;
    the magnitude of that coupling, maximized over phi, is the chord length
    of the displacement. The largest row sum is therefore 1 + chord.
    """
    dx, dy, _ = displacement(mode, T)
    return 1.0 + float(np.hypot(dx, dy))


def sample_path(x: PPState, u, T: float, n: int, table: ModeTable | None = None) -> np.ndarray:
    """(n, 2) positions equally spaced in time along the segment, endpoints included."""
    if n < 2:
        raise ValueError("n must be at least 2")
    mode = _resolve(u, table)
    cp, sp = np.cos(x.phi), np.sin(x.phi)
    out = np.empty((n, 2))
    for k in range(n):
        dx, dy, _ = displacement(mode, T * k / (n - 1))
        out[k, 0] = x.X + cp * dx - sp * dy
        out[k, 1] = x.Y + sp * dx + cp * dy
    return out
