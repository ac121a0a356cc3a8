"""Bicycle vehicle model, stationary velocity modes, and transition automaton.

The continuous model is a dynamic bicycle with Pacejka lateral tire forces and
an affine-in-duty drivetrain with quadratic drag. Modes are stationary points
of the velocity subdynamics: triples (v_x, v_y, omega) that a constant input
pair (delta, d) holds exactly. The mode table grids the stationary manifold in
(v_x, delta) over the normal driving region and optionally appends drifting
(rear-saturated, counter-steered) points together with their mirrors. A
finite automaton of velocity-to-velocity transitions, checked by forward
simulation over a short horizon, defines which mode switches the planner may
command.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "CarParams",
    "FullState",
    "Mode",
    "ModeTable",
    "TransitionAutomaton",
    "DEFAULT_PARAMS",
    "DEFAULT_DRIFT_SPECS",
    "derivative",
    "integrate",
    "stationary_point",
    "drift_point",
    "delta_limit",
    "build_mode_table",
    "transition_feasible",
    "build_automaton",
]

EPS_EQ = 1e-8          # max |acceleration| at a stationary point, m/s^2 / rad/s^2
EPS_V = 0.05           # transition tolerance on v_x, v_y, m/s
EPS_OMEGA = 0.1        # transition tolerance on omega, rad/s
A_LAT_MAX = 8.0        # lateral acceleration ceiling for the normal region, m/s^2
A_LAT_FRAC = 0.85      # fraction of the ceiling used when gridding delta
NEWTON_MAX_ITER = 50
NEWTON_STEP_CAP = 2.0  # per-iteration cap on the infinity norm of the update


@dataclass(frozen=True, slots=True)
class CarParams:
    """Physical constants of the car.

    Tire forces use the Pacejka magic formula D*sin(C*atan(B*alpha)) per
    axle; the drivetrain force is (c_m1 - c_m2*v_x)*d - c_r0 - c_r2*v_x^2
    with duty cycle d in [0, 1]. Steering is bounded by |delta| <= delta_max.
    """

    m: float = 1.5        # kg
    I_z: float = 0.03     # kg m^2
    l_f: float = 0.125    # m, CoG to front axle
    l_r: float = 0.135    # m, CoG to rear axle
    B_f: float = 4.5
    C_f: float = 1.4
    D_f: float = 10.0     # N
    B_r: float = 5.0
    C_r: float = 1.45
    D_r: float = 9.0      # N
    c_m1: float = 24.0    # N
    c_m2: float = 0.8     # N s/m
    c_r0: float = 7.5     # N
    c_r2: float = 0.15    # N s^2/m^2
    delta_max: float = 0.40  # rad

    def __post_init__(self) -> None:
        for name in ("m", "I_z", "l_f", "l_r"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("D_f", "D_r"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta_max <= 0.0:
            raise ValueError("delta_max must be positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    def to_mapping(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_mapping(cls, data: dict) -> "CarParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown car parameter keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


DEFAULT_PARAMS = CarParams()


class FullState(NamedTuple):
    X: float
    Y: float
    phi: float
    v_x: float
    v_y: float
    omega: float


def _tire_forces(p: CarParams, v_x, v_y, omega, delta, d):
    """Front/rear lateral Pacejka forces and longitudinal drivetrain force."""
    alpha_f = -np.arctan2(omega * p.l_f + v_y, v_x) + delta
    alpha_r = np.arctan2(omega * p.l_r - v_y, v_x)
    F_fy = p.D_f * np.sin(p.C_f * np.arctan(p.B_f * alpha_f))
    F_ry = p.D_r * np.sin(p.C_r * np.arctan(p.B_r * alpha_r))
    F_rx = (p.c_m1 - p.c_m2 * v_x) * d - p.c_r0 - p.c_r2 * v_x * v_x
    return F_fy, F_ry, F_rx


def _velocity_rhs(p: CarParams, v_x, v_y, omega, delta, d):
    """Accelerations (v_x_dot, v_y_dot, omega_dot); broadcasts over arrays."""
    F_fy, F_ry, F_rx = _tire_forces(p, v_x, v_y, omega, delta, d)
    sd, cd = np.sin(delta), np.cos(delta)
    dv_x = (F_rx - F_fy * sd + p.m * v_y * omega) / p.m
    dv_y = (F_ry + F_fy * cd - p.m * v_x * omega) / p.m
    domega = (F_fy * p.l_f * cd - F_ry * p.l_r) / p.I_z
    return dv_x, dv_y, domega


def derivative(s: FullState, delta: float, d: float, p: CarParams) -> FullState:
    """Right-hand side of the six equations of motion."""
    dv_x, dv_y, domega = _velocity_rhs(p, s.v_x, s.v_y, s.omega, delta, d)
    cp, sp = np.cos(s.phi), np.sin(s.phi)
    return FullState(
        X=s.v_x * cp - s.v_y * sp,
        Y=s.v_x * sp + s.v_y * cp,
        phi=s.omega,
        v_x=float(dv_x),
        v_y=float(dv_y),
        omega=float(domega),
    )


def integrate(s: FullState, delta: float, d: float, dt: float, p: CarParams) -> FullState:
    """One fixed-step RK4 step of the full model."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(s, dtype=float)

    def f(y: np.ndarray) -> np.ndarray:
        return np.asarray(derivative(FullState(*y), delta, d, p))

    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return FullState(*(x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)))


# ------------------------------------------------------- stationary velocities


def _stationary_residual(p: CarParams, v_x: float, delta: float, z: np.ndarray) -> np.ndarray:
    dv_x, dv_y, domega = _velocity_rhs(p, v_x, z[0], z[1], delta, z[2])
    return np.array([dv_x, dv_y, domega])


def _damped_newton(p: CarParams, v_x: float, delta: float, z0, *, eps: float,
                   max_iter: int) -> np.ndarray | None:
    """Damped Newton on the velocity equations; returns the root or None.

    The line search accepts a step when it reduces a scaled residual norm;
    the yaw equation is weighted by I_z/(m*l_f) so all three components are
    acceleration-like and the moment term does not dominate.
    """
    w = np.array([1.0, 1.0, p.I_z / (p.m * p.l_f)])
    z = np.array(z0, dtype=float)
    f = _stationary_residual(p, v_x, delta, z)
    for _ in range(max_iter):
        if np.max(np.abs(f)) < eps:
            return z
        J = np.empty((3, 3))
        h = 1e-7
        for j in range(3):
            zp = z.copy()
            zp[j] += h
            zm = z.copy()
            zm[j] -= h
            J[:, j] = (
                _stationary_residual(p, v_x, delta, zp)
                - _stationary_residual(p, v_x, delta, zm)
            ) / (2.0 * h)
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            return None
        t = min(1.0, NEWTON_STEP_CAP / max(np.max(np.abs(step)), 1e-12))
        m0 = np.max(np.abs(w * f))
        for _ in range(16):
            z_new = z + t * step
            f_new = _stationary_residual(p, v_x, delta, z_new)
            if np.max(np.abs(w * f_new)) < m0:
                break
            t *= 0.5
        else:
            return None
        z, f = z_new, f_new
    if np.max(np.abs(f)) < eps:
        return z
    return None


def _duty_hold(p: CarParams, v_x: float) -> float:
    # duty cycle holding v_x in straight driving, F_rx = 0
    return (p.c_r0 + p.c_r2 * v_x * v_x) / (p.c_m1 - p.c_m2 * v_x)


def stationary_point(
    v_x: float,
    delta: float,
    p: CarParams = DEFAULT_PARAMS,
    *,
    seed: tuple[float, float, float] | None = None,
    eps: float = EPS_EQ,
    max_iter: int = NEWTON_MAX_ITER,
) -> tuple[float, float, float] | None:
    """Solve the velocity equations for (v_y, omega, d) at fixed (v_x, delta).

    Math
    ----
    Root of the three acceleration equations with damped Newton. The default
    seed is the no-slip kinematic guess (0, v_x*delta/wheelbase, d_hold),
    which lands on the normal driving branch; pass an explicit seed to reach
    other branches. Returns None when Newton does not converge. The returned
    d is the raw root and may fall outside [0, 1]; callers that need a
    realizable input must check.
    """
    if v_x <= 0.0:
        raise ValueError("v_x must be positive")
    if seed is None:
        seed = (0.0, v_x * delta / p.wheelbase, _duty_hold(p, v_x))
    z = _damped_newton(p, v_x, delta, seed, eps=eps, max_iter=max_iter)
    if z is None:
        return None
    return (float(z[0]), float(z[1]), float(z[2]))


def _rear_peak_slip(p: CarParams) -> float:
    return np.tan(np.pi / (2.0 * p.C_r)) / p.B_r


def _oversteer_seed(p: CarParams, v_x: float, delta: float, alpha_r: float):
    """Seed on the rear-saturated branch from steady-cornering force balance.

    At a guessed rear slip alpha_r past the force peak, the moment and
    lateral balances fix omega; rear slip kinematics then fix v_y and the
    longitudinal balance fixes d.
    """
    G_r = np.sin(p.C_r * np.arctan(p.B_r * alpha_r))
    omega = p.D_r * G_r * p.wheelbase / (p.m * v_x * p.l_f)
    v_y = omega * p.l_r - v_x * np.tan(alpha_r)
    F_ry = p.D_r * G_r
    F_fy = F_ry * p.l_r / (p.l_f * np.cos(delta))
    F_rx = F_fy * np.sin(delta) - p.m * v_y * omega
    d = (F_rx + p.c_r0 + p.c_r2 * v_x * v_x) / (p.c_m1 - p.c_m2 * v_x)
    return (float(v_y), float(omega), float(np.clip(d, 0.05, 1.0)))


DRIFT_ALPHA_SEEDS = (0.5, 0.65, 0.8, 0.95)  # rad, rear-slip guesses past the peak


def drift_point(
    v_x: float,
    delta: float,
    p: CarParams = DEFAULT_PARAMS,
    *,
    eps: float = EPS_EQ,
) -> tuple[float, float, float] | None:
    """Drifting stationary point: rear tire past its force peak.

    Multi-start damped Newton from seeds constructed on the oversteer branch.
    For delta <= 0 this returns the left-turning branch (omega > 0, large
    negative v_y); a positive delta is solved by mirror symmetry. Solutions
    whose rear slip is not convincingly past the peak, or whose duty cycle is
    not realizable, are rejected.
    """
    if delta > 0.0:
        sol = drift_point(v_x, -delta, p, eps=eps)
        if sol is None:
            return None
        return (-sol[0], -sol[1], sol[2])
    peak = _rear_peak_slip(p)
    for alpha_r in DRIFT_ALPHA_SEEDS:
        if alpha_r < 1.2 * peak:
            continue
        sol = stationary_point(v_x, delta, p, seed=_oversteer_seed(p, v_x, delta, alpha_r), eps=eps)
        if sol is None:
            continue
        v_y, omega, d = sol
        if omega <= 0.0 or not 0.0 <= d <= 1.0:
            continue
        slip_r = np.arctan2(omega * p.l_r - v_y, v_x)
        if slip_r <= 1.2 * peak:
            continue
        return sol
    return None


def delta_limit(
    v_x: float,
    p: CarParams = DEFAULT_PARAMS,
    *,
    a_lat_max: float = A_LAT_MAX,
    frac: float = A_LAT_FRAC,
) -> float:
    """Largest gridded steering angle at this speed (normal driving region).

    Kinematic steady cornering gives a_lat ~ v_x^2 * delta / wheelbase; the
    limit keeps that below frac * a_lat_max, clipped to the steering bound.
    """
    return float(min(p.delta_max, frac * a_lat_max * p.wheelbase / (v_x * v_x)))


# ---------------------------------------------------------------- mode tables


@dataclass(frozen=True, slots=True)
class Mode:
    """One stationary velocity point with its holding inputs."""

    q: int          # 1-based id
    v_x: float      # m/s
    v_y: float      # m/s
    omega: float    # rad/s
    delta: float    # rad
    d: float        # duty cycle
    L_q: float      # Lipschitz bound of the one-step planning map

    def velocities(self) -> np.ndarray:
        return np.array([self.v_x, self.v_y, self.omega])


# (v_x, delta) pairs whose drifting points ship with every table; each is
# added together with its mirror image
DEFAULT_DRIFT_SPECS: tuple[tuple[float, float], ...] = (
    (1.8, 0.0),
    (1.8, -0.1),
    (2.0, 0.0),
    (2.0, -0.1),
    (2.0, -0.2),
    (2.2, 0.0),
    (2.2, -0.1),
    (2.2, -0.2),
    (2.5, 0.0),
    (2.5, -0.1),
    (2.5, -0.2),
    (2.8, 0.0),
)


@dataclass(frozen=True)
class ModeTable:
    modes: tuple[Mode, ...]
    failed: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        for i, m in enumerate(self.modes):
            if m.q != i + 1:
                raise ValueError("mode ids must be dense from 1 in table order")

    @property
    def n(self) -> int:
        return len(self.modes)

    def by_id(self, q: int) -> Mode:
        if not 1 <= q <= len(self.modes):
            raise ValueError(f"mode id {q} outside 1..{len(self.modes)}")
        return self.modes[q - 1]

    def velocity_array(self) -> np.ndarray:
        """(n, 3) array of stationary (v_x, v_y, omega)."""
        return np.array([[m.v_x, m.v_y, m.omega] for m in self.modes])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "v_x", "v_y", "omega", "delta", "d", "L_q"])
            for m in self.modes:
                w.writerow([m.q, repr(m.v_x), repr(m.v_y), repr(m.omega),
                            repr(m.delta), repr(m.d), repr(m.L_q)])

    @classmethod
    def from_csv(cls, path) -> "ModeTable":
        modes = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                modes.append(Mode(
                    q=int(row["id"]),
                    v_x=float(row["v_x"]),
                    v_y=float(row["v_y"]),
                    omega=float(row["omega"]),
                    delta=float(row["delta"]),
                    d=float(row["d"]),
                    L_q=float(row["L_q"]),
                ))
        return cls(modes=tuple(modes))


def build_mode_table(
    p: CarParams = DEFAULT_PARAMS,
    *,
    v_min: float,
    v_max: float,
    v_step: float,
    n_delta: int,
    t_pp: float,
    drift_specs: Sequence[tuple[float, float]] | None = DEFAULT_DRIFT_SPECS,
    eps: float = EPS_EQ,
) -> ModeTable:
    """Grid the stationary manifold and assemble the mode table.

    Longitudinal speeds run from v_min to v_max in steps of v_step; at each
    speed, n_delta steering angles are placed uniformly over the normal
    driving region [-delta_limit, +delta_limit]. Each drift spec contributes
    its stationary point and the mirror image. Combinations where Newton
    fails (or yields an unrealizable duty cycle) are reported in `failed`
    rather than raising.
    """
    from .ppmodel import lipschitz

    if n_delta < 1:
        raise ValueError("n_delta must be at least 1")
    entries: list[tuple[float, float, float, float, float]] = []
    failed: list[tuple[float, float]] = []
    n_v = int(round((v_max - v_min) / v_step)) + 1
    for v_x in (v_min + v_step * i for i in range(n_v)):
        lim = delta_limit(v_x, p)
        deltas = np.linspace(-lim, lim, n_delta) if n_delta > 1 else np.array([0.0])
        for delta in deltas:
            sol = stationary_point(v_x, float(delta), p, eps=eps)
            if sol is None or not 0.0 <= sol[2] <= 1.0:
                failed.append((v_x, float(delta)))
                continue
            entries.append((v_x, sol[0], sol[1], float(delta), sol[2]))
    for v_x, delta in drift_specs or ():
        sol = drift_point(v_x, delta, p, eps=eps)
        if sol is None:
            failed.append((v_x, delta))
            continue
        entries.append((v_x, sol[0], sol[1], delta, sol[2]))
        entries.append((v_x, -sol[0], -sol[1], -delta, sol[2]))
    modes = []
    for i, (v_x, v_y, omega, delta, d) in enumerate(entries):
        m = Mode(q=i + 1, v_x=v_x, v_y=v_y, omega=omega, delta=delta, d=d, L_q=0.0)
        modes.append(dataclasses.replace(m, L_q=lipschitz(m, t_pp)))
    return ModeTable(modes=tuple(modes), failed=tuple(failed))


# ------------------------------------------------------- transition automaton


@dataclass(frozen=True)
class TransitionAutomaton:
    """Allowed mode switches; allowed[i, j] uses 0-based positions (id - 1)."""

    allowed: np.ndarray
    t_t: float

    def __post_init__(self) -> None:
        a = self.allowed
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.dtype != np.bool_:
            raise ValueError("allowed must be a square boolean matrix")

    @property
    def n(self) -> int:
        return self.allowed.shape[0]

    def successors(self, q: int) -> list[int]:
        """Mode ids reachable from mode id q, ascending."""
        if not 1 <= q <= self.n:
            raise ValueError(f"mode id {q} outside 1..{self.n}")
        return [int(j) + 1 for j in np.flatnonzero(self.allowed[q - 1])]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in self.allowed:
                w.writerow(["1" if x else "0" for x in row])

    @classmethod
    def from_csv(cls, path, t_t: float) -> "TransitionAutomaton":
        with open(path, newline="") as fh:
            rows = [[c == "1" for c in row] for row in csv.reader(fh) if row]
        return cls(allowed=np.array(rows, dtype=bool), t_t=t_t)


def _input_candidates(p: CarParams, mode: Mode | None, n_search: int):
    deltas = np.linspace(-p.delta_max, p.delta_max, n_search)
    duties = np.linspace(0.0, 1.0, n_search)
    DE, DD = np.meshgrid(deltas, duties, indexing="ij")
    de = DE.ravel()
    dd = DD.ravel()
    if mode is not None:
        # the mode's own stationary input holds the equilibrium exactly
        de = np.append(de, mode.delta)
        dd = np.append(dd, mode.d)
    return de, dd


def _reach_endpoints(
    p: CarParams, mode: Mode, t_t: float, n_search: int, n_substeps: int
) -> np.ndarray:
    """Velocity endpoints after t_t under every candidate constant input."""
    de, dd = _input_candidates(p, mode, n_search)
    v_x = np.full_like(de, mode.v_x)
    v_y = np.full_like(de, mode.v_y)
    omega = np.full_like(de, mode.omega)
    dt = t_t / n_substeps
    for _ in range(n_substeps):
        k1 = _velocity_rhs(p, v_x, v_y, omega, de, dd)
        k2 = _velocity_rhs(p, v_x + 0.5 * dt * k1[0], v_y + 0.5 * dt * k1[1],
                           omega + 0.5 * dt * k1[2], de, dd)
        k3 = _velocity_rhs(p, v_x + 0.5 * dt * k2[0], v_y + 0.5 * dt * k2[1],
                           omega + 0.5 * dt * k2[2], de, dd)
        k4 = _velocity_rhs(p, v_x + dt * k3[0], v_y + dt * k3[1],
                           omega + dt * k3[2], de, dd)
        v_x = v_x + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        v_y = v_y + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        omega = omega + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    return np.stack([v_x, v_y, omega], axis=1)


def _targets_reached(ends: np.ndarray, targets: np.ndarray,
                     eps_v: float, eps_omega: float) -> np.ndarray:
    # ends (k, 3), targets (n, 3) -> (n,) any-candidate hit mask
    dv = np.abs(ends[None, :, :2] - targets[:, None, :2])
    dw = np.abs(ends[None, :, 2] - targets[:, None, 2])
    return np.any((dv <= eps_v).all(axis=2) & (dw <= eps_omega), axis=1)


def transition_feasible(
    a: Mode,
    b: Mode,
    p: CarParams = DEFAULT_PARAMS,
    *,
    t_t: float,
    eps_v: float = EPS_V,
    eps_omega: float = EPS_OMEGA,
    n_search: int = 15,
    n_substeps: int = 10,
) -> bool:
    """Can some constant input steer a's velocities to b's within t_t?

    Forward-simulates the velocity subdynamics under each candidate input
    (an n_search x n_search grid over the input box plus a's own stationary
    input) and accepts when any endpoint matches b's velocities within
    (eps_v, eps_v, eps_omega) componentwise.
    """
    ends = _reach_endpoints(p, a, t_t, n_search, n_substeps)
    target = np.array([[b.v_x, b.v_y, b.omega]])
    return bool(_targets_reached(ends, target, eps_v, eps_omega)[0])


def build_automaton(
    table: ModeTable,
    p: CarParams = DEFAULT_PARAMS,
    *,
    t_t: float,
    eps_v: float = EPS_V,
    eps_omega: float = EPS_OMEGA,
    n_search: int = 15,
    n_substeps: int = 10,
) -> TransitionAutomaton:
    """Transition matrix over a mode table (endpoints shared per source)."""
    targets = table.velocity_array()
    n = table.n
    allowed = np.zeros((n, n), dtype=bool)
    for i, mode in enumerate(table.modes):
        ends = _reach_endpoints(p, mode, t_t, n_search, n_substeps)
        allowed[i] = _targets_reached(ends, targets, eps_v, eps_omega)
    return TransitionAutomaton(allowed=allowed, t_t=t_t)
