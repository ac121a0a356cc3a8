"""Closed-loop racing experiments: plant, tracking regulator, metrics, sweeps.

The planner world is the kinematic mode model; the plant is the full
bicycle model (or, with the exact-model switch, the mode model itself).
Every planning period the planner proposes a mode sequence; a time-varying
tracking regulator follows the induced reference between replans. Inputs
are optionally quantized to 8-bit grids before they reach the plant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor
from time import perf_counter
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

from .grid import KernelSet
from .kernel import SafeInputTable
from .planner import Plan, plan_kernel, plan_naive, recover
from .ppmodel import PPState, displacement, step
from .track import KERNEL_MARGIN, VIOLATION_MARGIN, Track
from .vehicle import (
    DEFAULT_PARAMS,
    CarParams,
    FullState,
    ModeTable,
    TransitionAutomaton,
    _velocity_rhs,
    integrate,
)

__all__ = [
    "World",
    "SimConfig",
    "RunReport",
    "Reference",
    "build_reference",
    "linearize",
    "riccati_gains",
    "track_follow_control",
    "quantize_inputs",
    "centerline_start",
    "viable_start",
    "run",
    "sweep",
    "write_report_csv",
    "write_trajectory_csv",
    "TRAJECTORY_FIELDS",
    "REPORT_FIELDS",
]

# tracking-cost weights on (X, Y, phi, v_x, v_y, omega), the input-rate
# penalty on (delta, d) steps, and a small absolute input-deviation penalty
# keeping the rate-augmented problem well conditioned
TRACK_Q = (40.0, 40.0, 12.0, 2.0, 0.5, 0.1)
RATE_R = (8.0, 4.0)
DEV_R = (0.05, 0.05)

FD_EPS = 1e-6          # central-difference step of the linearization
RK4_SUBSTEPS = 4       # plant substeps per control period
D_LO, D_HI = 0.0, 1.0  # duty-cycle bounds
LAP_HYSTERESIS = 0.1   # fraction of track length around the start line

_QLEVELS = 255         # 8-bit input grids: 256 levels, 255 intervals


class World(NamedTuple):
    """Immutable closed-loop environment shared by sweep rows."""

    track: Track
    table: ModeTable
    automaton: TransitionAutomaton
    kernel: KernelSet | None = None
    safe: SafeInputTable | None = None
    params: CarParams = DEFAULT_PARAMS


@dataclass(frozen=True)
class SimConfig:
    """One closed-loop experiment.

    t_pp must be an integer multiple of dt_control: the planner runs on the
    coarse period, the tracking controller on the fine one. The exact-model
    switch replaces the plant by the planning model itself, in which case
    steps counts planning segments and the tracking layer is bypassed.
    velocity_scale perturbs the plant drivetrain to exercise recovery.
    """

    controller: str = "kernel"
    t_pp: float = 0.2
    n_s: int = 3
    dt_control: float = 0.02
    steps: int = 10_000
    quantization: bool = True
    exact_model: bool = False
    rk4_substeps: int = RK4_SUBSTEPS
    margin: float = KERNEL_MARGIN
    violation_margin: float = VIOLATION_MARGIN
    velocity_scale: float = 1.0
    n_samples: int = 11
    start_progress: float = 0.0
    start_pose: tuple[float, float, float] | None = None
    q0: int = 1
    label: str = ""

    def __post_init__(self) -> None:
        if self.controller not in ("kernel", "naive"):
            raise ValueError("controller must be 'kernel' or 'naive'")
        if self.dt_control <= 0.0:
            raise ValueError("dt_control must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        ratio = self.t_pp / self.dt_control
        if ratio < 1.0 - 1e-9 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("t_pp must be an integer multiple of dt_control")
        if self.n_s < 1:
            raise ValueError("n_s must be at least 1")
        if self.rk4_substeps < 1:
            raise ValueError("rk4_substeps must be at least 1")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.velocity_scale <= 0.0:
            raise ValueError("velocity_scale must be positive")
        if self.exact_model and self.velocity_scale != 1.0:
            raise ValueError("the exact-model plant has no parameters to scale")

    @property
    def steps_per_replan(self) -> int:
        return int(round(self.t_pp / self.dt_control))


TRAJECTORY_FIELDS = ("t", "X", "Y", "phi", "v_x", "v_y", "omega",
                     "delta", "d", "progress")

REPORT_FIELDS = ("label", "controller", "t_pp", "n_s", "steps", "quantization",
                 "laps", "mean_lap_s", "median_lap_s", "violations",
                 "planner_ms_median", "planner_ms_max", "nodes_total",
                 "replans", "infeasible_replans", "emergency_stops", "error")


@dataclass(frozen=True, eq=False)
class RunReport:
    """Metrics of one closed-loop run.

    Everything except the planner wall-clock fields is deterministic for a
    fixed config and world. trajectory has one row per control step in
    TRAJECTORY_FIELDS order.
    """

    label: str
    controller: str
    t_pp: float
    n_s: int
    steps: int
    quantization: bool
    lap_times: tuple[float, ...]
    violations: int
    planner_ms: tuple[float, ...]
    node_counts: tuple[int, ...]
    mode_log: tuple[int, ...]
    replans: int
    infeasible_replans: int
    emergency_stops: int
    trajectory: np.ndarray
    error: str = ""

    @property
    def laps(self) -> int:
        return len(self.lap_times)

    @property
    def mean_lap(self) -> float:
        return float(np.mean(self.lap_times)) if self.lap_times else math.nan

    @property
    def median_lap(self) -> float:
        return float(np.median(self.lap_times)) if self.lap_times else math.nan

    @property
    def planner_ms_median(self) -> float:
        return float(np.median(self.planner_ms)) if self.planner_ms else math.nan

    @property
    def planner_ms_max(self) -> float:
        return float(max(self.planner_ms)) if self.planner_ms else math.nan

    @property
    def nodes_total(self) -> int:
        return int(sum(self.node_counts))

    @classmethod
    def failed(cls, cfg: SimConfig, error: str) -> "RunReport":
        return cls(label=cfg.label, controller=cfg.controller, t_pp=cfg.t_pp,
                   n_s=cfg.n_s, steps=cfg.steps, quantization=cfg.quantization,
                   lap_times=(), violations=0, planner_ms=(), node_counts=(),
                   mode_log=(), replans=0, infeasible_replans=0,
                   emergency_stops=0,
                   trajectory=np.empty((0, len(TRAJECTORY_FIELDS))), error=error)


# ------------------------------------------------------------ reference path


class Reference(NamedTuple):
    """Dense tracking reference: states at control instants, inputs between.

    states is (K+1, 6) in FullState order with a continuous (unwrapped)
    heading; inputs is (K, 2) stationary (delta, d) of the active mode.
    """

    states: np.ndarray
    inputs: np.ndarray


def build_reference(pose: tuple[float, float, float], modes: Sequence[int],
                    table: ModeTable, dt: float, per_seg: int) -> Reference:
    """Rollout of a mode sequence from a world pose, sampled every dt.

    The heading is left unwrapped so tracking errors never jump by 2*pi.
    The reference velocity of the instant a segment starts is already the
    new mode's stationary triple.
    """
    n_seg = len(modes)
    K = n_seg * per_seg
    states = np.empty((K + 1, 6))
    inputs = np.empty((K, 2))
    X, Y, phi = pose
    for j, u in enumerate(modes):
        m = table.by_id(int(u))
        cp, sp = math.cos(phi), math.sin(phi)
        base = j * per_seg
        for k in range(per_seg):
            dx, dy, dphi = displacement(m, dt * k)
            states[base + k] = (X + cp * dx - sp * dy, Y + sp * dx + cp * dy,
                                phi + dphi, m.v_x, m.v_y, m.omega)
            inputs[base + k] = (m.delta, m.d)
        dx, dy, dphi = displacement(m, dt * per_seg)
        X, Y, phi = X + cp * dx - sp * dy, Y + sp * dx + cp * dy, phi + dphi
        if j == n_seg - 1:
            states[K] = (X, Y, phi, m.v_x, m.v_y, m.omega)
    return Reference(states=states, inputs=inputs)


# ------------------------------------------------------- tracking controller


def _rhs_batch(y: np.ndarray, delta, d, p: CarParams) -> np.ndarray:
    """Equations of motion on stacked states, same arithmetic as vehicle."""
    v_x, v_y, omega = y[..., 3], y[..., 4], y[..., 5]
    dv_x, dv_y, domega = _velocity_rhs(p, v_x, v_y, omega, delta, d)
    cp, sp = np.cos(y[..., 2]), np.sin(y[..., 2])
    return np.stack([v_x * cp - v_y * sp, v_x * sp + v_y * cp, y[..., 5],
                     dv_x, dv_y, domega], axis=-1)


def _phi_map(y: np.ndarray, delta, d, dt: float, substeps: int,
             p: CarParams) -> np.ndarray:
    """Discrete control-period map: RK4 with fixed substeps, batched."""
    h = dt / substeps
    for _ in range(substeps):
        k1 = _rhs_batch(y, delta, d, p)
        k2 = _rhs_batch(y + 0.5 * h * k1, delta, d, p)
        k3 = _rhs_batch(y + 0.5 * h * k2, delta, d, p)
        k4 = _rhs_batch(y + h * k3, delta, d, p)
        y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def linearize(ref: Reference, params: CarParams, dt: float,
              substeps: int = RK4_SUBSTEPS) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of the control-period map along ref.

    Returns A of shape (K, 6, 6) and B of shape (K, 6, 2), one pair per
    reference interval.
    """
    K = ref.inputs.shape[0]
    x0 = ref.states[:K]
    u0 = ref.inputs
    # 12 state and 4 input perturbations per interval, mapped in one batch
    y = np.repeat(x0[:, None, :], 16, axis=1)
    dlt = np.repeat(u0[:, None, 0], 16, axis=1)
    dcy = np.repeat(u0[:, None, 1], 16, axis=1)
    for i in range(6):
        y[:, 2 * i, i] += FD_EPS
        y[:, 2 * i + 1, i] -= FD_EPS
    dlt[:, 12] += FD_EPS
    dlt[:, 13] -= FD_EPS
    dcy[:, 14] += FD_EPS
    dcy[:, 15] -= FD_EPS
    out = _phi_map(y, dlt, dcy, dt, substeps, params)
    A = np.empty((K, 6, 6))
    B = np.empty((K, 6, 2))
    for i in range(6):
        A[:, :, i] = (out[:, 2 * i] - out[:, 2 * i + 1]) / (2.0 * FD_EPS)
    B[:, :, 0] = (out[:, 12] - out[:, 13]) / (2.0 * FD_EPS)
    B[:, :, 1] = (out[:, 14] - out[:, 15]) / (2.0 * FD_EPS)
    return A, B


def riccati_gains(A: np.ndarray, B: np.ndarray,
                  q_state: Sequence[float] = TRACK_Q,
                  r_rate: Sequence[float] = RATE_R,
                  r_dev: Sequence[float] = DEV_R) -> np.ndarray:
    """Backward Riccati recursion of the rate-augmented tracking problem.

    The augmented state is (state deviation, previous input deviation); the
    decision variable is the input-deviation rate. Returns gains of shape
    (K, 2, 8); the control applies u = u_ref + eta_prev - gains[k] @ z.
    """
    K = A.shape[0]
    Qa = np.diag(np.concatenate([np.asarray(q_state, dtype=float),
                                 np.asarray(r_dev, dtype=float)]))
    R = np.diag(np.asarray(r_rate, dtype=float))
    Aa = np.zeros((K, 8, 8))
    Aa[:, :6, :6] = A
    Aa[:, :6, 6:] = B
    Aa[:, 6:, 6:] = np.eye(2)
    Ba = np.zeros((K, 8, 2))
    Ba[:, :6, :] = B
    Ba[:, 6:, :] = np.eye(2)
    gains = np.empty((K, 2, 8))
    P = Qa
    for k in range(K - 1, -1, -1):
        BtP = Ba[k].T @ P
        G = R + BtP @ Ba[k]
        gains[k] = np.linalg.solve(G, BtP @ Aa[k])
        P = Qa + Aa[k].T @ P @ (Aa[k] - Ba[k] @ gains[k])
        P = 0.5 * (P + P.T)
    return gains


def _apply_gain(s: FullState, ref: Reference, gains: np.ndarray, k: int,
                u_prev: tuple[float, float],
                params: CarParams) -> tuple[float, float]:
    z = np.empty(8)
    z[:6] = np.asarray(s, dtype=float) - ref.states[k]
    anchor = ref.inputs[k - 1] if k > 0 else ref.inputs[0]
    z[6] = u_prev[0] - anchor[0]
    z[7] = u_prev[1] - anchor[1]
    w = -gains[k] @ z
    delta = ref.inputs[k, 0] + z[6] + w[0]
    d = ref.inputs[k, 1] + z[7] + w[1]
    delta = min(max(delta, -params.delta_max), params.delta_max)
    d = min(max(d, D_LO), D_HI)
    return float(delta), float(d)


def track_follow_control(s: FullState, ref: Reference,
                         u_prev: tuple[float, float], params: CarParams,
                         dt: float, substeps: int = RK4_SUBSTEPS,
                         gains: np.ndarray | None = None,
                         k: int = 0) -> tuple[float, float]:
    """Saturated tracking input for the k-th instant of the reference.

    On the reference with the reference input history the correction is
    zero. The closed loop precomputes gains once per replan; calling with
    gains=None recomputes them from scratch.
    """
    if gains is None:
        A, B = linearize(ref, params, dt, substeps)
        gains = riccati_gains(A, B)
    return _apply_gain(s, ref, gains, k, u_prev, params)


def quantize_inputs(delta: float, d: float,
                    params: CarParams) -> tuple[float, float]:
    """Snap inputs to the 8-bit grids spanning their bounds."""
    lo, hi = -params.delta_max, params.delta_max
    k = round((min(max(delta, lo), hi) - lo) / (hi - lo) * _QLEVELS)
    delta_q = lo + k * (hi - lo) / _QLEVELS
    k = round((min(max(d, D_LO), D_HI) - D_LO) / (D_HI - D_LO) * _QLEVELS)
    d_q = D_LO + k * (D_HI - D_LO) / _QLEVELS
    return delta_q, d_q


# ------------------------------------------------------------------- helpers


def centerline_start(track: Track, s0: float = 0.0) -> tuple[float, float, float]:
    """Pose on the centerline at arclength s0, heading along the track."""
    idx = track.index
    s = float(s0) % track.total_length
    j = int(np.clip(np.searchsorted(idx.cum, s, side="right") - 1,
                    0, idx.n_pieces - 1))
    frac = (s - idx.cum[j]) / idx.lens[j]
    x, y = idx.starts[j] + frac * idx.vecs[j]
    phi = math.atan2(idx.vecs[j, 1], idx.vecs[j, 0]) % (2.0 * math.pi)
    return float(x), float(y), float(phi)


def viable_start(kernel: KernelSet, table: ModeTable, track: Track, q: int,
                 s0: float = 0.0) -> PPState:
    """Kernel cell center of mode q best aligned with the track at s0.

    Scores candidate centers by progress distance, lateral offset, and
    heading mismatch; deterministic, raises when mode q has no kernel cell.
    """
    spec = kernel.spec
    hits = np.argwhere(kernel.bits[q - 1])
    if hits.size == 0:
        raise ValueError(f"kernel holds no cell of mode {q}")
    phis = spec.axis_coords(2)[hits[:, 0]]
    ys = spec.axis_coords(1)[hits[:, 1]]
    xs = spec.axis_coords(0)[hits[:, 2]]
    pos = np.column_stack([xs, ys])
    d, s = track._nearest(pos)
    total = track.total_length
    ds = np.abs(s - (float(s0) % total))
    ds = np.minimum(ds, total - ds)
    x0, y0, tangent = np.empty(0), None, None
    # tangent heading at each candidate's projection
    idx = track.index
    j = np.clip(np.searchsorted(idx.cum, s, side="right") - 1, 0,
                idx.n_pieces - 1)
    tang = np.arctan2(idx.vecs[j, 1], idx.vecs[j, 0]) % (2.0 * np.pi)
    dphi = np.abs(phis - tang)
    dphi = np.minimum(dphi, 2.0 * np.pi - dphi)
    score = ds + 3.0 * d + 2.0 * dphi
    k = int(np.argmin(score))
    return PPState(float(xs[k]), float(ys[k]), float(phis[k]), q)


def _boundary_clearance(track: Track, pos: np.ndarray) -> np.ndarray:
    """Distance to the nearest wall or obstacle, negative outside."""
    clear = track.half_width - track.distance_to_centerline(pos)
    for poly in track.obstacles:
        clear = np.minimum(clear, track.distance_to_obstacle(pos, poly))
    return clear


class _LapCounter:
    """Start-line crossing detector with hysteresis against jitter.

    Arms in the last tenth of the lap, fires in the first tenth, then
    requires the car to leave the start-line neighborhood before re-arming.
    """

    def __init__(self, total: float, t0: float) -> None:
        self.total = total
        self.h = LAP_HYSTERESIS * total
        self.state = "mid"
        self.t_start = t0
        self.lap_times: list[float] = []

    def update(self, s: float, t: float) -> None:
        if self.state == "armed" and s < self.h:
            self.lap_times.append(t - self.t_start)
            self.t_start = t
            self.state = "cooldown"
        elif self.state == "cooldown" and self.h <= s <= self.total - self.h:
            self.state = "mid"
        elif self.state == "mid" and s > self.total - self.h:
            self.state = "armed"


def _scaled_params(params: CarParams, factor: float) -> CarParams:
    if factor == 1.0:
        return params
    m = params.to_mapping()
    m["c_m1"] = params.c_m1 * factor
    m["c_m2"] = params.c_m2 * factor
    return CarParams.from_mapping(m)


# ---------------------------------------------------------------- simulation


class _Planner:
    """Replan bookkeeping shared by both plants."""

    def __init__(self, cfg: SimConfig, world: World) -> None:
        self.cfg = cfg
        self.world = world
        self.planner_ms: list[float] = []
        self.node_counts: list[int] = []
        self.mode_log: list[int] = []
        self.replans = 0
        self.infeasible = 0
        self.emergency_stops = 0
        self.stopped = False

    def replan(self, x: PPState) -> Plan | None:
        cfg, w = self.cfg, self.world
        self.replans += 1
        t0 = perf_counter()
        if cfg.controller == "kernel":
            plan = plan_kernel(x, w.table, w.kernel, w.safe, w.track,
                               n_s=cfg.n_s, t_pp=cfg.t_pp)
            if plan is None:
                self.infeasible += 1
                x_r = recover(x, w.kernel)
                if x_r is not None:
                    plan = plan_kernel(x_r, w.table, w.kernel, w.safe, w.track,
                                       n_s=cfg.n_s, t_pp=cfg.t_pp)
        else:
            plan = plan_naive(x, w.table, w.automaton, w.track, n_s=cfg.n_s,
                              t_pp=cfg.t_pp, n_samples=cfg.n_samples,
                              margin=cfg.margin)
            if plan is None:
                self.infeasible += 1
        self.planner_ms.append((perf_counter() - t0) * 1e3)
        if plan is None:
            if not self.stopped:
                self.emergency_stops += 1
            self.stopped = True
        else:
            self.stopped = False
            self.node_counts.append(plan.node_count)
            self.mode_log.append(plan.modes[0] if plan.modes else x.q)
        return plan

    def report(self, cfg: SimConfig, lap_times: list[float], violations: int,
               trajectory: np.ndarray) -> RunReport:
        return RunReport(
            label=cfg.label, controller=cfg.controller, t_pp=cfg.t_pp,
            n_s=cfg.n_s, steps=cfg.steps, quantization=cfg.quantization,
            lap_times=tuple(lap_times), violations=violations,
            planner_ms=tuple(self.planner_ms),
            node_counts=tuple(self.node_counts),
            mode_log=tuple(self.mode_log), replans=self.replans,
            infeasible_replans=self.infeasible,
            emergency_stops=self.emergency_stops, trajectory=trajectory)


def _start_pose(cfg: SimConfig, track: Track) -> tuple[float, float, float]:
    if cfg.start_pose is not None:
        return cfg.start_pose
    return centerline_start(track, cfg.start_progress)


def _validate_world(cfg: SimConfig, world: World) -> None:
    if cfg.controller == "kernel":
        if world.kernel is None or world.safe is None:
            raise ValueError("kernel controller needs a kernel and safe table")
        if not world.kernel.spec.close_to(world.safe.spec):
            raise ValueError("kernel and safe-input table disagree on the grid")
    world.table.by_id(cfg.q0)


def _run_exact(cfg: SimConfig, world: World) -> RunReport:
    """Closed loop with the planning model as plant; steps are segments."""
    track, table = world.track, world.table
    per = cfg.steps_per_replan
    X, Y, phi = _start_pose(cfg, track)
    x = PPState(X, Y, phi % (2.0 * math.pi), cfg.q0)
    pl = _Planner(cfg, world)
    laps = _LapCounter(track.total_length, 0.0)
    rows = np.empty((cfg.steps * per, len(TRAJECTORY_FIELDS)))
    violations = 0
    for seg in range(cfg.steps):
        t_seg = seg * cfg.t_pp
        plan = pl.replan(x)
        if plan is None:
            # nothing admissible: the kinematic plant halts in place
            pose = np.repeat([[x.X, x.Y]], per, axis=0)
            heads = np.full(per, x.phi)
            u_row = (0.0, 0.0)
            vel = (0.0, 0.0, 0.0)
        else:
            mode = table.by_id(plan.modes[0])
            cp, sp = math.cos(x.phi), math.sin(x.phi)
            pose = np.empty((per, 2))
            heads = np.empty(per)
            for k in range(per):
                dx, dy, dphi = displacement(mode, cfg.dt_control * k)
                pose[k] = (x.X + cp * dx - sp * dy, x.Y + sp * dx + cp * dy)
                heads[k] = x.phi + dphi
            u_row = (mode.delta, mode.d)
            vel = (mode.v_x, mode.v_y, mode.omega)
        prog = track.progress(pose)
        clear = _boundary_clearance(track, pose)
        violations += int(np.count_nonzero(clear < cfg.violation_margin))
        for k in range(per):
            t = t_seg + k * cfg.dt_control
            rows[seg * per + k] = (t, pose[k, 0], pose[k, 1], heads[k],
                                   vel[0], vel[1], vel[2], u_row[0], u_row[1],
                                   prog[k])
            laps.update(float(prog[k]), t)
        if plan is not None:
            x = step(x, mode, cfg.t_pp, table)
    return pl.report(cfg, laps.lap_times, violations, rows)


def _run_full(cfg: SimConfig, world: World) -> RunReport:
    """Closed loop with the bicycle-model plant."""
    track, table = world.track, world.table
    params = world.params
    plant_params = _scaled_params(params, cfg.velocity_scale)
    per = cfg.steps_per_replan
    horizon = cfg.n_s * per
    X, Y, phi = _start_pose(cfg, track)
    mode0 = table.by_id(cfg.q0)
    s = FullState(X, Y, phi, mode0.v_x, mode0.v_y, mode0.omega)
    q_cur = cfg.q0
    u_prev = (mode0.delta, mode0.d)
    pl = _Planner(cfg, world)
    laps = _LapCounter(track.total_length, 0.0)
    rows = np.empty((cfg.steps, len(TRAJECTORY_FIELDS)))
    violations = 0
    ref: Reference | None = None
    gains: np.ndarray | None = None
    sub_dt = cfg.dt_control / cfg.rk4_substeps
    for k in range(cfg.steps):
        t = k * cfg.dt_control
        if k % per == 0:
            x_pp = PPState(s.X, s.Y, s.phi % (2.0 * math.pi), q_cur)
            plan = pl.replan(x_pp)
            if plan is None:
                ref, gains = None, None
            else:
                q_cur = plan.modes[0]
                ref = build_reference((s.X, s.Y, s.phi), plan.modes, table,
                                      cfg.dt_control, per)
                A, B = linearize(ref, params, cfg.dt_control,
                                 cfg.rk4_substeps)
                gains = riccati_gains(A, B)
        if ref is None:
            u = (0.0, 0.0)
        else:
            u = _apply_gain(s, ref, gains, k % per, u_prev, params)
        if cfg.quantization:
            u = quantize_inputs(u[0], u[1], params)
        prog = float(track.progress((s.X, s.Y)))
        clear = float(_boundary_clearance(track, np.array([s.X, s.Y])))
        rows[k] = (t, s.X, s.Y, s.phi, s.v_x, s.v_y, s.omega,
                   u[0], u[1], prog)
        if clear < cfg.violation_margin:
            violations += 1
        laps.update(prog, t)
        for _ in range(cfg.rk4_substeps):
            s = integrate(s, u[0], u[1], sub_dt, plant_params)
        u_prev = u
    return pl.report(cfg, laps.lap_times, violations, rows)


def run(cfg: SimConfig, world: World) -> RunReport:
    """Execute one closed-loop experiment and collect its metrics."""
    _validate_world(cfg, world)
    if cfg.steps == 0:
        return RunReport.failed(cfg, "")
    if cfg.exact_model:
        return _run_exact(cfg, world)
    return _run_full(cfg, world)


# -------------------------------------------------------------------- sweeps


def sweep(rows: Sequence[tuple[SimConfig, World]],
          workers: int = 1) -> list[RunReport]:
    """Run a config matrix; failures land in the row, never propagate."""

    def one(pair: tuple[SimConfig, World]) -> RunReport:
        cfg, world = pair
        try:
            return run(cfg, world)
        except Exception as exc:  # noqa: BLE001 - row isolation is the contract
            return RunReport.failed(cfg, f"{type(exc).__name__}: {exc}")

    if workers > 1 and len(rows) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, rows))
    return [one(pair) for pair in rows]


def write_report_csv(reports: Iterable[RunReport], fp: IO[str]) -> None:
    """One row per run in REPORT_FIELDS order; header always present."""
    w = csv.writer(fp)
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow([r.label, r.controller, repr(r.t_pp), r.n_s, r.steps,
                    int(r.quantization), r.laps, repr(r.mean_lap),
                    repr(r.median_lap), r.violations,
                    repr(r.planner_ms_median), repr(r.planner_ms_max),
                    r.nodes_total, r.replans, r.infeasible_replans,
                    r.emergency_stops, r.error])


def write_trajectory_csv(report: RunReport, fp: IO[str]) -> None:
    w = csv.writer(fp)
    w.writerow(TRAJECTORY_FIELDS)
    for row in report.trajectory:
        w.writerow([repr(v) for v in row])
