"""Finite viability and discriminating kernels over the state grid.

Both algorithms iterate a synchronous shrink of the gridded constraint set
until it stops changing. A point survives a viability sweep when some
admissible mode keeps the whole sampled segment inside the track and the
r-ball around the segment endpoint still meets the previous set. The
discriminating variant is robust to the space discretization itself: the
endpoint is perturbed by every point of a disturbance lattice, survival
demands the full projection ball inside the previous set, and the per-point
verdict is accepted only when boxes of continuous disturbances validated by
the lattice checks jointly cover the whole disturbance set.

The per-sweep work is organized by (input mode, heading plane): on a fixed
heading plane the successor of every cell is the cell shifted by one constant
world-frame displacement, so ball lookups collapse into windowed gathers of
boolean planes. The expensive part, sampling every segment against the track,
is independent of the iteration and cached across calls that share geometry.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .grid import (
    BOUNDARY_TOL,
    TWO_PI,
    GridIndex,
    GridSpec,
    KernelSet,
    _axis_window,
    _mode_axis_index,
)
from .ppmodel import PPConfig, displacement
from .track import KERNEL_MARGIN, Track
from .vehicle import ModeTable, TransitionAutomaton

__all__ = [
    "DisturbanceGrid",
    "VBox",
    "SafeInputTable",
    "viability_kernel",
    "disc_kernel_modified",
    "safe_inputs",
    "fraction",
    "kernel_slice",
    "UNION_RULES",
]

UNION_RULES = ("max-volume", "intersection")


@dataclass(frozen=True, eq=False)
class DisturbanceGrid:
    """Lattice over a box of additive state disturbances.

    The box is `radii[j]`-wide per axis (infinity-norm ball when the radii
    are equal); each axis carries ceil(radii[j]/r) + 1 points including both
    boundary values, so the lattice spacing never exceeds the state grid
    spacing 2r. A zero radius collapses the axis to the single value 0.
    """

    r: float
    radii: tuple[float, float, float]
    axes: tuple[np.ndarray, np.ndarray, np.ndarray] = field(init=False, repr=False)
    shape: tuple[int, int, int] = field(init=False)
    points: np.ndarray = field(init=False, repr=False)  # (n_points, 3)

    def __post_init__(self) -> None:
        if self.r <= 0.0:
            raise ValueError("state grid radius r must be positive")
        if any(R < 0.0 for R in self.radii):
            raise ValueError("disturbance radii must be nonnegative")
        axes = []
        for R in self.radii:
            m = 1 if R == 0.0 else int(np.ceil(R / self.r - 1e-12)) + 1
            ax = np.linspace(-R, R, m)
            if m > 1 and (ax[1] - ax[0]) > 2.0 * self.r + 1e-12:
                raise ValueError("disturbance lattice spacing exceeds 2r")
            axes.append(ax)
        shape = tuple(ax.size for ax in axes)
        pts = np.stack(
            np.meshgrid(*axes, indexing="ij"), axis=-1
        ).reshape(-1, 3)
        object.__setattr__(self, "axes", tuple(axes))
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "points", pts)

    @classmethod
    def for_mode(
        cls, L_q: float, r: float, axis_radii: tuple[float, float, float] | None = None
    ) -> "DisturbanceGrid":
        """Lattice for the disturbance ball L_q * r * B_inf (or explicit radii)."""
        if axis_radii is None:
            if L_q < 0.0:
                raise ValueError("L_q must be nonnegative")
            axis_radii = (L_q * r, L_q * r, L_q * r)
        return cls(r=r, radii=tuple(float(R) for R in axis_radii))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(
            float(ax[1] - ax[0]) if ax.size > 1 else 0.0 for ax in self.axes
        )


class VBox(NamedTuple):
    """Axis-aligned box of continuous disturbances validated by one check."""

    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    def widths(self) -> tuple[float, float, float]:
        return tuple(u - l for l, u in zip(self.lower, self.upper))

    def volume(self, dims=(0, 1, 2)) -> float:
        out = 1.0
        for j in dims:
            out *= max(self.upper[j] - self.lower[j], 0.0)
        return out

    def intersect(self, other: "VBox") -> "VBox":
        return VBox(
            tuple(max(a, b) for a, b in zip(self.lower, other.lower)),
            tuple(min(a, b) for a, b in zip(self.upper, other.upper)),
        )

    def contains(self, v, tol: float = 0.0) -> bool:
        return all(
            l - tol <= x <= u + tol for l, u, x in zip(self.lower, self.upper, v)
        )


@dataclass(eq=False)
class SafeInputTable:
    """Per grid point, the bit mask over mode ids of surviving inputs.

    The mask of a point is nonempty exactly when the point belongs to the
    kernel the table was computed with.
    """

    spec: GridSpec
    mask: np.ndarray  # bool, grid_shape() + (n_modes,)

    def __post_init__(self) -> None:
        expect = self.spec.grid_shape() + (self.spec.n_modes,)
        if self.mask.shape != expect:
            raise ValueError(f"mask shape {self.mask.shape}, expected {expect}")
        if self.mask.dtype != np.bool_:
            self.mask = self.mask.astype(bool)

    def inputs(self, idx: GridIndex) -> list[int]:
        """Surviving mode ids at a grid index, ascending."""
        row = self.mask[idx.q, idx.i_phi, idx.i_y, idx.i_x]
        return [int(u) + 1 for u in np.nonzero(row)[0]]


def safe_inputs(x_h: GridIndex, kernel: KernelSet, table: SafeInputTable) -> set[int]:
    """Mode ids safe at x_h, empty when x_h is outside the kernel."""
    if not kernel.spec.close_to(table.spec):
        raise ValueError("kernel and safe-input table use different grids")
    if not kernel.contains(x_h):
        return set()
    return set(table.inputs(x_h))


def fraction(kernel: KernelSet, K_h: KernelSet) -> float:
    """|kernel| / |K_h|, zero when the constraint set is empty."""
    if not kernel.spec.close_to(K_h.spec):
        raise ValueError("kernel and constraint set use different grids")
    denom = K_h.count()
    return kernel.count() / denom if denom else 0.0


def kernel_slice(kernel: KernelSet, phi: float, q: int) -> np.ndarray:
    """X-Y membership raster at the grid plane nearest to phi, for mode q."""
    spec = kernel.spec
    qi = _mode_axis_index(spec, q)
    step = 2.0 * spec.r
    n_phi = spec.shape[2]
    if spec.wrap[2]:
        i_phi = int(round(((phi % TWO_PI) - spec.lo[2]) / step)) % n_phi
    else:
        i_phi = int(np.clip(round((phi - spec.lo[2]) / step), 0, n_phi - 1))
    return kernel.bits[qi, i_phi].copy()


# ------------------------------------------------------------- path samples

# clearance fields keyed by geometry, shared across margins and obstacle
# layouts (centerline and obstacle parts are cached separately)
_SEGMENT_CACHE: dict = {}


def _spec_key(spec: GridSpec):
    return (spec.lo, spec.hi, spec.r, spec.n_modes, spec.wrap)


def _sample_displacements(mode, config: PPConfig):
    """Body-frame displacement at each sample instant of one segment."""
    n = config.n_samples
    return [displacement(mode, config.t_pp * k / (n - 1)) for k in range(n)]


def _plane_positions(spec: GridSpec, table: ModeTable, config: PPConfig, u: int, i_phi: int):
    """Sampled world positions for every cell of one heading plane, (n, ny, nx, 2)."""
    xs = spec.axis_coords(0)
    ys = spec.axis_coords(1)
    phi = spec.axis_coords(2)[i_phi]
    cp, sp = np.cos(phi), np.sin(phi)
    n = config.n_samples
    out = np.empty((n, ys.size, xs.size, 2))
    for k, (dx, dy, _) in enumerate(_sample_displacements(table.modes[u], config)):
        out[k, :, :, 0] = ((xs + cp * dx) - sp * dy)[None, :]
        out[k, :, :, 1] = ((ys + sp * dx) + cp * dy)[:, None]
    return out


def _map_planes(fn, n_u: int, n_phi: int, workers: int) -> None:
    tasks = [(u, i) for u in range(n_u) for i in range(n_phi)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda t: fn(*t), tasks))
    else:
        for t in tasks:
            fn(*t)


def _centerline_clearance(track: Track, table: ModeTable, spec: GridSpec,
                          config: PPConfig, workers: int) -> np.ndarray:
    """Max over segment samples of the distance to the centerline, per cell."""
    key = ("center", track.vertices.tobytes(), _spec_key(spec), table.modes,
           config.t_pp, config.n_samples)
    hit = _SEGMENT_CACHE.get(key)
    if hit is not None:
        return hit
    n_modes, n_phi, n_y, n_x = spec.grid_shape()
    out = np.empty((table.n, n_phi, n_y, n_x))

    def work(u, i_phi):
        pos = _plane_positions(spec, table, config, u, i_phi)
        d = track.distance_to_centerline(pos.reshape(-1, 2))
        out[u, i_phi] = d.reshape(pos.shape[:-1]).max(axis=0)

    _map_planes(work, table.n, n_phi, workers)
    _SEGMENT_CACHE[key] = out
    return out


def _obstacle_clearance(track: Track, table: ModeTable, spec: GridSpec,
                        config: PPConfig, workers: int) -> np.ndarray:
    """Min over segment samples and obstacles of the obstacle distance."""
    key = ("obstacles", tuple(p.tobytes() for p in track.obstacles),
           _spec_key(spec), table.modes, config.t_pp, config.n_samples)
    hit = _SEGMENT_CACHE.get(key)
    if hit is not None:
        return hit
    n_modes, n_phi, n_y, n_x = spec.grid_shape()
    out = np.empty((table.n, n_phi, n_y, n_x))

    def work(u, i_phi):
        pos = _plane_positions(spec, table, config, u, i_phi)
        flat = pos.reshape(-1, 2)
        d = np.full(flat.shape[0], np.inf)
        for poly in track.obstacles:
            np.minimum(d, track.distance_to_obstacle(flat, poly), out=d)
        out[u, i_phi] = d.reshape(pos.shape[:-1]).min(axis=0)

    _map_planes(work, table.n, n_phi, workers)
    _SEGMENT_CACHE[key] = out
    return out


def _path_feasible(track: Track | None, table: ModeTable, spec: GridSpec,
                   config: PPConfig, margin: float, workers: int) -> np.ndarray:
    """Whether every sample of the segment from each cell stays inside."""
    shape = (table.n,) + spec.grid_shape()[1:]
    if track is None:
        return np.ones(shape, dtype=bool)
    if margin >= track.half_width:
        return np.zeros(shape, dtype=bool)
    clear = _centerline_clearance(track, table, spec, config, workers)
    pf = clear <= track.half_width - margin
    if track.obstacles:
        pf &= _obstacle_clearance(track, table, spec, config, workers) > margin
    return pf


# --------------------------------------------------------- successor windows


class _Win(NamedTuple):
    planes: np.ndarray | None          # phi plane indices of the ball, wrapped
    y_lo: np.ndarray                   # per i_y: window bounds, index-safe
    y_hi: np.ndarray
    y_ok: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    x_ok: np.ndarray
    pbox: tuple[float, float]          # v_phi bounds validated by this window


class _PlaneGeom(NamedTuple):
    nom_x: np.ndarray                  # successor coordinate per cell, no disturbance
    nom_y: np.ndarray
    wins: list                         # one _Win per disturbance lattice point


def _axis_windows(spec: GridSpec, ax: int, targets: np.ndarray, radius: float):
    """Vectorized grid-point windows along one non-wrapping axis.

    Mirrors the scalar window arithmetic of the grid module exactly; an
    out-of-range target yields an empty window, which callers treat the same
    as the scalar None.
    """
    lo0 = spec.lo[ax]
    n = spec.shape[ax]
    step = 2.0 * spec.r
    tol = BOUNDARY_TOL / step
    i_min = np.ceil((targets - radius - lo0) / step - tol).astype(np.int64)
    i_max = np.floor((targets + radius - lo0) / step + tol).astype(np.int64)
    i_min = np.maximum(i_min, 0)
    i_max = np.minimum(i_max, n - 1)
    ok = i_min <= i_max
    return np.where(ok, i_min, 0), np.where(ok, i_max, 0), ok


def _plane_window(spec: GridSpec, coord: float, radius: float):
    """Phi ball planes plus the unwrapped offsets of the window extremes."""
    planes = _axis_window(spec, 2, coord, radius)
    if planes is None or planes.size == 0:
        return None, 0.0, 0.0
    lo2 = spec.lo[2]
    step = 2.0 * spec.r
    if spec.wrap[2]:
        if planes.size == spec.shape[2]:
            return planes, -np.pi, np.pi
        c = coord % TWO_PI
        tol = BOUNDARY_TOL / step
        i_min = int(np.ceil((c - radius - lo2) / step - tol))
        i_max = int(np.floor((c + radius - lo2) / step + tol))
    else:
        c = coord
        i_min, i_max = int(planes[0]), int(planes[-1])
    return planes, (lo2 + step * i_min) - c, (lo2 + step * i_max) - c


def _make_window(spec: GridSpec, nom_x, nom_y, nom_phi: float,
                 v=(0.0, 0.0, 0.0), radii=(np.inf, np.inf, np.inf)) -> _Win:
    r = spec.r
    planes, off_lo, off_hi = _plane_window(spec, nom_phi + v[2], r)
    x_lo, x_hi, x_ok = _axis_windows(spec, 0, nom_x + v[0], r)
    y_lo, y_hi, y_ok = _axis_windows(spec, 1, nom_y + v[1], r)
    pbox = (
        max(v[2] + off_lo - r, -radii[2]),
        min(v[2] + off_hi + r, radii[2]),
    )
    return _Win(planes, y_lo, y_hi, y_ok, x_lo, x_hi, x_ok, pbox)


def _successor_coords(spec: GridSpec, table: ModeTable, t_pp: float, u: int, i_phi: int):
    """Nominal successor coordinates of every cell on one heading plane."""
    xs = spec.axis_coords(0)
    ys = spec.axis_coords(1)
    phi = spec.axis_coords(2)[i_phi]
    dx, dy, dphi = displacement(table.modes[u], t_pp)
    cp, sp = np.cos(phi), np.sin(phi)
    nom_x = (xs + cp * dx) - sp * dy
    nom_y = (ys + sp * dx) + cp * dy
    nom_phi = float((phi + dphi) % TWO_PI)
    return nom_x, nom_y, nom_phi


def _build_geometry(spec: GridSpec, table: ModeTable, t_pp: float,
                    dg: DisturbanceGrid | None) -> list:
    """Per (mode, heading plane): successor windows, nominal or per lattice point."""
    n_phi = spec.shape[2]
    vs = dg.points if dg is not None else np.zeros((1, 3))
    radii = dg.radii if dg is not None else (np.inf, np.inf, np.inf)
    geom = []
    for u in range(table.n):
        per_phi = []
        for i_phi in range(n_phi):
            nom_x, nom_y, nom_phi = _successor_coords(spec, table, t_pp, u, i_phi)
            wins = [
                _make_window(spec, nom_x, nom_y, nom_phi, tuple(v), radii)
                for v in vs
            ]
            per_phi.append(_PlaneGeom(nom_x, nom_y, wins))
        geom.append(per_phi)
    return geom


def _gather(acc: np.ndarray, w: _Win, reduce_any: bool) -> np.ndarray:
    """Windowed OR/AND of a (ny, nx) plane under the (y, x) ball windows."""
    if reduce_any:
        out = acc[w.y_lo] | acc[w.y_hi]
        out &= w.y_ok[:, None]
        out = out[:, w.x_lo] | out[:, w.x_hi]
    else:
        out = acc[w.y_lo] & acc[w.y_hi]
        out &= w.y_ok[:, None]
        out = out[:, w.x_lo] & out[:, w.x_hi]
    out &= w.x_ok[None, :]
    return out


def _ball_plane(bits_u: np.ndarray, w: _Win, reduce_any: bool) -> np.ndarray:
    """Per cell of one heading plane: ball of the shifted successor vs a set.

    reduce_any selects intersection semantics (viability) over containment
    semantics (discriminating); empty balls fail either way.
    """
    if w.planes is None:
        return np.zeros(bits_u.shape[1:], dtype=bool)
    if reduce_any:
        acc = np.logical_or.reduce(bits_u[w.planes], axis=0)
    else:
        acc = np.logical_and.reduce(bits_u[w.planes], axis=0)
    return _gather(acc, w, reduce_any)


def _check_tables(spec: GridSpec, table: ModeTable, automaton: TransitionAutomaton):
    if table.n != spec.n_modes:
        raise ValueError("mode table size does not match grid spec")
    if automaton.allowed.shape[0] != table.n:
        raise ValueError("automaton size does not match mode table")


def _successor_sets(table: ModeTable, automaton: TransitionAutomaton) -> list:
    return [
        [u - 1 for u in automaton.successors(q)] for q in range(1, table.n + 1)
    ]


# ------------------------------------------------------------------ kernels


def viability_kernel(K_h: KernelSet, table: ModeTable, automaton: TransitionAutomaton,
                     track: Track | None, config: PPConfig, *,
                     margin: float = KERNEL_MARGIN, workers: int = 1,
                     trace: list | None = None) -> tuple[KernelSet, SafeInputTable]:
    """Largest subset of K_h from which some admissible mode always stays viable.

    A grid point survives one sweep when an admissible mode exists whose
    sampled segment stays inside the track at `margin` and whose successor
    r-ball meets the previous iterate. Sweeps are synchronous and run until
    the set stops changing; `trace` (when given) collects the surviving count
    after each sweep that changed the set. Returns the kernel and the table
    of surviving inputs per point.
    """
    spec = K_h.spec
    _check_tables(spec, table, automaton)
    workers = max(1, int(workers))
    n_u = table.n
    n_modes, n_phi, n_y, n_x = spec.grid_shape()
    pf = _path_feasible(track, table, spec, config, margin, workers)
    geom = _build_geometry(spec, table, config.t_pp, None)
    succ = _successor_sets(table, automaton)

    bits = K_h.bits.copy()
    new_bits = np.empty_like(bits)
    mask = np.zeros(spec.grid_shape() + (n_u,), dtype=bool)

    def sweep_plane(i_phi: int) -> None:
        S = np.empty((n_u, n_y, n_x), dtype=bool)
        for u in range(n_u):
            S[u] = _ball_plane(bits[u], geom[u][i_phi].wins[0], True)
            S[u] &= pf[u, i_phi]
        for q0 in range(n_modes):
            row = bits[q0, i_phi]
            reach = np.zeros((n_y, n_x), dtype=bool)
            for u in succ[q0]:
                ok = row & S[u]
                mask[q0, i_phi, :, :, u] = ok
                reach |= ok
            new_bits[q0, i_phi] = reach

    while True:
        mask.fill(False)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(sweep_plane, range(n_phi)))
        else:
            for i_phi in range(n_phi):
                sweep_plane(i_phi)
        if np.array_equal(new_bits, bits):
            break
        bits, new_bits = new_bits, bits
        np.copyto(new_bits, bits)
        if trace is not None:
            trace.append(int(bits.sum()))
    return KernelSet(spec, bits), SafeInputTable(spec, mask)


def _vbox(geom_u: _PlaneGeom, w: _Win, i_y: int, i_x: int, xs, ys,
          r: float, radii) -> VBox:
    """Continuous disturbances whose successor ball stays inside the window
    validated at one lattice point (the window extremes widened by r, then
    clamped to the disturbance box)."""
    bx = (
        max((xs[w.x_lo[i_x]] - geom_u.nom_x[i_x]) - r, -radii[0]),
        min((xs[w.x_hi[i_x]] - geom_u.nom_x[i_x]) + r, radii[0]),
    )
    by = (
        max((ys[w.y_lo[i_y]] - geom_u.nom_y[i_y]) - r, -radii[1]),
        min((ys[w.y_hi[i_y]] - geom_u.nom_y[i_y]) + r, radii[1]),
    )
    return VBox((bx[0], by[0], w.pbox[0]), (bx[1], by[1], w.pbox[1]))


def _boxes_cover(boxes: list, dg: DisturbanceGrid) -> bool:
    """Whether per-lattice-point boxes jointly cover the disturbance box.

    Deterministic conservative check: every lattice point carries a box,
    boxes of lattice-adjacent points overlap or touch componentwise, and
    boundary boxes reach the faces of the disturbance box.
    """
    m0, m1, m2 = dg.shape
    R = dg.radii
    tol = BOUNDARY_TOL

    def at(i0, i1, i2):
        return boxes[(i0 * m1 + i1) * m2 + i2]

    for i0 in range(m0):
        for i1 in range(m1):
            for i2 in range(m2):
                b = at(i0, i1, i2)
                idx = (i0, i1, i2)
                dims = (m0, m1, m2)
                for j in range(3):
                    if idx[j] == 0 and b.lower[j] > -R[j] + tol:
                        return False
                    if idx[j] == dims[j] - 1 and b.upper[j] < R[j] - tol:
                        return False
                for nb in (
                    at(i0 + 1, i1, i2) if i0 + 1 < m0 else None,
                    at(i0, i1 + 1, i2) if i1 + 1 < m1 else None,
                    at(i0, i1, i2 + 1) if i2 + 1 < m2 else None,
                ):
                    if nb is None:
                        continue
                    for j in range(3):
                        if b.lower[j] > nb.upper[j] + tol or nb.lower[j] > b.upper[j] + tol:
                            return False
    return True


def disc_kernel_modified(K_h: KernelSet, table: ModeTable, automaton: TransitionAutomaton,
                         track: Track | None, config: PPConfig, *,
                         margin: float = KERNEL_MARGIN,
                         union_rule: str = "max-volume",
                         disturbance: DisturbanceGrid | None = None,
                         workers: int = 1,
                         trace: list | None = None) -> tuple[KernelSet, SafeInputTable]:
    """Discriminating kernel robust to the space discretization.

    Per sweep and grid point: every (mode, lattice disturbance) pair whose
    perturbed successor ball lies entirely inside the previous iterate and
    whose sampled segment is feasible contributes a box of continuous
    disturbances; per lattice point the boxes are aggregated across modes by
    `union_rule` ("max-volume" keeps the largest box, "intersection" keeps
    the common box), and the point survives only when the aggregated boxes
    jointly cover the disturbance set. If a single mode survives every
    lattice disturbance, coverage holds outright and the box machinery is
    skipped. The default disturbance lattice spans the largest per-mode
    Lipschitz ball, L_max * r per axis.
    """
    spec = K_h.spec
    _check_tables(spec, table, automaton)
    if union_rule not in UNION_RULES:
        raise ValueError(f"union_rule must be one of {UNION_RULES}")
    workers = max(1, int(workers))
    n_u = table.n
    n_modes, n_phi, n_y, n_x = spec.grid_shape()
    if disturbance is None:
        disturbance = DisturbanceGrid.for_mode(
            max(m.L_q for m in table.modes), spec.r
        )
    dg = disturbance
    n_v = dg.n_points
    dims = tuple(j for j in range(3) if dg.radii[j] > 0.0)
    pf = _path_feasible(track, table, spec, config, margin, workers)
    geom = _build_geometry(spec, table, config.t_pp, dg)
    succ = _successor_sets(table, automaton)
    xs = spec.axis_coords(0)
    ys = spec.axis_coords(1)
    r = spec.r

    bits = K_h.bits.copy()
    new_bits = np.empty_like(bits)
    mask = np.zeros(spec.grid_shape() + (n_u,), dtype=bool)
    max_vol = union_rule == "max-volume"

    def cover_point(q0: int, i_phi: int, i_y: int, i_x: int, all_ok) -> tuple:
        boxes = []
        owners_all: set[int] = set()
        for v_idx in range(n_v):
            agg = None
            owners: list[int] = []
            for u in succ[q0]:
                if not all_ok[u, v_idx, i_y, i_x]:
                    continue
                box = _vbox(geom[u][i_phi], geom[u][i_phi].wins[v_idx],
                            i_y, i_x, xs, ys, r, dg.radii)
                if max_vol:
                    if agg is None or box.volume(dims) > agg.volume(dims):
                        agg, owners = box, [u]
                else:
                    agg = box if agg is None else agg.intersect(box)
                    owners.append(u)
            if agg is None or any(
                agg.lower[j] > agg.upper[j] for j in range(3)
            ):
                return False, ()
            boxes.append(agg)
            owners_all.update(owners)
        if not _boxes_cover(boxes, dg):
            return False, ()
        return True, tuple(sorted(owners_all))

    def sweep_plane(i_phi: int) -> None:
        all_ok = np.empty((n_u, n_v, n_y, n_x), dtype=bool)
        for u in range(n_u):
            pf_pl = pf[u, i_phi]
            if not pf_pl.any():
                all_ok[u] = False
                continue
            for v_idx in range(n_v):
                plane = _ball_plane(bits[u], geom[u][i_phi].wins[v_idx], False)
                plane &= pf_pl
                all_ok[u, v_idx] = plane
        robust = all_ok.all(axis=1)  # (n_u, ny, nx)
        for q0 in range(n_modes):
            row = bits[q0, i_phi]
            if not row.any():
                new_bits[q0, i_phi] = False
                continue
            su = succ[q0]
            fast = np.zeros((n_y, n_x), dtype=bool)
            for u in su:
                ok = row & robust[u]
                mask[q0, i_phi, :, :, u] = ok
                fast |= ok
            keep = fast.copy()
            # the union of per-mode boxes can still cover the disturbance
            # set where no single mode is robust; only points where every
            # lattice disturbance keeps some mode alive are candidates
            candidates = row & ~fast
            if candidates.any():
                necessary = np.ones((n_y, n_x), dtype=bool)
                for v_idx in range(n_v):
                    any_u = np.zeros((n_y, n_x), dtype=bool)
                    for u in su:
                        any_u |= all_ok[u, v_idx]
                    necessary &= any_u
                candidates &= necessary
                for i_y, i_x in zip(*np.nonzero(candidates)):
                    kept, owners = cover_point(q0, i_phi, int(i_y), int(i_x), all_ok)
                    if kept:
                        keep[i_y, i_x] = True
                        for u in owners:
                            mask[q0, i_phi, i_y, i_x, u] = True
            new_bits[q0, i_phi] = keep

    while True:
        mask.fill(False)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(sweep_plane, range(n_phi)))
        else:
            for i_phi in range(n_phi):
                sweep_plane(i_phi)
        if np.array_equal(new_bits, bits):
            break
        bits, new_bits = new_bits, bits
        np.copyto(new_bits, bits)
        if trace is not None:
            trace.append(int(bits.sum()))
    return KernelSet(spec, bits), SafeInputTable(spec, mask)
