"""Receding-horizon planner over mode sequences.

plan_kernel enumerates depth-first, restricting inputs to the stored safe
masks of the cells containing the continuous state and keeping a child only
if its whole covering ball of grid points lies in the kernel. plan_naive is
the kernel-free baseline that instead samples every segment against the
track. Both maximize centerline progress over the horizon and break ties
toward the lexicographically smallest mode sequence. recover implements the
nearest-viable-neighbor heuristic used when planning fails.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO

from .grid import GridIndex, KernelSet, ball_indices, center, snap
from .kernel import SafeInputTable
from .ppmodel import PPState, sample_path, step
from .track import Track
from .vehicle import ModeTable, TransitionAutomaton

__all__ = ["Plan", "plan_kernel", "plan_naive", "recover", "write_plan_csv"]


@dataclass(frozen=True)
class Plan:
    """Mode sequence, the states it visits, and search bookkeeping.

    progress is the absolute centerline arclength of the final position;
    candidates are compared by the shortest signed circular difference from
    the start, so plans crossing the start line rank correctly. node_count
    is the number of successor evaluations the search performed.
    """

    modes: tuple[int, ...]
    states: tuple[PPState, ...]
    progress: float
    node_count: int

    def __post_init__(self):
        if len(self.states) != len(self.modes) + 1:
            raise ValueError("plan needs one more state than modes")


def _signed_gain(track: Track, p: float, p0: float) -> float:
    """Circular progress difference p - p0 in (-L/2, L/2]."""
    total = track.total_length
    d = (p - p0) % total
    return d if d <= total / 2.0 else d - total


def plan_kernel(
    x: PPState,
    table: ModeTable,
    kernel: KernelSet,
    safe: SafeInputTable,
    track: Track,
    *,
    n_s: int,
    t_pp: float,
) -> Plan | None:
    """Best kernel-constrained plan from x, or None when none exists."""
    spec = kernel.spec
    if not spec.close_to(safe.spec):
        raise ValueError("kernel and safe-input table disagree on the grid")
    if n_s < 0:
        raise ValueError("n_s must be nonnegative")
    p0 = float(track.progress((x.X, x.Y)))
    bits = kernel.bits
    nodes = 0
    best: tuple[float, Plan] | None = None

    def inputs_at(state: PPState) -> list[int]:
        cells = snap((state.X, state.Y, state.phi, state.q), spec)
        if not cells:
            return []
        mask = safe.mask
        us: set[int] = set()
        for c in cells:
            row = mask[c.q, c.i_phi, c.i_y, c.i_x]
            us.update(int(u) + 1 for u in row.nonzero()[0])
        return sorted(us)

    def walk(state: PPState, modes: list[int], states: list[PPState]):
        nonlocal nodes, best
        if len(modes) == n_s:
            p = float(track.progress((state.X, state.Y)))
            gain = _signed_gain(track, p, p0)
            if best is None or gain > best[0]:
                best = (gain, Plan(tuple(modes), tuple(states), p, 0))
            return
        for u in inputs_at(state):
            nodes += 1
            child = step(state, u, t_pp, table)
            ball = ball_indices((child.X, child.Y, child.phi, child.q), spec.r, spec)
            if not ball:
                continue
            if not all(bits[b.q, b.i_phi, b.i_y, b.i_x] for b in ball):
                continue
            modes.append(u)
            states.append(child)
            walk(child, modes, states)
            modes.pop()
            states.pop()

    walk(x, [], [x])
    if best is None:
        return None
    return Plan(best[1].modes, best[1].states, best[1].progress, nodes)


def plan_naive(
    x: PPState,
    table: ModeTable,
    automaton: TransitionAutomaton,
    track: Track,
    *,
    n_s: int,
    t_pp: float,
    n_samples: int,
    margin: float = 0.0,
) -> Plan | None:
    """Full enumeration; sequences violating sampled track membership are
    discarded a posteriori, so node_count covers the whole tree."""
    if n_s < 0:
        raise ValueError("n_s must be nonnegative")
    if not track.inside((x.X, x.Y), margin):
        return None
    p0 = float(track.progress((x.X, x.Y)))
    nodes = 0
    best: tuple[float, Plan] | None = None

    def walk(state: PPState, feasible: bool,
             modes: list[int], states: list[PPState]):
        nonlocal nodes, best
        if len(modes) == n_s:
            if not feasible:
                return
            p = float(track.progress((state.X, state.Y)))
            gain = _signed_gain(track, p, p0)
            if best is None or gain > best[0]:
                best = (gain, Plan(tuple(modes), tuple(states), p, 0))
            return
        for u in automaton.successors(state.q):
            nodes += 1
            ok = feasible
            if ok:
                pts = sample_path(state, u, t_pp, n_samples, table)
                ok = bool(track.inside(pts, margin).all())
            child = step(state, u, t_pp, table)
            modes.append(u)
            states.append(child)
            walk(child, ok, modes, states)
            modes.pop()
            states.pop()

    walk(x, True, [], [x])
    if best is None:
        return None
    return Plan(best[1].modes, best[1].states, best[1].progress, nodes)


def recover(x: PPState, kernel: KernelSet) -> PPState | None:
    """Surrogate planning state in the nearest viable cell around x.

    If any cell containing x is in the kernel, x itself is returned. Else
    the one-cell ring around the containing cells is scanned; the center of
    the viable cell nearest to x in the infinity norm wins, ties resolving
    in (i_phi, i_y, i_x) order. None signals an emergency stop.
    """
    spec = kernel.spec
    cells = snap((x.X, x.Y, x.phi, x.q), spec)
    if not cells:
        return None
    bits = kernel.bits
    for c in cells:
        if bits[c.q, c.i_phi, c.i_y, c.i_x]:
            return x
    n_x, n_y, n_phi = spec.shape
    ring: set[GridIndex] = set()
    for c in cells:
        for dp in (-1, 0, 1):
            ip = c.i_phi + dp
            if spec.wrap[2]:
                ip %= n_phi
            elif not 0 <= ip < n_phi:
                continue
            for dy in (-1, 0, 1):
                iy = c.i_y + dy
                if not 0 <= iy < n_y:
                    continue
                for dx in (-1, 0, 1):
                    ix = c.i_x + dx
                    if not 0 <= ix < n_x:
                        continue
                    ring.add(GridIndex(ix, iy, ip, c.q))
    best: tuple[float, tuple[int, int, int], PPState] | None = None
    for idx in sorted(ring, key=lambda i: (i.i_phi, i.i_y, i.i_x)):
        if not bits[idx.q, idx.i_phi, idx.i_y, idx.i_x]:
            continue
        c = center(idx, spec)
        dphi = abs(x.phi - c[2])
        if spec.wrap[2]:
            span = 2.0 * spec.r * n_phi
            dphi = dphi % span
            dphi = min(dphi, span - dphi)
        d = max(abs(x.X - c[0]), abs(x.Y - c[1]), dphi)
        if best is None or d < best[0]:
            best = (d, (idx.i_phi, idx.i_y, idx.i_x),
                    PPState(float(c[0]), float(c[1]), float(c[2]), x.q))
    return best[2] if best is not None else None


def write_plan_csv(plan: Plan, track: Track, fp: IO[str]) -> None:
    """Dump a plan as rows of segment index, mode, pose, and progress."""
    w = csv.writer(fp)
    w.writerow(["segment", "mode", "x", "y", "phi", "progress"])
    for k, s in enumerate(plan.states):
        mode = plan.modes[k - 1] if k > 0 else ""
        w.writerow([k, mode, repr(s.X), repr(s.Y), repr(s.phi),
                    repr(float(track.progress((s.X, s.Y))))])
