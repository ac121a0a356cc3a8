"""Closed-track geometry: inside tests, centerline progress, constraint grids.

A track is a closed centerline polyline with a constant half width and an
optional set of convex polygonal obstacles. Progress along the track is the
arclength of the orthogonal projection onto the nearest affine piece of the
centerline, so plan objectives and lap counting share one measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grid import GridSpec, KernelSet

__all__ = [
    "Track",
    "ProgressIndex",
    "build_K",
    "resample",
    "s_curve_track",
    "rectangle_ring_track",
    "KERNEL_MARGIN",
    "VIOLATION_MARGIN",
]

# default margins: a generous one for kernel computation, a tight one for
# counting violations in closed loop
KERNEL_MARGIN = 0.015
VIOLATION_MARGIN = 0.005

_CHUNK = 1 << 12

# below this many pieces a full scan beats the index
_PROX_MIN_PIECES = 64

_UNBUILT = object()


def _as_polygon(poly) -> np.ndarray:
    """Validate one convex polygon, returned CCW without a repeated vertex."""
    v = np.asarray(poly, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2:
        raise ValueError("obstacle polygon must be an (N, 2) array")
    if v.shape[0] > 1 and np.allclose(v[0], v[-1]):
        v = v[:-1]
    if v.shape[0] < 3:
        raise ValueError("obstacle polygon needs at least 3 distinct vertices")
    e = np.roll(v, -1, axis=0) - v
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if np.all(cross < 0):
        v = v[::-1].copy()
        cross = -cross[::-1]
    if np.any(cross <= 0):
        raise ValueError("obstacle polygon must be strictly convex")
    return v


@dataclass(frozen=True, eq=False)
class ProgressIndex:
    """Affine pieces of the closed centerline with cumulative arclength."""

    starts: np.ndarray   # (S, 2)
    vecs: np.ndarray     # (S, 2) piece vectors
    lens: np.ndarray     # (S,)
    cum: np.ndarray      # (S + 1,) cumulative arclength, cum[-1] = total

    @property
    def n_pieces(self) -> int:
        return self.starts.shape[0]

    @property
    def total_length(self) -> float:
        return float(self.cum[-1])


@dataclass(frozen=True)
class _ProximityGrid:
    """Bucketed candidate pieces for pruned nearest-centerline queries.

    ``cand[b]`` lists, ascending, every piece within ``min_c d(c, piece) +
    2h`` of bucket b's center c (h = half diagonal). By the triangle
    inequality any piece farther than that is strictly farther than the best
    candidate from every point of the bucket, so the argmin and its ties are
    always inside the list. Rows are padded by repeating their last entry.
    """

    origin: tuple[float, float]
    cell: float
    nb: tuple[int, int]
    cand: np.ndarray

    def locate(self, q: np.ndarray) -> np.ndarray:
        """Bucket id per point, -1 outside the covered box."""
        bx = np.floor((q[:, 0] - self.origin[0]) / self.cell).astype(np.int64)
        by = np.floor((q[:, 1] - self.origin[1]) / self.cell).astype(np.int64)
        nbx, nby = self.nb
        ok = (bx >= 0) & (bx < nbx) & (by >= 0) & (by < nby)
        return np.where(ok, by * nbx + bx, -1)


def _build_proximity(track: "Track") -> _ProximityGrid | None:
    idx = track.index
    if idx.n_pieces < _PROX_MIN_PIECES:
        return None
    (x0, x1), (y0, y1) = track.bounds()
    pad = track.half_width + 1.0
    cell = track.half_width / 4.0
    x0, y0 = x0 - pad, y0 - pad
    nbx = int(np.ceil((x1 + pad - x0) / cell))
    nby = int(np.ceil((y1 + pad - y0) / cell))
    gx, gy = np.meshgrid(np.arange(nbx), np.arange(nby))
    centers = np.column_stack([
        x0 + (gx.ravel() + 0.5) * cell,
        y0 + (gy.ravel() + 0.5) * cell,
    ])
    d = np.empty((centers.shape[0], idx.n_pieces))
    for lo in range(0, centers.shape[0], _CHUNK):
        c = centers[lo:lo + _CHUNK]
        rel = c[:, None, :] - idx.starts[None, :, :]
        t = np.einsum("psk,sk->ps", rel, idx.vecs) / (idx.lens**2)
        np.clip(t, 0.0, 1.0, out=t)
        dx = rel[:, :, 0] - t * idx.vecs[None, :, 0]
        dy = rel[:, :, 1] - t * idx.vecs[None, :, 1]
        d[lo:lo + _CHUNK] = np.sqrt(dx * dx + dy * dy)
    # 1e-9 slack absorbs rounding in d itself; the superset only grows
    keep = d <= d.min(axis=1, keepdims=True) + np.sqrt(2.0) * cell + 1e-9
    counts = keep.sum(axis=1)
    width = int(counts.max())
    order = np.argsort(~keep, axis=1, kind="stable")
    cand = order[:, :width].astype(np.int32)
    rows = np.arange(cand.shape[0])
    tail = cand[rows, counts - 1]
    cols = np.arange(width)
    cand = np.where(cols[None, :] < counts[:, None], cand, tail[:, None])
    return _ProximityGrid(origin=(x0, y0), cell=cell, nb=(nbx, nby), cand=cand)


@dataclass(frozen=True, eq=False)
class Track:
    """Closed centerline with half width and convex obstacles.

    The polyline closes implicitly: the last vertex connects back to the
    first (an input repeating the first vertex at the end is accepted and
    deduplicated).
    """

    vertices: np.ndarray
    half_width: float
    obstacles: tuple[np.ndarray, ...] = ()

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("vertices must be an (N, 2) array")
        if v.shape[0] > 1 and np.allclose(v[0], v[-1]):
            v = v[:-1]
        if v.shape[0] < 3:
            raise ValueError("a closed track needs at least 3 vertices")
        if self.half_width <= 0.0:
            raise ValueError("half_width must be positive")
        vecs = np.roll(v, -1, axis=0) - v
        lens = np.hypot(vecs[:, 0], vecs[:, 1])
        if np.any(lens < 1e-12):
            raise ValueError("degenerate centerline segment")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(
            self, "obstacles", tuple(_as_polygon(o) for o in self.obstacles)
        )
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        object.__setattr__(
            self, "index", ProgressIndex(starts=v, vecs=vecs, lens=lens, cum=cum)
        )
        object.__setattr__(self, "_prox_cache", _UNBUILT)

    index: ProgressIndex = field(init=False, repr=False)
    _prox_cache: object = field(init=False, repr=False)

    @property
    def total_length(self) -> float:
        return self.index.total_length

    def bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Outer bounding box (x_range, y_range) including the half width."""
        v = self.vertices
        hw = self.half_width
        return (
            (float(v[:, 0].min() - hw), float(v[:, 0].max() + hw)),
            (float(v[:, 1].min() - hw), float(v[:, 1].max() + hw)),
        )

    # ------------------------------------------------------------- queries

    def _proximity(self) -> _ProximityGrid | None:
        # built on first use; racing builders write equivalent objects
        prox = self._prox_cache
        if prox is _UNBUILT:
            prox = _build_proximity(self)
            object.__setattr__(self, "_prox_cache", prox)
        return prox

    def _scan_all(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest piece by full scan: distance and unwrapped arclength."""
        idx = self.index
        rel = q[:, None, :] - idx.starts[None, :, :]
        t = np.einsum("psk,sk->ps", rel, idx.vecs) / (idx.lens**2)
        np.clip(t, 0.0, 1.0, out=t)
        dx = rel[:, :, 0] - t * idx.vecs[None, :, 0]
        dy = rel[:, :, 1] - t * idx.vecs[None, :, 1]
        d2 = dx * dx + dy * dy
        best = np.argmin(d2, axis=1)
        rows = np.arange(q.shape[0])
        return np.sqrt(d2[rows, best]), idx.cum[best] + t[rows, best] * idx.lens[best]

    def _scan_cand(self, q: np.ndarray, cand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Same arithmetic as _scan_all restricted to per-point candidates.

        cand rows ascend and contain the true argmin with all its ties, so
        the first occurrence of the minimum picks the same piece.
        """
        idx = self.index
        starts = idx.starts[cand]
        vecs = idx.vecs[cand]
        lens = idx.lens[cand]
        rel = q[:, None, :] - starts
        t = np.einsum("pck,pck->pc", rel, vecs) / (lens**2)
        np.clip(t, 0.0, 1.0, out=t)
        dx = rel[:, :, 0] - t * vecs[:, :, 0]
        dy = rel[:, :, 1] - t * vecs[:, :, 1]
        d2 = dx * dx + dy * dy
        j = np.argmin(d2, axis=1)
        rows = np.arange(q.shape[0])
        best = cand[rows, j]
        return np.sqrt(d2[rows, j]), idx.cum[best] + t[rows, j] * idx.lens[best]

    def _nearest(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Min distance to the centerline and arclength of the projection.

        p has shape (..., 2); both returns have shape (...). Ties between
        pieces resolve to the lowest piece index, which breaks the
        start/finish ambiguity toward progress 0. Dense tracks answer from
        the bucketed candidate index; results are identical to a full scan.
        """
        flat = p.reshape(-1, 2)
        dist = np.empty(flat.shape[0])
        s = np.empty(flat.shape[0])
        prox = self._proximity()
        for lo in range(0, flat.shape[0], _CHUNK):
            q = flat[lo:lo + _CHUNK]
            sub_d = dist[lo:lo + _CHUNK]
            sub_s = s[lo:lo + _CHUNK]
            if prox is None:
                sub_d[:], sub_s[:] = self._scan_all(q)
                continue
            bid = prox.locate(q)
            inb = bid >= 0
            if inb.all():
                sub_d[:], sub_s[:] = self._scan_cand(q, prox.cand[bid])
            else:
                sub_d[inb], sub_s[inb] = self._scan_cand(q[inb], prox.cand[bid[inb]])
                out = ~inb
                sub_d[out], sub_s[out] = self._scan_all(q[out])
        total = self.total_length
        return dist.reshape(p.shape[:-1]), (s % total).reshape(p.shape[:-1])

    def distance_to_centerline(self, p) -> np.ndarray | float:
        p = np.asarray(p, dtype=float)
        d, _ = self._nearest(p)
        return float(d) if d.ndim == 0 else d

    def progress(self, p) -> np.ndarray | float:
        """Arclength in [0, total_length) of the projection of p."""
        p = np.asarray(p, dtype=float)
        _, s = self._nearest(p)
        return float(s) if s.ndim == 0 else s

    def distance_to_obstacle(self, p, poly: np.ndarray) -> np.ndarray:
        """Distance to a convex polygon; zero inside or on the boundary."""
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, 2)
        starts = poly
        vecs = np.roll(poly, -1, axis=0) - poly
        lens2 = np.einsum("sk,sk->s", vecs, vecs)
        rel = flat[:, None, :] - starts[None, :, :]
        t = np.clip(np.einsum("psk,sk->ps", rel, vecs) / lens2, 0.0, 1.0)
        dx = rel[:, :, 0] - t * vecs[None, :, 0]
        dy = rel[:, :, 1] - t * vecs[None, :, 1]
        d = np.sqrt((dx * dx + dy * dy).min(axis=1))
        # CCW polygon: inside iff left of every edge
        cross = vecs[None, :, 0] * rel[:, :, 1] - vecs[None, :, 1] * rel[:, :, 0]
        d[np.all(cross >= 0.0, axis=1)] = 0.0
        return d.reshape(p.shape[:-1])

    def inside(self, p, margin: float = 0.0):
        """Whether p keeps `margin` clearance from walls and obstacles.

        True iff the distance to the centerline is at most
        half_width - margin and p clears every obstacle inflated by margin
        (strictly). A margin of half_width or more leaves no interior.
        """
        p = np.asarray(p, dtype=float)
        if margin >= self.half_width:
            out = np.zeros(p.shape[:-1], dtype=bool)
            return bool(out) if out.ndim == 0 else out
        d, _ = self._nearest(p)
        ok = d <= self.half_width - margin
        for poly in self.obstacles:
            ok &= self.distance_to_obstacle(p, poly) > margin
        return bool(ok) if ok.ndim == 0 else ok

    def with_obstacles(self, obstacles: Iterable) -> "Track":
        """Same geometry with a replaced obstacle list."""
        return Track(
            vertices=self.vertices,
            half_width=self.half_width,
            obstacles=tuple(obstacles),
        )


def resample(track: Track, n_pieces: int) -> Track:
    """New track whose vertices sit at n_pieces regular arclength stations."""
    if n_pieces < 3:
        raise ValueError("n_pieces must be at least 3")
    idx = track.index
    targets = np.arange(n_pieces) * (track.total_length / n_pieces)
    seg = np.searchsorted(idx.cum, targets, side="right") - 1
    seg = np.clip(seg, 0, idx.n_pieces - 1)
    frac = (targets - idx.cum[seg]) / idx.lens[seg]
    verts = idx.starts[seg] + frac[:, None] * idx.vecs[seg]
    return Track(vertices=verts, half_width=track.half_width, obstacles=track.obstacles)


def build_K(spec: GridSpec, track: Track, margin: float, modes=None) -> KernelSet:
    """Gridded constraint set: position inside the track, heading and mode free.

    Raises when the grid's covered box does not contain the track's outer
    bounding box. `modes` (a ModeTable) is optional and only cross-checked
    against spec.n_modes.
    """
    if modes is not None and getattr(modes, "n", spec.n_modes) != spec.n_modes:
        raise ValueError("mode table size does not match grid spec")
    (x0, x1), (y0, y1) = track.bounds()
    r = spec.r
    if (x0 < spec.lo[0] - r or x1 > spec.hi[0] + r
            or y0 < spec.lo[1] - r or y1 > spec.hi[1] + r):
        raise ValueError("grid box does not cover the track bounding box")
    xs = spec.axis_coords(0)
    ys = spec.axis_coords(1)
    XX, YY = np.meshgrid(xs, ys, indexing="xy")  # (ny, nx)
    pts = np.stack([XX, YY], axis=-1)
    mask = track.inside(pts, margin)
    n_modes, n_phi, n_y, n_x = spec.grid_shape()
    bits = np.broadcast_to(mask, (n_modes, n_phi, n_y, n_x)).copy()
    return KernelSet(spec=spec, bits=bits)


# ---------------------------------------------------------------- builders


def _arc(c, r, a0, a1, n):
    th = np.linspace(a0, a1, n, endpoint=False)
    return np.stack([c[0] + r * np.cos(th), c[1] + r * np.sin(th)], axis=1)


def _straight(a, b, n):
    t = np.linspace(0.0, 1.0, n, endpoint=False)
    return np.asarray(a) + t[:, None] * (np.asarray(b) - np.asarray(a))


def s_curve_track(n_pieces: int = 488, half_width: float = 0.6,
                  obstacles: Sequence = ()) -> Track:
    """The default closed circuit: two straights, an S of two short hairpins,
    and a wide return bend. Fits in roughly 11.5 x 7 m."""
    fine: list[np.ndarray] = []
    per = 0.005  # fine sampling step, m

    def n_for(length):
        return max(8, int(round(length / per)))

    fine.append(_straight((1.6, 0.0), (7.4, 0.0), n_for(5.8)))
    fine.append(_arc((7.4, 1.3), 1.3, -np.pi / 2, np.pi / 2, n_for(1.3 * np.pi)))
    fine.append(_straight((7.4, 2.6), (4.6, 2.6), n_for(2.8)))
    fine.append(_arc((4.6, 3.55), 0.95, -np.pi / 2, -3 * np.pi / 2, n_for(0.95 * np.pi)))
    fine.append(_straight((4.6, 4.5), (7.4, 4.5), n_for(2.8)))
    fine.append(_arc((7.4, 5.45), 0.95, -np.pi / 2, np.pi / 2, n_for(0.95 * np.pi)))
    fine.append(_straight((7.4, 6.4), (1.6, 6.4), n_for(5.8)))
    fine.append(_arc((1.6, 3.2), 3.2, np.pi / 2, 3 * np.pi / 2, n_for(3.2 * np.pi)))
    verts = np.concatenate(fine, axis=0)
    base = Track(vertices=verts, half_width=half_width)
    out = resample(base, n_pieces)
    return out.with_obstacles(obstacles) if obstacles else out


def rectangle_ring_track(width: float = 6.0, height: float = 4.0,
                         half_width: float = 0.5, n_pieces: int = 80) -> Track:
    """Small rectangular ring, handy for oracles and toys."""
    verts = np.array([
        [0.0, 0.0], [width, 0.0], [width, height], [0.0, height],
    ])
    return resample(Track(vertices=verts, half_width=half_width), n_pieces)
