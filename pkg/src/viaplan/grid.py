"""Hyper-rectangular state grid for (X, Y, phi, q) with overlapping cells.

The three continuous axes are uniformly spaced with spacing exactly ``2 * r``,
so that every point of the covered box lies within infinity-distance ``r`` of
at least one grid point. The *cell* of a grid point is the closed
infinity-norm ball of radius ``r`` around it; cells of adjacent points share
their boundary, which is why point-to-index queries are set valued. The
heading axis covers ``[0, 2*pi)`` and wraps (index arithmetic modulo the
point count), which requires ``r = pi / n_phi``. The mode axis ``q`` is exact:
mode ids are 1-based in continuous tuples, axis indices are 0-based.

Packing order of the flat index is ``(q, i_phi, i_y, i_x)`` with ``i_x``
fastest, matching the row-major layout of the membership arrays and of the
kernel file format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "GridSpec",
    "GridIndex",
    "KernelSet",
    "snap",
    "center",
    "ball_indices",
    "flat_index",
    "from_flat_index",
]

TWO_PI = 2.0 * np.pi

# Absolute slack, in meters/radians, for boundary-tie detection. Points within
# this distance of a cell boundary belong to both cells.
BOUNDARY_TOL = 1e-9


class GridIndex(NamedTuple):
    i_x: int
    i_y: int
    i_phi: int
    q: int


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the state grid.

    Parameters
    ----------
    lo, hi : 3-tuples (X, Y, phi)
        First and last grid point per continuous axis. ``hi - lo`` must be a
        whole multiple of the spacing ``2 * r``; for the wrapped phi axis
        ``lo = 0`` and ``hi = 2*pi - 2*r``.
    r : float
        Cell radius (half grid spacing), identical in meters and radians.
    n_modes : int
        Number of discrete modes (no gridding, the axis is exact).
    wrap : 3-tuple of bool
        Wrapping flags per continuous axis; only phi may wrap.
    """

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    r: float
    n_modes: int
    wrap: tuple[bool, bool, bool] = (False, False, True)
    shape: tuple[int, int, int] = field(init=False)  # (n_x, n_y, n_phi)

    def __post_init__(self) -> None:
        if self.r <= 0.0:
            raise ValueError("cell radius r must be positive")
        if self.n_modes < 1:
            raise ValueError("n_modes must be at least 1")
        if self.wrap[0] or self.wrap[1]:
            raise ValueError("only the phi axis may wrap")
        counts = []
        for ax in range(3):
            span = self.hi[ax] - self.lo[ax]
            n = int(round(span / (2.0 * self.r))) + 1
            if n < 1 or abs(span - (n - 1) * 2.0 * self.r) > 1e-9:
                raise ValueError(
                    f"axis {ax}: span {span} is not a whole multiple of the "
                    f"spacing {2.0 * self.r}"
                )
            counts.append(n)
        if self.wrap[2]:
            # wrapping requires the spacing to divide 2*pi exactly
            if abs(counts[2] * 2.0 * self.r - TWO_PI) > 1e-9:
                raise ValueError(
                    "phi axis must cover [0, 2*pi) with n_phi * 2r = 2*pi"
                )
            if abs(self.lo[2]) > 1e-12:
                raise ValueError("wrapped phi axis must start at 0")
        object.__setattr__(self, "shape", tuple(counts))

    @classmethod
    def cover(
        cls,
        x_range: tuple[float, float],
        y_range: tuple[float, float],
        n_phi: int,
        n_modes: int,
    ) -> "GridSpec":
        """Smallest grid with ``r = pi / n_phi`` whose cells cover the given box."""
        r = np.pi / n_phi
        lo, hi = [], []
        for a, b in (x_range, y_range):
            if b < a:
                raise ValueError("empty axis range")
            # first point at or below a + r, last at or above b - r
            n = max(1, int(np.ceil((b - a - 2.0 * r) / (2.0 * r) - 1e-12)) + 1)
            pad = ((n - 1) * 2.0 * r - (b - a)) / 2.0
            lo.append(a - pad)
            hi.append(b + pad)
        return cls(
            lo=(lo[0], lo[1], 0.0),
            hi=(hi[0], hi[1], TWO_PI - 2.0 * r),
            r=r,
            n_modes=n_modes,
        )

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape)) * self.n_modes

    def axis_coords(self, ax: int) -> np.ndarray:
        """Grid point coordinates along a continuous axis."""
        return self.lo[ax] + 2.0 * self.r * np.arange(self.shape[ax])

    def grid_shape(self) -> tuple[int, int, int, int]:
        """Array shape in packing order (q, i_phi, i_y, i_x)."""
        n_x, n_y, n_phi = self.shape
        return (self.n_modes, n_phi, n_y, n_x)

    def close_to(self, other: "GridSpec") -> bool:
        return (
            self.shape == other.shape
            and self.n_modes == other.n_modes
            and self.wrap == other.wrap
            and abs(self.r - other.r) < 1e-12
            and all(abs(a - b) < 1e-9 for a, b in zip(self.lo, other.lo))
        )


@dataclass(eq=False)
class KernelSet:
    """Bit-per-grid-point membership set over a :class:`GridSpec`.

    ``bits`` is a boolean array of shape ``spec.grid_shape()``; the packed
    binary form is only materialized by the file format.
    """

    spec: GridSpec
    bits: np.ndarray

    def __post_init__(self) -> None:
        expect = self.spec.grid_shape()
        if self.bits.shape != expect:
            raise ValueError(f"bits shape {self.bits.shape}, expected {expect}")
        if self.bits.dtype != np.bool_:
            self.bits = self.bits.astype(bool)

    @classmethod
    def empty(cls, spec: GridSpec) -> "KernelSet":
        return cls(spec, np.zeros(spec.grid_shape(), dtype=bool))

    @classmethod
    def full(cls, spec: GridSpec) -> "KernelSet":
        return cls(spec, np.ones(spec.grid_shape(), dtype=bool))

    def copy(self) -> "KernelSet":
        return KernelSet(self.spec, self.bits.copy())

    def count(self) -> int:
        return int(self.bits.sum())

    def contains(self, idx: GridIndex) -> bool:
        return bool(self.bits[idx.q, idx.i_phi, idx.i_y, idx.i_x])

    def issubset(self, other: "KernelSet") -> bool:
        return bool(np.all(~self.bits | other.bits))


def _axis_window(
    spec: GridSpec, ax: int, coord: float, radius: float
) -> np.ndarray | None:
    """Indices along one axis within ``radius`` of ``coord``.

    Returns None when the coordinate lies outside the covered range of a
    non-wrapping axis (further than r from every grid point on that side).
    """
    lo = spec.lo[ax]
    n = spec.shape[ax]
    step = 2.0 * spec.r
    if spec.wrap[ax]:
        c = coord % TWO_PI
        if radius >= np.pi - BOUNDARY_TOL:
            return np.arange(n)
        i_min = int(np.ceil((c - radius - lo) / step - BOUNDARY_TOL / step))
        i_max = int(np.floor((c + radius - lo) / step + BOUNDARY_TOL / step))
        if i_max - i_min + 1 >= n:
            return np.arange(n)
        return np.arange(i_min, i_max + 1) % n
    if coord < lo - spec.r - BOUNDARY_TOL:
        return None
    if coord > spec.hi[ax] + spec.r + BOUNDARY_TOL:
        return None
    i_min = int(np.ceil((coord - radius - lo) / step - BOUNDARY_TOL / step))
    i_max = int(np.floor((coord + radius - lo) / step + BOUNDARY_TOL / step))
    i_min = max(i_min, 0)
    i_max = min(i_max, n - 1)
    if i_min > i_max:
        return np.empty(0, dtype=int)
    return np.arange(i_min, i_max + 1)


def _mode_axis_index(spec: GridSpec, q: float) -> int:
    qi = int(round(q)) - 1
    if not 0 <= qi < spec.n_modes:
        raise ValueError(f"mode id {q} outside 1..{spec.n_modes}")
    return qi


def ball_indices(
    p: tuple[float, float, float, float] | np.ndarray,
    radius: float,
    spec: GridSpec,
) -> list[GridIndex] | None:
    """All grid indices within infinity-distance ``radius`` of ``p``.

    The distance is taken over the continuous axes (X, Y, phi), with phi
    wrapped; the mode component of ``p`` is a 1-based id and must be exact.
    Returns None when ``p`` lies outside the covered box. With
    ``radius = spec.r`` this is exactly :func:`snap` and is nonempty for every
    in-box point (the r-covering property).
    """
    qi = _mode_axis_index(spec, p[3])
    wx = _axis_window(spec, 0, float(p[0]), radius)
    wy = _axis_window(spec, 1, float(p[1]), radius)
    wp = _axis_window(spec, 2, float(p[2]), radius)
    if wx is None or wy is None or wp is None:
        return None
    return [
        GridIndex(int(ix), int(iy), int(ip), qi)
        for ip in wp
        for iy in wy
        for ix in wx
    ]


def snap(
    p: tuple[float, float, float, float] | np.ndarray, spec: GridSpec
) -> list[GridIndex] | None:
    """Grid indices whose cell contains ``p`` (ties at boundaries included)."""
    return ball_indices(p, spec.r, spec)


def center(idx: GridIndex, spec: GridSpec) -> np.ndarray:
    """Continuous state (X, Y, phi, q-id) at a grid index."""
    n_x, n_y, n_phi = spec.shape
    if not (0 <= idx.i_x < n_x and 0 <= idx.i_y < n_y and 0 <= idx.i_phi < n_phi):
        raise ValueError(f"index {idx} outside grid {spec.shape}")
    if not 0 <= idx.q < spec.n_modes:
        raise ValueError(f"mode axis index {idx.q} outside 0..{spec.n_modes - 1}")
    step = 2.0 * spec.r
    return np.array(
        [
            spec.lo[0] + step * idx.i_x,
            spec.lo[1] + step * idx.i_y,
            spec.lo[2] + step * idx.i_phi,
            float(idx.q + 1),
        ]
    )


def flat_index(idx: GridIndex, spec: GridSpec) -> int:
    """Row-major flat index in packing order (q, i_phi, i_y, i_x)."""
    n_x, n_y, n_phi = spec.shape
    return ((idx.q * n_phi + idx.i_phi) * n_y + idx.i_y) * n_x + idx.i_x


def from_flat_index(flat: int, spec: GridSpec) -> GridIndex:
    n_x, n_y, n_phi = spec.shape
    if not 0 <= flat < spec.n_points:
        raise ValueError(f"flat index {flat} outside 0..{spec.n_points - 1}")
    flat, i_x = divmod(flat, n_x)
    flat, i_y = divmod(flat, n_y)
    q, i_phi = divmod(flat, n_phi)
    return GridIndex(i_x, i_y, i_phi, q)
