"""Trajectory post-processing: frame transforms, heading interpolation, turning radii."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kinematics import KinematicParams, VehicleState

EPS_STILL = 1e-3
FEASIBILITY_RTOL = 1e-6


@dataclass(frozen=True)
class Trajectory:
    """Future states sampled every ``dt`` seconds (element h at t = dt*(h+1))."""

    dt: float
    points: tuple[VehicleState, ...]

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(self.points) < 1:
            raise ValueError("a trajectory needs at least one point")
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self) -> int:
        return len(self.points)

    def positions(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.points], dtype=np.float64).reshape(-1, 2)

    def as_array(self) -> np.ndarray:
        """(H, 4) array of x, y, psi, v."""
        return np.array([p.as_tuple() for p in self.points], dtype=np.float64).reshape(-1, 4)

    @classmethod
    def from_array(cls, arr, dt: float) -> "Trajectory":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(dt, tuple(VehicleState(*map(float, row)) for row in arr))


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    min_radius_observed: float
    violating_index: int | None = None


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def to_actor_frame(states: Sequence[VehicleState], anchor: VehicleState) -> list[VehicleState]:
    """Express ``states`` in the frame centered on ``anchor`` with x along its heading."""
    c, s = math.cos(anchor.psi), math.sin(anchor.psi)
    out = []
    for st in states:
        dx, dy = st.x - anchor.x, st.y - anchor.y
        out.append(VehicleState(c * dx + s * dy, -s * dx + c * dy, st.psi - anchor.psi, st.v))
    return out


def from_actor_frame(states: Sequence[VehicleState], anchor: VehicleState) -> list[VehicleState]:
    c, s = math.cos(anchor.psi), math.sin(anchor.psi)
    return [
        VehicleState(anchor.x + c * st.x - s * st.y, anchor.y + s * st.x + c * st.y, st.psi + anchor.psi, st.v)
        for st in states
    ]


def interpolate_headings(positions, dt: float = 0.1, anchor_heading: float = 0.0) -> np.ndarray:
    """Headings from a sequence of positions.

    Interior points use the central difference p[h+1] - p[h-1]; the first point
    uses its displacement from the anchor origin and the last point the
    backward difference. A difference shorter than ``EPS_STILL`` carries the
    previous heading forward (``anchor_heading`` at the start).
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    padded = np.vstack([np.zeros((1, 2)), pts])  # padded[k+1] == pts[k]
    out = np.empty(n)
    prev = anchor_heading
    for h in range(n):
        if n == 1 or h == 0:
            d = padded[1] - padded[0]
        elif h == n - 1:
            d = pts[h] - pts[h - 1]
        else:
            d = pts[h + 1] - pts[h - 1]
        if math.hypot(d[0], d[1]) < EPS_STILL:
            out[h] = prev
        else:
            out[h] = math.atan2(d[1], d[0])
        prev = out[h]
    return out


def finite_difference_speeds(positions, dt: float) -> np.ndarray:
    """Speed at each point from the displacement since the previous point (origin first)."""
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    padded = np.vstack([np.zeros((1, 2)), pts])
    return np.hypot(*np.diff(padded, axis=0).T) / dt


def circumradius(p0, p1, p2) -> float:
    """Circumradius of a point triple; +inf when collinear or any side is below ``EPS_STILL``."""
    a = math.dist(p0, p1)
    b = math.dist(p1, p2)
    c = math.dist(p0, p2)
    if min(a, b, c) < EPS_STILL:
        return math.inf
    cross = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
    if cross == 0.0:
        return math.inf
    return a * b * c / (2.0 * abs(cross))


def turning_radii(positions, anchor=(0.0, 0.0)) -> np.ndarray:
    """Three-point radius at every interior point of ``[anchor] + positions``.

    Element k is the radius at ``positions[k]`` formed with its neighbours, so
    the result has ``len(positions) - 1`` entries.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("turning_radii needs at least two positions")
    full = np.vstack([np.asarray(anchor, dtype=np.float64).reshape(1, 2), pts])
    p0, p1, p2 = full[:-2], full[1:-1], full[2:]
    a = np.hypot(*(p1 - p0).T)
    b = np.hypot(*(p2 - p1).T)
    c = np.hypot(*(p2 - p0).T)
    cross = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    still = np.minimum(np.minimum(a, b), c) < EPS_STILL
    with np.errstate(divide="ignore", invalid="ignore"):
        r = a * b * c / (2.0 * np.abs(cross))
    r[(cross == 0.0) | still] = np.inf
    return r


def step_radii(positions, headings, anchor=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Path length over heading change for every step of ``[anchor] + trajectory``.

    Element k pairs the chord from point k-1 to point k with the heading change
    across the same step. Steps shorter than ``EPS_STILL`` or without heading
    change give +inf.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    psi = np.asarray(headings, dtype=np.float64).ravel()
    if len(psi) != len(pts):
        raise ValueError("positions and headings must have the same length")
    ax, ay, apsi = anchor
    full = np.vstack([[ax, ay], pts])
    ds = np.hypot(*np.diff(full, axis=0).T)
    dpsi = np.abs(wrap_angle(np.diff(np.concatenate([[apsi], psi]))))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = ds / dpsi
    r[(ds < EPS_STILL) | (dpsi == 0.0)] = np.inf
    return r


def check_feasibility(traj, params: KinematicParams, method: str = "auto") -> FeasibilityReport:
    """A trajectory is infeasible if any point turns tighter than ``params.r_min``.

    ``traj`` is a :class:`Trajectory`, an (H, 2) position array or an (H, >=3)
    array whose third column is heading. ``method="headings"`` takes each
    step's length over its heading change, measured from the anchor state at
    the origin with heading 0. ``method="positions"`` uses three-point
    circumradii of the anchor-prepended polyline. ``"auto"`` picks headings
    whenever the input carries them.
    """
    if isinstance(traj, Trajectory):
        arr = traj.as_array()
    else:
        arr = np.asarray(traj, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise ValueError("expected an (H, >=2) array")
    if method == "auto":
        method = "headings" if arr.shape[1] >= 3 else "positions"
    pos = arr[:, :2]
    if method == "headings":
        if arr.shape[1] < 3:
            raise ValueError("heading-based check needs a heading column")
        r = step_radii(pos, arr[:, 2])
    elif method == "positions":
        if len(pos) < 2:
            return FeasibilityReport(True, math.inf, None)
        r = turning_radii(pos)
    else:
        raise ValueError(f"unknown feasibility method {method!r}")
    threshold = params.r_min * (1.0 - FEASIBILITY_RTOL)
    bad = np.nonzero(r < threshold)[0]
    return FeasibilityReport(
        feasible=bad.size == 0,
        min_radius_observed=float(r.min()),
        violating_index=None if bad.size == 0 else int(bad[0]),
    )
