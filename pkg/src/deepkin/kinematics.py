"""Vehicle motion models: kinematic bicycle, CTRA and constant-controls propagation.

The scalar functions (``bicycle_derivatives``, ``bicycle_step``, ``rollout``,
``ctra_rollout``) operate on :class:`VehicleState` values and are the
reference semantics. ``rollout_batch`` and ``ctra_rollout_batch`` compute the
same explicit-Euler recursions for whole batches at once and accept either
numpy arrays or autodiff tensors, which is how the kinematic output layer is
placed on the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_A_MAX = 8.0
DEFAULT_GAMMA_MAX = math.radians(45.0)
DEFAULT_R_MIN = 3.0


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {v!r}")


@dataclass(frozen=True)
class VehicleState:
    """Actor state. ``psi`` is unwrapped radians."""

    x: float
    y: float
    psi: float
    v: float

    def __post_init__(self):
        _check_finite(self.x, self.y, self.psi, self.v)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.psi, self.v)


@dataclass(frozen=True)
class ControlInput:
    accel: float
    steer: float

    def __post_init__(self):
        _check_finite(self.accel, self.steer)


@dataclass(frozen=True)
class KinematicParams:
    """Per-actor kinematic constants.

    Args:
        l_r: center to rear axle, meters.
        l_f: center to front axle, meters.
        a_max: bound on |acceleration|, m/s^2.
        gamma_max: bound on |steering angle|, radians, strictly below pi/2.
        r_min: minimum feasible turning radius, meters.
    """

    l_r: float = 1.4
    l_f: float = 1.4
    a_max: float = DEFAULT_A_MAX
    gamma_max: float = DEFAULT_GAMMA_MAX
    r_min: float = DEFAULT_R_MIN

    def __post_init__(self):
        _check_finite(self.l_r, self.l_f, self.a_max, self.gamma_max, self.r_min)
        if self.l_r <= 0 or self.l_f <= 0:
            raise ValueError("axle distances must be positive")
        if self.a_max <= 0:
            raise ValueError("a_max must be positive")
        if not 0 < self.gamma_max < math.pi / 2:
            raise ValueError("gamma_max must lie in (0, pi/2)")
        if self.r_min <= 0:
            raise ValueError("r_min must be positive")

    @property
    def wheelbase(self) -> float:
        return self.l_r + self.l_f

    def slip_angle(self, steer: float) -> float:
        return math.atan(self.l_r / (self.l_f + self.l_r) * math.tan(steer))

    def turning_radius(self, steer: float) -> float:
        """Radius of the constant-steer circle traced by the center, l_r / sin(beta)."""
        s = math.sin(abs(self.slip_angle(steer)))
        return math.inf if s == 0.0 else self.l_r / s

    def steer_for_radius(self, radius: float) -> float:
        """Inverse of :meth:`turning_radius` (positive steer)."""
        if radius < self.l_r:
            raise ValueError(f"radius {radius} is below l_r={self.l_r}")
        beta = math.asin(self.l_r / radius)
        return math.atan(math.tan(beta) * (self.l_f + self.l_r) / self.l_r)

    @property
    def min_radius_at_limit(self) -> float:
        """Smallest radius reachable inside the steering clamp."""
        return self.turning_radius(self.gamma_max)

    def to_dict(self) -> dict:
        return {"l_r": self.l_r, "l_f": self.l_f, "a_max": self.a_max, "gamma_max": self.gamma_max, "r_min": self.r_min}

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicParams":
        return cls(**{k: float(d[k]) for k in ("l_r", "l_f", "a_max", "gamma_max", "r_min") if k in d})


@dataclass(frozen=True)
class StateDerivative:
    dx: float
    dy: float
    dpsi: float
    dv: float
    beta: float


def bicycle_derivatives(state: VehicleState, control: ControlInput, params: KinematicParams) -> StateDerivative:
    _check_finite(*state.as_tuple(), control.accel, control.steer)
    beta = math.atan(params.l_r / (params.l_f + params.l_r) * math.tan(control.steer))
    heading = state.psi + beta
    return StateDerivative(
        dx=state.v * math.cos(heading),
        dy=state.v * math.sin(heading),
        dpsi=state.v / params.l_r * math.sin(beta),
        dv=control.accel,
        beta=beta,
    )


def bicycle_step(state: VehicleState, control: ControlInput, params: KinematicParams, dt: float) -> VehicleState:
    """Explicit Euler step; derivatives taken at the pre-step state."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    d = bicycle_derivatives(state, control, params)
    return VehicleState(
        state.x + d.dx * dt,
        state.y + d.dy * dt,
        state.psi + d.dpsi * dt,
        state.v + d.dv * dt,
    )


def rollout(
    initial: VehicleState, controls: Sequence[ControlInput], params: KinematicParams, dt: float
) -> list[VehicleState]:
    """Apply ``bicycle_step`` once per control. The initial state is not included."""
    if len(controls) < 1:
        raise ValueError("rollout needs at least one control")
    out = []
    s = initial
    for c in controls:
        s = bicycle_step(s, c, params, dt)
        out.append(s)
    return out


def constant_controls_propagate(
    initial: VehicleState, initial_control: ControlInput, params: KinematicParams, H: int, dt: float
) -> list[VehicleState]:
    """Hold the current controls for ``H`` steps (the non-learned baseline)."""
    return rollout(initial, [initial_control] * H, params, dt)


def ctra_rollout(initial: VehicleState, accel: float, turn_rate: float, H: int, dt: float) -> list[VehicleState]:
    """Constant turn rate and acceleration, explicit Euler. Velocity is not clamped."""
    if H < 1:
        raise ValueError("H must be >= 1")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    _check_finite(accel, turn_rate)
    x, y, psi, v = initial.as_tuple()
    out = []
    for _ in range(H):
        x, y, psi, v = (
            x + v * math.cos(psi) * dt,
            y + v * math.sin(psi) * dt,
            psi + turn_rate * dt,
            v + accel * dt,
        )
        out.append(VehicleState(x, y, psi, v))
    return out


def estimate_last_controls(past: Sequence[VehicleState], params: KinematicParams, dt: float) -> ControlInput:
    """Recover the control applied between the last two past states.

    Inverts the Euler update: accel from the speed increment, steer from the
    heading increment through the slip angle. Returns clipped values; zero
    steer when the actor was (nearly) stationary.
    """
    if len(past) < 2:
        return ControlInput(0.0, 0.0)
    prev, cur = past[-2], past[-1]
    accel = (cur.v - prev.v) / dt
    steer = 0.0
    if abs(prev.v) > 1e-6:
        sin_beta = (cur.psi - prev.psi) * params.l_r / (prev.v * dt)
        sin_beta = max(-1.0, min(1.0, sin_beta))
        beta = math.asin(sin_beta)
        steer = math.atan(math.tan(beta) * (params.l_f + params.l_r) / params.l_r)
    accel = max(-params.a_max, min(params.a_max, accel))
    steer = max(-params.gamma_max, min(params.gamma_max, steer))
    return ControlInput(accel, steer)


# ---------------------------------------------------------------------------
# batched, differentiable forms
# ---------------------------------------------------------------------------


def _prefix(initial, increments):
    """Sequential running sum ``initial, initial+inc0, ...`` dropping ``initial``.

    Prepending the initial value keeps the floating-point association
    identical to the step-by-step recursion.
    """
    increments = ad._as_tensor(increments)
    init = ad._as_tensor(initial) * np.ones(increments.shape[:-1] + (1,))
    return ad.cumsum(ad.concat([init, increments], axis=-1), axis=-1)


def rollout_batch(v0, accel, steer, l_r, l_f, dt: float):
    """Bicycle rollout from the actor-frame origin for a batch of control sequences.

    Args:
        v0: initial speeds broadcastable to ``accel.shape[:-1] + (1,)``.
        accel, steer: control sequences with horizon on the last axis.
        l_r, l_f: axle distances broadcastable like ``v0``.
        dt: step length in seconds.

    Returns:
        (x, y, psi, v) tensors, each shaped like ``accel``; element h is the
        state after h+1 steps. Bit-identical to iterating ``bicycle_step``
        except for libm/numpy transcendental rounding differences.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    beta = np.arctan(l_r / (l_f + l_r) * np.tan(steer))
    v_all = _prefix(v0, accel * dt)
    v_pre = v_all[..., :-1]
    zeros = np.zeros(v_pre.shape[:-1] + (1,))
    psi_all = _prefix(zeros, v_pre / l_r * np.sin(beta) * dt)
    heading = psi_all[..., :-1] + beta
    x_all = _prefix(zeros, v_pre * np.cos(heading) * dt)
    y_all = _prefix(zeros, v_pre * np.sin(heading) * dt)
    return x_all[..., 1:], y_all[..., 1:], psi_all[..., 1:], v_all[..., 1:]


def ctra_rollout_batch(v0, accel, turn_rate, H: int, dt: float):
    """CTRA rollout from the actor-frame origin; ``accel``/``turn_rate`` have a trailing axis of 1."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    ones = np.ones(ad._as_tensor(accel).shape[:-1] + (H,))
    v_all = _prefix(v0, accel * dt * ones)
    zeros = np.zeros(ones.shape[:-1] + (1,))
    psi_all = _prefix(zeros, turn_rate * dt * ones)
    v_pre = v_all[..., :-1]
    psi_pre = psi_all[..., :-1]
    x_all = _prefix(zeros, v_pre * np.cos(psi_pre) * dt)
    y_all = _prefix(zeros, v_pre * np.sin(psi_pre) * dt)
    return x_all[..., 1:], y_all[..., 1:], psi_all[..., 1:], v_all[..., 1:]
