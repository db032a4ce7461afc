"""Synthetic driving scenarios with control labels, JSONL serialization and splitting.

Each sample is produced by rolling out a control profile that spans the past
window and the prediction horizon. The past is rolled out in a world frame
starting at the origin and then re-expressed in the actor frame of its last
state; the future is rolled out directly in that actor frame, so
``future == rollout(anchor, controls)`` holds exactly.

Profiles are anchored at the start of the past window, which means every
template parameter (speed, acceleration, turn radius, amplitude) is visible in
the past states. With zero noise the future is a deterministic function of
the past for every kind except ``intersection_multimodal``, whose branches
share an identical past by design.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Trajectory, check_feasibility, to_actor_frame
from .kinematics import ControlInput, KinematicParams, VehicleState, bicycle_step, ctra_rollout, rollout

KINDS = (
    "constant_velocity",
    "accelerate",
    "brake_to_stop",
    "constant_turn",
    "right_turn",
    "s_curve",
    "intersection_multimodal",
)
TURNING_KINDS = ("constant_turn", "right_turn", "s_curve", "intersection_multimodal")
BRANCHES = ("straight", "right", "left")
MAX_NOISE_RETRIES = 50
STOP_SNAP = 1e-6  # m/s; a braking step ending below this speed ends exactly at rest


class SchemaError(ValueError):
    """A dataset line or scenario spec does not match the expected schema."""


@dataclass(frozen=True)
class Sample:
    id: str
    kappa: KinematicParams
    past: tuple[VehicleState, ...]
    future: tuple[VehicleState, ...]
    controls: tuple[ControlInput, ...]
    scenario: str
    branch: str | None
    dt: float

    def future_trajectory(self) -> Trajectory:
        return Trajectory(self.dt, self.future)

    def is_self_consistent(self, atol: float = 1e-9) -> bool:
        rolled = rollout(self.past[-1], self.controls, self.kappa, self.dt)
        got = np.array([s.as_tuple() for s in rolled])
        want = np.array([s.as_tuple() for s in self.future])
        return bool(np.all(np.abs(got - want) <= atol))


@dataclass
class ScenarioSpec:
    """Parameter ranges for one scenario kind.

    ``speed_range`` is the speed at the current (anchor) time. ``turn_radius_range``
    bounds the steady-state radius of turning kinds and must not go below
    ``r_min``; it is raised to at least v^2 / ``lateral_accel_max`` for the
    drawn speed so fast actors do not circle. Noise is zero-mean Gaussian on each control, truncated to the
    clamp limits.
    """

    kind: str = "constant_velocity"
    speed_range: tuple[float, float] = (4.0, 12.0)
    accel_range: tuple[float, float] = (0.5, 2.5)
    decel_range: tuple[float, float] = (1.0, 4.0)
    turn_radius_range: tuple[float, float] = (6.0, 25.0)
    lateral_accel_max: float = 3.0
    wheelbase_range: tuple[float, float] = (2.7, 3.2)
    accel_noise: float = 0.0
    steer_noise: float = 0.0
    branch_probs: tuple[float, float, float] = (0.5, 0.3, 0.2)
    samples_per_scene: int = 1
    s_curve_period: float = 4.0
    turn_angle_deg: float = 90.0
    motion_model: str = "bicycle"
    position_noise: float = 0.0
    a_max: float = 8.0
    gamma_max_deg: float = 45.0
    r_min: float = 3.0
    K: int = 10
    H: int = 60
    dt: float = 0.1

    def __post_init__(self):
        for name in ("speed_range", "accel_range", "decel_range", "turn_radius_range", "wheelbase_range", "branch_probs"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def bad(field_name, why):
            raise SchemaError(f"scenario spec field {field_name!r}: {why}")

        if self.kind not in KINDS:
            bad("kind", f"unknown kind {self.kind!r}")
        for name in ("speed_range", "accel_range", "decel_range", "turn_radius_range", "wheelbase_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                bad(name, "must be a finite [lo, hi] range")
        if self.speed_range[0] < 0:
            bad("speed_range", "speeds must be non-negative")
        if self.kind != "brake_to_stop" and self.speed_range[0] <= 0:
            bad("speed_range", "non-moving actors are excluded")
        if self.accel_range[0] < 0 or self.decel_range[0] <= 0:
            bad("accel_range", "magnitudes must be positive")
        if self.turn_radius_range[0] < self.r_min:
            bad("turn_radius_range", f"radii below r_min={self.r_min} give infeasible ground truth")
        if self.wheelbase_range[0] <= 0:
            bad("wheelbase_range", "must be positive")
        if not 0 < self.gamma_max_deg < 90:
            bad("gamma_max_deg", "must lie in (0, 90)")
        shortest = KinematicParams(
            self.wheelbase_range[0] / 2, self.wheelbase_range[0] / 2, self.a_max, math.radians(self.gamma_max_deg), self.r_min
        )
        if self.kind in TURNING_KINDS and shortest.min_radius_at_limit > self.turn_radius_range[0]:
            bad("turn_radius_range", "lower bound is tighter than the steering limit allows")
        if max(self.accel_range[1], self.decel_range[1]) > self.a_max:
            bad("accel_range", "exceeds a_max")
        if self.accel_noise < 0 or self.steer_noise < 0 or self.position_noise < 0:
            bad("accel_noise", "noise levels must be non-negative")
        if len(self.branch_probs) != 3 or min(self.branch_probs) < 0 or abs(sum(self.branch_probs) - 1) > 1e-9:
            bad("branch_probs", "must be three non-negative values summing to 1")
        if not self.lateral_accel_max > 0:
            bad("lateral_accel_max", "must be positive")
        if self.samples_per_scene < 1:
            bad("samples_per_scene", "must be >= 1")
        if self.motion_model not in ("bicycle", "ctra"):
            bad("motion_model", "must be 'bicycle' or 'ctra'")
        if self.motion_model == "ctra" and self.kind not in ("constant_velocity", "accelerate", "constant_turn"):
            bad("motion_model", "ctra ground truth supports constant_velocity, accelerate and constant_turn")
        if self.K < 1 or self.H < 1 or not self.dt > 0:
            bad("K", "K, H must be >= 1 and dt > 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioSpec":
        if not isinstance(obj, dict):
            raise SchemaError("scenario spec must be a JSON object")
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"scenario spec field {sorted(unknown)[0]!r}: unknown field")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise SchemaError(f"scenario spec: {exc}") from exc


def load_specs(obj) -> list[ScenarioSpec]:
    """A spec file holds one spec object, a list of them, or ``{"scenarios": [...]}``."""
    if isinstance(obj, dict) and "scenarios" in obj:
        obj = obj["scenarios"]
    if isinstance(obj, list):
        if not obj:
            raise SchemaError("scenario spec field 'scenarios': empty list")
        return [ScenarioSpec.from_json(o) for o in obj]
    return [ScenarioSpec.from_json(obj)]


# ---------------------------------------------------------------------------
# control templates
# ---------------------------------------------------------------------------


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _ramp_turn_duration(v: float, kap: KinematicParams, gamma_peak: float, ramp: float, angle: float) -> float:
    """Plateau length so a 1-ramp-up, plateau, 1-ramp-down profile turns by ``angle``."""
    s = (np.arange(1000) + 0.5) / 1000
    beta = np.arctan(kap.l_r / kap.wheelbase * np.tan(gamma_peak * s))
    ramp_turn = v / kap.l_r * float(np.mean(np.sin(beta))) * ramp
    rate = v / kap.l_r * math.sin(math.atan(kap.l_r / kap.wheelbase * math.tan(gamma_peak)))
    return max(0.0, (angle - 2.0 * ramp_turn) / rate)


class _Profile:
    """Closed-loop control law evaluated step by step during generation."""

    def __init__(self, kind: str, params: dict, spec: ScenarioSpec, kap: KinematicParams):
        self.kind, self.p, self.spec, self.kap = kind, params, spec, kap

    def control(self, k: int, state: VehicleState) -> tuple[float, float]:
        """Template (accel, steer) for control index ``k`` (k = K is the anchor step)."""
        spec, p = self.spec, self.p
        t = (k - spec.K) * spec.dt  # control time relative to the anchor
        kind = self.kind
        if kind == "constant_velocity":
            return 0.0, 0.0
        if kind == "accelerate":
            return p["accel"], 0.0
        if kind == "brake_to_stop":
            return -p["decel"], 0.0
        if kind == "constant_turn":
            return 0.0, p["steer"]
        if kind == "right_turn":
            ramp = spec.K * spec.dt
            return 0.0, -self._trapezoid(t + ramp, p["steer"], ramp, p["plateau"])
        if kind == "s_curve":
            return 0.0, p["steer"] * math.sin(2 * math.pi * (t + spec.K * spec.dt) / spec.s_curve_period)
        if kind == "intersection_multimodal":
            if t < 0:
                return 0.0, 0.0
            sign = {"straight": 0.0, "right": -1.0, "left": 1.0}[p["branch"]]
            return 0.0, sign * self._trapezoid(t, p["steer"], 1.0, p["plateau"])
        raise AssertionError(kind)

    @staticmethod
    def _trapezoid(t: float, peak: float, ramp: float, plateau: float) -> float:
        if t < 0:
            return 0.0
        if t < ramp:
            return peak * t / ramp
        if t < ramp + plateau:
            return peak
        if t < 2 * ramp + plateau:
            return peak * (2 * ramp + plateau - t) / ramp
        return 0.0


def _draw_kappa(spec: ScenarioSpec, rng: np.random.Generator) -> KinematicParams:
    wb = rng.uniform(*spec.wheelbase_range)
    return KinematicParams(wb / 2, wb / 2, spec.a_max, math.radians(spec.gamma_max_deg), spec.r_min)


def _scene_params(spec: ScenarioSpec, rng: np.random.Generator, kap: KinematicParams) -> dict:
    """Template parameters shared by every sample of one scene."""
    kind = spec.kind
    p: dict = {"speed": rng.uniform(*spec.speed_range)}
    if kind == "accelerate":
        p["accel"] = rng.uniform(*spec.accel_range)
    elif kind == "brake_to_stop":
        p["decel"] = rng.uniform(*spec.decel_range)
    elif kind in TURNING_KINDS:
        floor = p["speed"] ** 2 / spec.lateral_accel_max
        lo, hi = spec.turn_radius_range
        radius = rng.uniform(max(lo, floor), max(hi, floor))
        steer = kap.steer_for_radius(radius)
        if kind == "constant_turn":
            steer *= rng.choice([-1.0, 1.0])
        p["steer"] = steer
    if kind == "right_turn":
        ramp = spec.K * spec.dt
        p["plateau"] = _ramp_turn_duration(p["speed"], kap, p["steer"], ramp, math.radians(spec.turn_angle_deg))
    if kind == "intersection_multimodal":
        p["plateau"] = _ramp_turn_duration(p["speed"], kap, p["steer"], 1.0, math.radians(spec.turn_angle_deg))
    return p


def _start_speed(kind: str, p: dict, spec: ScenarioSpec) -> float:
    span = spec.K * spec.dt
    if kind == "accelerate":
        return max(0.0, p["speed"] - p["accel"] * span)
    if kind == "brake_to_stop":
        return p["speed"] + p["decel"] * span
    return p["speed"]


def _truncated_noise(rng: np.random.Generator, sigma: float, lo: float, hi: float, mean: float) -> float:
    if sigma == 0.0:
        return mean
    for _ in range(100):
        val = mean + sigma * rng.standard_normal()
        if lo <= val <= hi:
            return val
    return min(max(mean, lo), hi)


def _simulate(spec: ScenarioSpec, kap: KinematicParams, profile: _Profile, v_start: float, past_rng, future_rng):
    """Roll out K past steps in the world frame, then H future steps in the actor frame.

    Noise for past controls comes from ``past_rng`` and for future controls from
    ``future_rng`` (either may be None for noiseless generation).
    """
    K, H, dt = spec.K, spec.H, spec.dt
    world = [VehicleState(0.0, 0.0, 0.0, v_start)]
    past: list[VehicleState] = []
    future: list[VehicleState] = []
    controls: list[ControlInput] = []
    s = world[0]
    for k in range(K + H):
        if k == K:
            past = to_actor_frame(world, world[-1])
            past[-1] = VehicleState(0.0, 0.0, 0.0, world[-1].v)
            s = past[-1]
        accel, steer = profile.control(k, s)
        rng = past_rng if k < K else future_rng
        if rng is not None:
            accel = _truncated_noise(rng, spec.accel_noise, -kap.a_max, kap.a_max, accel)
            steer = _truncated_noise(rng, spec.steer_noise, -kap.gamma_max, kap.gamma_max, steer)
        accel = min(max(accel, -kap.a_max), kap.a_max)
        steer = min(max(steer, -kap.gamma_max), kap.gamma_max)
        if profile.kind == "brake_to_stop" and (s.v < STOP_SNAP or s.v + accel * dt < STOP_SNAP):
            # land on zero speed (absorbing roundoff from the past) and stay there
            accel = -s.v / dt
        u = ControlInput(accel, steer)
        s = bicycle_step(s, u, kap, dt)
        if k < K:
            world.append(s)
        else:
            controls.append(u)
            future.append(s)
    return tuple(past), tuple(future), tuple(controls)


def _ctra_sample(spec: ScenarioSpec, kap: KinematicParams, p: dict, rng) -> tuple:
    K, H, dt = spec.K, spec.H, spec.dt
    accel = p.get("accel", 0.0)
    omega = 0.0
    if "steer" in p:
        omega = p["speed"] / kap.turning_radius(p["steer"]) * math.copysign(1.0, p["steer"])
    v_start = _start_speed(spec.kind, p, spec)
    world = [VehicleState(0.0, 0.0, 0.0, v_start)] + ctra_rollout(VehicleState(0.0, 0.0, 0.0, v_start), accel, omega, K, dt)
    past = to_actor_frame(world, world[-1])
    past[-1] = VehicleState(0.0, 0.0, 0.0, world[-1].v)
    fut = ctra_rollout(past[-1], accel, omega, H, dt)
    if spec.position_noise > 0:
        fut = [
            VehicleState(s.x + spec.position_noise * rng.standard_normal(), s.y + spec.position_noise * rng.standard_normal(), s.psi, s.v)
            for s in fut
        ]
    # equivalent bicycle steer of the turn rate, for labels only
    ctrls = []
    for s in fut:
        steer = 0.0
        if omega != 0.0 and s.v > 0:
            r = max(abs(s.v / omega), kap.l_r)
            steer = math.copysign(min(kap.steer_for_radius(r), kap.gamma_max), omega)
        ctrls.append(ControlInput(accel, steer))
    return tuple(past), tuple(fut), tuple(ctrls)


def generate(spec: ScenarioSpec, count: int, seed: int, id_prefix: str = "") -> list[Sample]:
    """Draw ``count`` samples. Sample i depends only on (seed, i), so generation is order-free."""
    spec.validate()
    samples = []
    for i in range(count):
        scene = i // spec.samples_per_scene
        scene_rng = _rng(seed, 0, scene)
        kap = _draw_kappa(spec, scene_rng)
        p = _scene_params(spec, scene_rng, kap)
        sample_rng = _rng(seed, 1, i)
        branch = None
        if spec.kind == "intersection_multimodal":
            branch = BRANCHES[int(sample_rng.choice(3, p=np.asarray(spec.branch_probs)))]
            p = dict(p, branch=branch)
        noisy = spec.accel_noise > 0 or spec.steer_noise > 0
        if spec.motion_model == "ctra":
            past, fut, ctrls = _ctra_sample(spec, kap, p, sample_rng)
        else:
            profile = _Profile(spec.kind, p, spec, kap)
            v_start = _start_speed(spec.kind, p, spec)
            for attempt in range(MAX_NOISE_RETRIES):
                # past noise is per scene so branches of one scene share an identical past;
                # infeasible futures are redrawn
                past_rng = _rng(seed, 2, scene) if noisy else None
                future_rng = _rng(seed, 3, i, attempt) if noisy else None
                past, fut, ctrls = _simulate(spec, kap, profile, v_start, past_rng, future_rng)
                if check_feasibility(Trajectory(spec.dt, fut), kap).feasible:
                    break
            else:
                raise SchemaError(
                    f"scenario spec field 'steer_noise': could not draw feasible ground truth for sample {i}"
                )
        samples.append(Sample(f"{id_prefix}{spec.kind}-{seed}-{i:06d}", kap, past, fut, ctrls, spec.kind, branch, spec.dt))
    return samples


def generate_mix(specs: Sequence[ScenarioSpec], count: int, seed: int) -> list[Sample]:
    """Round-robin over ``specs``: sample i comes from ``specs[i % len(specs)]``."""
    if len(specs) == 1:
        return generate(specs[0], count, seed)
    per_spec: list[list[Sample]] = []
    n = len(specs)
    for j, spec in enumerate(specs):
        k = len(range(j, count, n))
        per_spec.append(generate(spec, k, seed * 1000 + j, id_prefix=f"s{j}-"))
    out = []
    for i in range(count):
        out.append(per_spec[i % n][i // n])
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def sample_to_json(s: Sample) -> dict:
    return {
        "id": s.id,
        "dt": s.dt,
        "kappa": s.kappa.to_dict(),
        "past": [list(p.as_tuple()) for p in s.past],
        "future": [list(p.as_tuple()) for p in s.future],
        "controls": [[c.accel, c.steer] for c in s.controls],
        "scenario": s.scenario,
        "branch": s.branch,
    }


def sample_from_json(obj: dict) -> Sample:
    required = ("id", "dt", "kappa", "past", "future", "controls", "scenario", "branch")
    missing = [k for k in required if k not in obj]
    if missing:
        raise SchemaError(f"missing field(s) {', '.join(missing)}")
    try:
        kap = KinematicParams.from_dict(obj["kappa"])
        past = tuple(VehicleState(*map(float, row)) for row in obj["past"])
        future = tuple(VehicleState(*map(float, row)) for row in obj["future"])
        controls = tuple(ControlInput(*map(float, row)) for row in obj["controls"])
    except (TypeError, ValueError, KeyError) as exc:
        raise SchemaError(f"malformed state/control/kappa arrays: {exc}") from exc
    if not past:
        raise SchemaError("'past' must hold at least one state")
    if len(controls) != len(future):
        raise SchemaError("'controls' and 'future' lengths differ")
    return Sample(str(obj["id"]), kap, past, future, controls, str(obj["scenario"]), obj["branch"], float(obj["dt"]))


def write_dataset(samples: Iterable[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), allow_nan=False))
            fh.write("\n")


def read_dataset(path) -> list[Sample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object")
            try:
                out.append(sample_from_json(obj))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _group_key(s: Sample) -> str:
    h = hashlib.sha1()
    h.update(json.dumps([s.kappa.to_dict(), [p.as_tuple() for p in s.past]]).encode())
    return h.hexdigest()


def split(samples: Sequence[Sample], ratios=(3, 1, 1), seed: int = 0):
    """Deterministic shuffled split; samples with identical pasts stay together.

    Groups are shuffled and assigned greedily so each part's sample count is
    as close as possible to its share.
    """
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(_group_key(s), []).append(i)
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    total = len(samples)
    r = np.asarray(ratios, dtype=np.float64)
    targets = np.floor(r / r.sum() * total).astype(int)
    # hand the rounding remainder to the parts in order
    for j in range(total - targets.sum()):
        targets[j % len(targets)] += 1
    parts: list[list[int]] = [[] for _ in ratios]
    for gi in order:
        idx = groups[keys[gi]]
        deficits = [targets[j] - len(parts[j]) for j in range(len(parts))]
        j = int(np.argmax(deficits))
        parts[j].extend(idx)
    return tuple([samples[i] for i in sorted(p)] for p in parts)
