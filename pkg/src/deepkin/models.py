"""Backbone encoder and trajectory decoder heads.

Every head consumes the same hidden tensor and returns a :class:`HeadOutput`
on the autodiff tape, so the training and evaluation code never branch on the
head type. ``TrajectoryModel.predict`` turns head outputs into plain
:class:`PredictionSet` values for inspection and metrics.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geometry import Trajectory, finite_difference_speeds, interpolate_headings
from .kinematics import (
    ControlInput,
    KinematicParams,
    VehicleState,
    ctra_rollout_batch,
    rollout_batch,
)

HEADS = ("dkm", "um", "um_velo", "um_heading", "poly1", "poly2", "poly3", "ctra")
POSITION_ONLY_HEADS = ("um", "um_velo", "poly1", "poly2", "poly3")
FEATURES_PER_STEP = 5
EXTRA_FEATURES = 3


@dataclass
class Limits:
    a_max: float = 8.0
    gamma_max_deg: float = 45.0
    r_min: float = 3.0

    @property
    def gamma_max(self) -> float:
        return math.radians(self.gamma_max_deg)


@dataclass
class ModelConfig:
    """Model configuration; ``to_json``/``from_json`` use the documented schema."""

    head: str = "dkm"
    H: int = 60
    dt: float = 0.1
    M: int = 3
    K: int = 10
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    limits: Limits = field(default_factory=Limits)
    ctra_omega_max: float = 1.2
    smooth_controls: bool = False
    # positions and speeds are divided by this before entering the backbone
    input_scale: float = 10.0
    # "whiten": fit a whitening transform to the training features before the first step
    input_norm: str = "whiten"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {', '.join(HEADS)}")
        if self.H < 1 or self.M < 1 or self.K < 0:
            raise ValueError("H and M must be >= 1 and K >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if isinstance(self.limits, dict):
            self.limits = Limits(**self.limits)
        self.hidden = [int(h) for h in self.hidden]
        if self.input_norm not in ("whiten", "scale"):
            raise ValueError("input_norm must be 'whiten' or 'scale'")

    @property
    def feature_dim(self) -> int:
        return (self.K + 1) * FEATURES_PER_STEP + EXTRA_FEATURES

    @property
    def poly_degree(self) -> int:
        return int(self.head[-1]) if self.head.startswith("poly") else 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config field(s): {', '.join(sorted(unknown))}")
        obj = dict(obj)
        if "limits" in obj:
            obj["limits"] = Limits(**obj["limits"])
        return cls(**obj)


@dataclass(frozen=True)
class ModePrediction:
    trajectory: Trajectory
    probability: float
    controls: tuple[ControlInput, ...] | None = None


@dataclass(frozen=True)
class PredictionSet:
    modes: tuple[ModePrediction, ...]
    method: str

    def top_index(self) -> int:
        probs = [m.probability for m in self.modes]
        return int(np.argmax(probs))

    def top(self) -> ModePrediction:
        return self.modes[self.top_index()]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def encode(past_states: Sequence[VehicleState], params: KinematicParams, K: int = 10) -> np.ndarray:
    """Flatten K+1 actor-frame past states (oldest first) plus speed and axle lengths.

    Each step contributes (x, y, sin psi, cos psi, v); the tail holds the current
    speed, l_r and l_f.
    """
    if len(past_states) != K + 1:
        raise ValueError(f"expected {K + 1} past states, got {len(past_states)}")
    rows = [(s.x, s.y, math.sin(s.psi), math.cos(s.psi), s.v) for s in past_states]
    tail = (past_states[-1].v, params.l_r, params.l_f)
    return np.concatenate([np.asarray(rows, dtype=np.float64).ravel(), np.asarray(tail, dtype=np.float64)])


def decode_features(features: np.ndarray, K: int = 10) -> list[VehicleState]:
    """Recover the past states from an encoded feature vector."""
    steps = np.asarray(features)[: (K + 1) * FEATURES_PER_STEP].reshape(K + 1, FEATURES_PER_STEP)
    return [VehicleState(x, y, math.atan2(s, c), v) for x, y, s, c, v in steps]


@dataclass
class Batch:
    """Array view of a list of samples."""

    features: np.ndarray  # (B, F)
    v0: np.ndarray  # (B,)
    l_r: np.ndarray
    l_f: np.ndarray
    a_max: np.ndarray
    gamma_max: np.ndarray
    r_min: np.ndarray
    truth: np.ndarray | None = None  # (B, H, 4)
    controls: np.ndarray | None = None  # (B, H, 2)
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.v0)

    def subset(self, idx) -> "Batch":
        def take(a):
            return None if a is None else a[idx]

        return Batch(
            self.features[idx],
            self.v0[idx],
            self.l_r[idx],
            self.l_f[idx],
            self.a_max[idx],
            self.gamma_max[idx],
            self.r_min[idx],
            take(self.truth),
            take(self.controls),
            [self.ids[i] for i in np.atleast_1d(idx)] if self.ids else [],
        )


def make_batch(samples: Sequence, K: int) -> Batch:
    """Build a :class:`Batch` from objects with ``past``, ``future``, ``controls``, ``kappa``, ``id``."""
    feats = np.stack([encode(s.past, s.kappa, K) for s in samples]) if samples else np.zeros((0, (K + 1) * 5 + 3))
    kap = [s.kappa for s in samples]
    have_future = all(getattr(s, "future", None) for s in samples)
    have_controls = all(getattr(s, "controls", None) for s in samples)
    return Batch(
        features=feats,
        v0=np.array([s.past[-1].v for s in samples], dtype=np.float64),
        l_r=np.array([k.l_r for k in kap], dtype=np.float64),
        l_f=np.array([k.l_f for k in kap], dtype=np.float64),
        a_max=np.array([k.a_max for k in kap], dtype=np.float64),
        gamma_max=np.array([k.gamma_max for k in kap], dtype=np.float64),
        r_min=np.array([k.r_min for k in kap], dtype=np.float64),
        truth=np.array([[p.as_tuple() for p in s.future] for s in samples], dtype=np.float64)
        if samples and have_future
        else None,
        controls=np.array([[(c.accel, c.steer) for c in s.controls] for s in samples], dtype=np.float64)
        if samples and have_controls
        else None,
        ids=[s.id for s in samples],
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _fc_init(store: ad.ParameterStore, name: str, fan_in: int, fan_out: int, rng, scale: float = 1.0, zero_bias=False):
    k = 1.0 / math.sqrt(fan_in)
    W = rng.uniform(-k, k, size=(fan_in, fan_out)) * scale
    b = np.zeros(fan_out) if zero_bias else rng.uniform(-k, k, size=fan_out)
    store.add(f"{name}.W", W)
    store.add(f"{name}.b", b)


def output_dim(cfg: ModelConfig) -> int:
    M, H = cfg.M, cfg.H
    if cfg.head in ("dkm", "um", "um_velo"):
        return 2 * H * M + M
    if cfg.head == "um_heading":
        return 4 * H * M + M
    if cfg.head == "ctra":
        return 2 * M + M
    return 2 * cfg.poly_degree * M + M


def init_params(cfg: ModelConfig, seed: int = 0) -> ad.ParameterStore:
    """Uniform(-k, k), k = 1/sqrt(fan_in); control-emitting output layers scaled by 0.01 with zero bias."""
    rng = np.random.default_rng(seed)
    store = ad.ParameterStore()
    fan_in = cfg.feature_dim
    store.add("input.mean", np.zeros(fan_in), trainable=False)
    store.add("input.transform", np.diag(scale_features(np.ones(fan_in), cfg)), trainable=False)
    for i, width in enumerate(cfg.hidden):
        _fc_init(store, f"backbone.{i}", fan_in, width, rng)
        fan_in = width
    if cfg.head in ("dkm", "ctra"):
        _fc_init(store, "head", fan_in, output_dim(cfg), rng, scale=0.01, zero_bias=True)
    else:
        _fc_init(store, "head", fan_in, output_dim(cfg), rng)
        if cfg.head == "um_heading":
            b = store["head.b"].value.copy()
            M, H = cfg.M, cfg.H
            pairs = np.zeros((M, H, 2))
            pairs[..., 1] = 1.0
            b[2 * H * M : 4 * H * M] = pairs.ravel()
            store.set("head.b", b)
    return store


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class HeadOutput:
    """Decoded tensors, shapes (B, M, H) unless noted."""

    x: ad.Tensor
    y: ad.Tensor
    logits: ad.Tensor  # (B, M)
    psi: ad.Tensor | None = None
    v: ad.Tensor | None = None
    accel: ad.Tensor | None = None  # (B, M, H) or (B, M, 1) for CTRA
    steer: ad.Tensor | None = None
    turn_rate: ad.Tensor | None = None  # (B, M, 1), CTRA only
    heading_pair: tuple[ad.Tensor, ad.Tensor] | None = None  # normalized (sin, cos), UM-heading only


def scale_features(features: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Divide position/speed slots by ``input_scale``; trig and axle slots pass through."""
    f = np.array(features, dtype=np.float64, copy=True)
    steps = f[..., : (cfg.K + 1) * FEATURES_PER_STEP].reshape(f.shape[:-1] + (cfg.K + 1, FEATURES_PER_STEP))
    steps[..., [0, 1, 4]] /= cfg.input_scale
    f[..., : (cfg.K + 1) * FEATURES_PER_STEP] = steps.reshape(f.shape[:-1] + (-1,))
    f[..., -3] /= cfg.input_scale
    return f


WHITEN_FLOOR = 1e-8


def fit_whitening(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and symmetric (ZCA) whitening matrix of a feature matrix.

    Eigenvalues are floored at ``WHITEN_FLOOR`` times the largest one, so exactly
    redundant features (e.g. equal axle distances) stay bounded.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise ValueError("whitening needs at least two feature rows")
    mean = f.mean(axis=0)
    lam, V = np.linalg.eigh(np.cov(f, rowvar=False))
    lam = np.maximum(lam, WHITEN_FLOOR * max(lam.max(), 1e-300))
    return mean, (V * lam**-0.5) @ V.T


def normalize_inputs(features, store: ad.ParameterStore) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - store["input.mean"].value) @ store["input.transform"].value


def backbone_forward(features, store: ad.ParameterStore, n_layers: int | None = None) -> ad.Tensor:
    """Fully connected layers with relu. ``features`` is (B, F) or (F,)."""
    h = ad._as_tensor(features)
    i = 0
    while f"backbone.{i}.W" in store and (n_layers is None or i < n_layers):
        W, b = store[f"backbone.{i}.W"], store[f"backbone.{i}.b"]
        if W.shape[0] != h.shape[-1]:
            raise ValueError(f"layer {i} expects {W.shape[0]} inputs, got {h.shape[-1]}")
        h = ad.relu(h @ W + b)
        i += 1
    return h


def _head_linear(hidden: ad.Tensor, store: ad.ParameterStore) -> ad.Tensor:
    W, b = store["head.W"], store["head.b"]
    if W.shape[0] != hidden.shape[-1]:
        raise ValueError(f"head expects {W.shape[0]} hidden units, got {hidden.shape[-1]}")
    return hidden @ W + b


def _col(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1, 1, 1)


def decode_um(hidden: ad.Tensor, store: ad.ParameterStore, cfg: ModelConfig) -> HeadOutput:
    out = _head_linear(hidden, store)
    B, M, H = hidden.shape[0], cfg.M, cfg.H
    pos = out[:, : 2 * H * M].reshape(B, M, H, 2)
    return HeadOutput(x=pos[..., 0], y=pos[..., 1], logits=out[:, 2 * H * M :])


def decode_um_velo(hidden: ad.Tensor, store: ad.ParameterStore, cfg: ModelConfig) -> HeadOutput:
    out = _head_linear(hidden, store)
    B, M, H = hidden.shape[0], cfg.M, cfg.H
    disp = out[:, : 2 * H * M].reshape(B, M, H, 2)
    pos = ad.cumsum(disp, axis=2)
    return HeadOutput(x=pos[..., 0], y=pos[..., 1], logits=out[:, 2 * H * M :])


def decode_um_heading(hidden: ad.Tensor, store: ad.ParameterStore, cfg: ModelConfig) -> HeadOutput:
    out = _head_linear(hidden, store)
    B, M, H = hidden.shape[0], cfg.M, cfg.H
    pos = out[:, : 2 * H * M].reshape(B, M, H, 2)
    pair = out[:, 2 * H * M : 4 * H * M].reshape(B, M, H, 2)
    s, c = pair[..., 0], pair[..., 1]
    norm = ad.hypot(s, c)
    return HeadOutput(
        x=pos[..., 0],
        y=pos[..., 1],
        logits=out[:, 4 * H * M :],
        heading_pair=(s / norm, c / norm),
    )


def poly_time_matrix(n: int, H: int, dt: float) -> np.ndarray:
    """(n, H) matrix of t^d for d = 1..n, t = dt*(h+1)."""
    t = dt * np.arange(1, H + 1)
    return np.stack([t**d for d in range(1, n + 1)])


def decode_poly(hidden: ad.Tensor, store: ad.ParameterStore, cfg: ModelConfig, n: int | None = None) -> HeadOutput:
    n = n or cfg.poly_degree
    out = _head_linear(hidden, store)
    B, M, H = hidden.shape[0], cfg.M, cfg.H
    coeff = out[:, : 2 * n * M].reshape(B, M, 2, n)
    pos = coeff @ poly_time_matrix(n, H, cfg.dt)  # (B, M, 2, H)
    return HeadOutput(x=pos[:, :, 0, :], y=pos[:, :, 1, :], logits=out[:, 2 * n * M :])


def _limit(raw: ad.Tensor, bound: np.ndarray, smooth: bool) -> ad.Tensor:
    if smooth:
        return ad.tanh(raw / np.maximum(bound, 1e-12)) * bound
    return ad.clamp(raw, -bound, bound)


def decode_ctra(hidden: ad.Tensor, store: ad.ParameterStore, cfg: ModelConfig, batch: Batch) -> HeadOutput:
    out = _head_linear(hidden, store)
    B, M, H = hidden.shape[0], cfg.M, cfg.H
    raw = out[:, : 2 * M].reshape(B, M, 2)
    accel = _limit(raw[..., 0:1], _col(batch.a_max), cfg.smooth_controls)
    # pre-step speeds along the horizon; the turn-rate bound keeps v / omega >= r_min everywhere
    v_steps = _col(batch.v0) + accel.value * cfg.dt * np.arange(H)
    v_floor = np.abs(v_steps).min(axis=-1, keepdims=True)
    omega_max = np.minimum(cfg.ctra_omega_max, v_floor / _col(batch.r_min))
    omega = _limit(raw[..., 1:2], omega_max, cfg.smooth_controls)
    x, y, psi, v = ctra_rollout_batch(_col(batch.v0), accel, omega, H, cfg.dt)
    return HeadOutput(x=x, y=y, logits=out[:, 2 * M :], psi=psi, v=v, accel=accel, turn_rate=omega)


def decode_dkm(hidden: ad.Tensor, store: ad.ParameterStore, cfg: ModelConfig, batch: Batch) -> HeadOutput:
    """Kinematic output layer: clamp predicted controls, then roll them out from the current state."""
    out = _head_linear(hidden, store)
    B, M, H = hidden.shape[0], cfg.M, cfg.H
    raw = out[:, : 2 * H * M].reshape(B, M, H, 2)
    accel = _limit(raw[..., 0], _col(batch.a_max), cfg.smooth_controls)
    steer = _limit(raw[..., 1], _col(batch.gamma_max), cfg.smooth_controls)
    x, y, psi, v = rollout_batch(_col(batch.v0), accel, steer, _col(batch.l_r), _col(batch.l_f), cfg.dt)
    return HeadOutput(x=x, y=y, logits=out[:, 2 * H * M :], psi=psi, v=v, accel=accel, steer=steer)


def decode(hidden: ad.Tensor, store: ad.ParameterStore, cfg: ModelConfig, batch: Batch) -> HeadOutput:
    head = cfg.head
    if head == "dkm":
        return decode_dkm(hidden, store, cfg, batch)
    if head == "ctra":
        return decode_ctra(hidden, store, cfg, batch)
    if head == "um":
        return decode_um(hidden, store, cfg)
    if head == "um_velo":
        return decode_um_velo(hidden, store, cfg)
    if head == "um_heading":
        return decode_um_heading(hidden, store, cfg)
    return decode_poly(hidden, store, cfg)


@dataclass
class PredictionArrays:
    """Numeric predictions for a batch: positions (B, M, H, 2), headings/speeds (B, M, H), probs (B, M)."""

    method: str
    dt: float
    positions: np.ndarray
    headings: np.ndarray
    speeds: np.ndarray
    probs: np.ndarray
    controls: np.ndarray | None = None  # (B, M, H, 2) as (accel, steer or turn rate)

    def top_index(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def to_prediction_sets(self) -> list[PredictionSet]:
        sets = []
        B, M, H = self.headings.shape
        for b in range(B):
            modes = []
            for m in range(M):
                arr = np.column_stack([self.positions[b, m], self.headings[b, m], self.speeds[b, m]])
                ctrl = None
                if self.controls is not None:
                    ctrl = tuple(ControlInput(float(a), float(g)) for a, g in self.controls[b, m])
                modes.append(ModePrediction(Trajectory.from_array(arr, self.dt), float(self.probs[b, m]), ctrl))
            sets.append(PredictionSet(tuple(modes), self.method))
        return sets


def fill_headings(positions: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated headings and finite-difference speeds for position-only outputs (B, M, H, 2)."""
    B, M, H, _ = positions.shape
    psi = np.empty((B, M, H))
    v = np.empty((B, M, H))
    for b in range(B):
        for m in range(M):
            psi[b, m] = interpolate_headings(positions[b, m], dt)
            v[b, m] = finite_difference_speeds(positions[b, m], dt)
    return psi, v


def to_arrays(out: HeadOutput, cfg: ModelConfig) -> PredictionArrays:
    pos = np.stack([out.x.value, out.y.value], axis=-1)
    logits = out.logits.value
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    if out.psi is not None:
        psi, v = out.psi.value, out.v.value
    else:
        psi_i, v = fill_headings(pos, cfg.dt)
        if out.heading_pair is not None:
            s, c = out.heading_pair
            psi = np.arctan2(s.value, c.value)
        else:
            psi = psi_i
    controls = None
    if out.accel is not None and out.steer is not None:
        controls = np.stack([out.accel.value, out.steer.value], axis=-1)
    elif out.accel is not None and out.turn_rate is not None:
        H = cfg.H
        controls = np.stack(
            [np.repeat(out.accel.value, H, axis=-1), np.repeat(out.turn_rate.value, H, axis=-1)], axis=-1
        )
    return PredictionArrays(cfg.head, cfg.dt, pos, psi, v, probs, controls)


class TrajectoryModel:
    """A backbone plus one decoder head, with its parameters."""

    def __init__(self, config: ModelConfig, store: ad.ParameterStore | None = None, seed: int = 0):
        self.config = config
        self.store = store if store is not None else init_params(config, seed)

    @property
    def method(self) -> str:
        return self.config.head

    def fit_input_normalization(self, features: np.ndarray) -> None:
        """Replace the fixed input scaling by a whitening transform fitted to ``features``."""
        mean, T = fit_whitening(features)
        self.store.set("input.mean", mean)
        self.store.set("input.transform", T)

    def forward(self, batch: Batch) -> HeadOutput:
        hidden = backbone_forward(normalize_inputs(batch.features, self.store), self.store)
        return decode(hidden, self.store, self.config, batch)

    def predict_batch(self, batch: Batch, chunk: int = 256) -> PredictionArrays:
        parts = []
        for lo in range(0, len(batch), chunk):
            sub = batch.subset(np.arange(lo, min(lo + chunk, len(batch))))
            parts.append(to_arrays(self.forward(sub), self.config))
        if not parts:
            raise ValueError("cannot predict an empty batch")
        return PredictionArrays(
            parts[0].method,
            parts[0].dt,
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.headings for p in parts]),
            np.concatenate([p.speeds for p in parts]),
            np.concatenate([p.probs for p in parts]),
            None if parts[0].controls is None else np.concatenate([p.controls for p in parts]),
        )

    def predict(self, samples: Sequence) -> list[PredictionSet]:
        return self.predict_batch(make_batch(samples, self.config.K)).to_prediction_sets()


class ConstantControlsBaseline:
    """Non-learned baseline: hold the controls estimated from the last two past states."""

    method = "constant_controls"

    def __init__(self, H: int = 60, dt: float = 0.1, K: int = 10):
        self.H, self.dt, self.K = H, dt, K

    def predict_batch(self, batch: Batch) -> PredictionArrays:
        from .kinematics import estimate_last_controls

        B = len(batch)
        accel = np.zeros((B, 1, self.H))
        steer = np.zeros((B, 1, self.H))
        for b in range(B):
            past = decode_features(batch.features[b], self.K)[-2:]
            # decode_features loses unwrapped headings; past psi is small in the actor frame
            kap = KinematicParams(batch.l_r[b], batch.l_f[b], batch.a_max[b], batch.gamma_max[b], batch.r_min[b])
            u = estimate_last_controls(past, kap, self.dt)
            accel[b] = u.accel
            steer[b] = u.steer
        x, y, psi, v = rollout_batch(_col(batch.v0), accel, steer, _col(batch.l_r), _col(batch.l_f), self.dt)
        return PredictionArrays(
            self.method,
            self.dt,
            np.stack([x.value, y.value], axis=-1),
            psi.value,
            v.value,
            np.ones((B, 1)),
            np.stack([accel, steer], axis=-1),
        )

    def predict(self, samples: Sequence) -> list[PredictionSet]:
        return self.predict_batch(make_batch(samples, self.K)).to_prediction_sets()
