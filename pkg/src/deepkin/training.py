"""Displacement and winner-takes-all multimodal losses, and the Adam training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import Trajectory
from .models import Batch, HeadOutput, ModePrediction, PredictionSet, TrajectoryModel, make_batch

METRICS_COLUMNS = (
    "iteration",
    "lr",
    "loss_total",
    "loss_disp",
    "loss_xent",
    "val_l2_3s",
    "val_l2_6s",
    "val_heading_3s",
    "val_heading_6s",
    "val_infeasible_pct",
)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, sample_id, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration} (sample {sample_id})")
        self.sample_id = sample_id
        self.iteration = iteration


@dataclass
class ExtraLossWeights:
    """Optional supervised terms on speed, heading, acceleration and steering (off by default)."""

    speed: float = 0.0
    heading: float = 0.0
    accel: float = 0.0
    steer: float = 0.0

    def any(self) -> bool:
        return any(w != 0.0 for w in (self.speed, self.heading, self.accel, self.steer))


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 20_000
    iterations: int = 20_000
    batch_size: int = 64
    alpha: float = 1.0
    seed: int = 0
    val_every: int = 1_000
    reduction: str = "mean"  # per-horizon aggregation of the displacement loss: mean | sum
    heading_weight: float = 1.0  # UM-heading's 1 - cos term
    extra: ExtraLossWeights = field(default_factory=ExtraLossWeights)

    def __post_init__(self):
        if isinstance(self.extra, dict):
            self.extra = ExtraLossWeights(**self.extra)
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.batch_size < 1 or self.iterations < 0 or self.lr_decay_every < 1:
            raise ValueError("batch_size and lr_decay_every must be >= 1, iterations >= 0")

    def lr_at(self, iteration: int) -> float:
        return self.lr0 * self.lr_decay ** (iteration // self.lr_decay_every)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config field(s): {', '.join(sorted(unknown))}")
        return cls(**obj)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    displacement: float
    mode_xent: float
    winning_mode_index: int
    heading: float | None = None


# ---------------------------------------------------------------------------
# tape-level losses
# ---------------------------------------------------------------------------


def per_mode_displacement(out: HeadOutput, truth: np.ndarray, reduction: str = "mean") -> ad.Tensor:
    """(B, M) displacement loss of every mode against ``truth`` (B, H, >=2)."""
    tx = truth[:, None, :, 0]
    ty = truth[:, None, :, 1]
    dist = ad.hypot(out.x - tx, out.y - ty)
    return dist.mean(axis=2) if reduction == "mean" else dist.sum(axis=2)


def per_mode_heading_term(out: HeadOutput, truth: np.ndarray) -> ad.Tensor | None:
    """(B, M) mean of 1 - cos(psi_hat - psi) for heads with an explicit heading channel."""
    if out.heading_pair is None:
        return None
    s, c = out.heading_pair
    psi = truth[:, None, :, 2]
    return (1.0 - (s * np.sin(psi) + c * np.cos(psi))).mean(axis=2)


def extra_terms(out: HeadOutput, truth: np.ndarray, controls: np.ndarray | None, w: ExtraLossWeights):
    """(B, M) weighted sum of the optional supervised terms, or None when all weights are zero."""
    if not w.any():
        return None
    total = None

    def acc(term):
        nonlocal total
        total = term if total is None else total + term

    if w.speed and out.v is not None:
        acc(ad.hypot(out.v - truth[:, None, :, 3], 0.0).mean(axis=2) * w.speed)
    if w.heading:
        if out.psi is not None:
            acc((1.0 - np.cos(out.psi - truth[:, None, :, 2])).mean(axis=2) * w.heading)
        elif out.heading_pair is not None:
            acc(per_mode_heading_term(out, truth) * w.heading)
    if controls is not None:
        if w.accel and out.accel is not None:
            acc(ad.hypot(out.accel - controls[:, None, :, 0], 0.0).mean(axis=2) * w.accel)
        if w.steer and out.steer is not None:
            acc(ad.hypot(out.steer - controls[:, None, :, 1], 0.0).mean(axis=2) * w.steer)
    return total


@dataclass
class BatchLoss:
    loss: ad.Tensor  # scalar, mean over the batch
    per_sample: np.ndarray
    displacement: float
    xent: float
    winners: np.ndarray


def batch_loss(out: HeadOutput, batch: Batch, cfg: TrainConfig) -> BatchLoss:
    """Winner-takes-all loss: winner displacement minus alpha * log p of the winner."""
    disp = per_mode_displacement(out, batch.truth, cfg.reduction)
    winners = np.argmin(disp.value, axis=1)  # first index on ties
    rows = np.arange(len(winners))
    logp = ad.log_softmax(out.logits, axis=1)
    d_win = disp[rows, winners]
    xent = -logp[rows, winners]
    total = d_win + cfg.alpha * xent
    head = per_mode_heading_term(out, batch.truth)
    if head is not None and cfg.heading_weight:
        total = total + cfg.heading_weight * head[rows, winners]
    extra = extra_terms(out, batch.truth, batch.controls, cfg.extra)
    if extra is not None:
        total = total + extra[rows, winners]
    loss = total.mean() if cfg.reduction == "mean" else total.sum()
    return BatchLoss(loss, total.value, float(d_win.value.mean()), float(xent.value.mean()), winners)


# ---------------------------------------------------------------------------
# value-level losses
# ---------------------------------------------------------------------------


def displacement_loss(pred: Trajectory, truth: Trajectory, reduction: str = "mean") -> float:
    """Per-horizon Euclidean position error, aggregated over horizons."""
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(truth)}")
    d = np.linalg.norm(pred.positions() - truth.positions(), axis=1)
    return float(d.mean() if reduction == "mean" else d.sum())


def multimodal_loss(preds: PredictionSet, truth: Trajectory, alpha: float = 1.0, reduction: str = "mean") -> LossBreakdown:
    if not preds.modes:
        raise ValueError("prediction set has no modes")
    losses = [displacement_loss(m.trajectory, truth, reduction) for m in preds.modes]
    win = int(np.argmin(losses))
    xent = -math.log(preds.modes[win].probability)
    return LossBreakdown(losses[win] + alpha * xent, losses[win], xent, win)


def supervised_extra_losses(
    pred: ModePrediction, truth_states: Trajectory, truth_controls, weights: ExtraLossWeights
) -> float:
    """Weighted mean |v_hat - v|, mean (1 - cos(psi_hat - psi)), mean |a_hat - a| and mean |gamma_hat - gamma|."""
    if not weights.any():
        return 0.0
    p = pred.trajectory.as_array()
    t = truth_states.as_array()
    total = 0.0
    if weights.speed:
        total += weights.speed * float(np.mean(np.abs(p[:, 3] - t[:, 3])))
    if weights.heading:
        total += weights.heading * float(np.mean(1.0 - np.cos(p[:, 2] - t[:, 2])))
    if pred.controls is not None and truth_controls is not None:
        pc = np.array([(c.accel, c.steer) for c in pred.controls])
        tc = np.array([(c.accel, c.steer) for c in truth_controls])
        if weights.accel:
            total += weights.accel * float(np.mean(np.abs(pc[:, 0] - tc[:, 0])))
        if weights.steer:
            total += weights.steer * float(np.mean(np.abs(pc[:, 1] - tc[:, 1])))
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TrajectoryModel
    optimizer: ad.AdamState
    log: list[dict]

    def write_log(self, path) -> None:
        write_metrics_csv(self.log, path)


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRICS_COLUMNS})


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index arrays over shuffled epochs."""
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            chunk = perm[lo : lo + batch_size]
            if len(chunk) < batch_size and n >= batch_size:
                # wrap around so every step sees a full batch
                chunk = np.concatenate([chunk, rng.permutation(n)[: batch_size - len(chunk)]])
            yield chunk


def train(
    model: TrajectoryModel,
    train_samples: Sequence,
    cfg: TrainConfig,
    val_samples: Sequence | None = None,
    optimizer: ad.AdamState | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimize the multimodal loss with Adam on mini-batches.

    Deterministic given ``cfg.seed``. Raises :class:`NonFiniteLossError` naming
    the first offending sample when the loss stops being finite.
    """
    from .evaluation import evaluate

    if not train_samples:
        raise ValueError("training set is empty")
    data = make_batch(train_samples, model.config.K)
    if data.truth is None or data.truth.shape[1] != model.config.H:
        raise ValueError(f"samples must carry {model.config.H} future states")
    opt = optimizer or ad.AdamState()
    # a fresh run fits the input whitening once; one sample has no covariance to fit
    if model.config.input_norm == "whiten" and opt.step == 0 and cfg.iterations > 0 and len(data) > 1:
        model.fit_input_normalization(data.features)
    rng = np.random.default_rng(cfg.seed)
    stream = _batches(len(data), cfg.batch_size, rng)
    log: list[dict] = []
    for it in range(cfg.iterations):
        lr = cfg.lr_at(it)
        batch = data.subset(next(stream))
        bl = batch_loss(model.forward(batch), batch, cfg)
        if not np.all(np.isfinite(bl.per_sample)):
            bad = int(np.nonzero(~np.isfinite(bl.per_sample))[0][0])
            raise NonFiniteLossError(batch.ids[bad], it)
        grads = ad.backward(bl.loss, model.store)
        ad.adam_step(model.store, grads, opt, lr)
        row = {
            "iteration": it + 1,
            "lr": lr,
            "loss_total": float(bl.loss.value),
            "loss_disp": bl.displacement,
            "loss_xent": bl.xent,
        }
        if val_samples and cfg.val_every and ((it + 1) % cfg.val_every == 0 or it + 1 == cfg.iterations):
            rep = evaluate(model, val_samples)
            row.update(
                val_l2_3s=rep.l2_3s,
                val_l2_6s=rep.l2_6s,
                val_heading_3s=rep.heading_3s,
                val_heading_6s=rep.heading_6s,
                val_infeasible_pct=rep.infeasible_pct,
            )
            if progress:
                progress(row)
        log.append(row)
    return TrainResult(model, opt, log)
