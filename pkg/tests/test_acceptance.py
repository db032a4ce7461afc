"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary repeats at the
end of the run. The training-based criteria (4 to 6) take a few minutes in
total and can be deselected with ``-m "not slow"``.
"""

import itertools
import math
import time

import numpy as np
import pytest

from deepkin import autodiff as ad
from deepkin.cli import main
from deepkin.datagen import KINDS, ScenarioSpec, generate, generate_mix, split
from deepkin.evaluation import evaluate, wasserstein_1d
from deepkin.geometry import check_feasibility
from deepkin.kinematics import ControlInput, KinematicParams, VehicleState, rollout, rollout_batch
from deepkin.models import HEADS, POSITION_ONLY_HEADS, ModelConfig, TrajectoryModel, make_batch
from deepkin.training import TrainConfig, batch_loss, train

# desk-scale schedule used by every training criterion: fast start, 0.8 decay twenty times
DESK_LR0 = 3e-3
DESK_DECAY = 0.8


def desk_config(iterations: int, **kw) -> TrainConfig:
    return TrainConfig(
        lr0=DESK_LR0, lr_decay=DESK_DECAY, lr_decay_every=max(iterations // 20, 1), iterations=iterations, **kw
    )


# --------------------------------------------------------------------------- 1


def _reference_rollout(x, y, psi, v, controls, l_r, l_f, dt):
    """Plain transcription of the Euler-integrated bicycle equations."""
    out = []
    for a, g in controls:
        beta = math.atan(l_r / (l_f + l_r) * math.tan(g))
        x, y, psi, v = (
            x + v * math.cos(psi + beta) * dt,
            y + v * math.sin(psi + beta) * dt,
            psi + v / l_r * math.sin(beta) * dt,
            v + a * dt,
        )
        out.append((x, y, psi, v))
    return out


def test_criterion_1_kinematics_oracle(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        x, y = rng.uniform(-100, 100, 2)
        psi = rng.uniform(-math.pi, math.pi)
        v = rng.uniform(0, 30)
        l_r, l_f = rng.uniform(0.8, 2.0, 2)
        dt = rng.choice([0.05, 0.1, 0.2])
        n = int(rng.integers(1, 30))
        ctl = np.column_stack([rng.uniform(-8, 8, n), rng.uniform(-0.7, 0.7, n)])
        kap = KinematicParams(l_r=l_r, l_f=l_f)
        got = rollout(VehicleState(x, y, psi, v), [ControlInput(a, g) for a, g in ctl], kap, dt)
        want = np.array(_reference_rollout(x, y, psi, v, ctl, l_r, l_f, dt))
        worst = max(worst, float(np.max(np.abs(np.array([s.as_tuple() for s in got]) - want))))
        # the vectorized actor-frame rollout must agree too
        batch = rollout_batch(np.array([v]), ctl[:, 0], ctl[:, 1], l_r, l_f, dt)
        ref0 = np.array(_reference_rollout(0.0, 0.0, 0.0, v, ctl, l_r, l_f, dt))
        vec = np.column_stack([getattr(t, "value", t) for t in batch])
        worst = max(worst, float(np.max(np.abs(vec - ref0))))
    elapsed = time.perf_counter() - t0
    verdict(1, "rollout vs scalar transcription", worst <= 1e-9 and elapsed < 5, f"max |err| {worst:.2e}, {elapsed:.2f} s")


# --------------------------------------------------------------------------- 2

FD_STEP = 1e-5
FD_REL = 1e-4
FD_ABS = 1e-7
CLAMP_MARGIN = 1e-3


def _away_from_clamps(model: TrajectoryModel, out, batch) -> bool:
    cfg = model.config
    if out.accel is not None and np.any(np.abs(out.accel.value) > cfg.limits.a_max - CLAMP_MARGIN):
        return False
    if cfg.head == "dkm" and np.any(np.abs(out.steer.value) > cfg.limits.gamma_max - CLAMP_MARGIN):
        return False
    if cfg.head == "ctra":
        v = batch.v0[:, None, None] + out.accel.value * cfg.dt * np.arange(cfg.H)
        bound = np.minimum(cfg.ctra_omega_max, np.abs(v).min(axis=-1, keepdims=True) / batch.r_min[:, None, None])
        if np.any(np.abs(out.turn_rate.value) > bound - CLAMP_MARGIN):
            return False
    return True


def _gradient_instances(head: str, count: int, rng: np.random.Generator):
    """Yield (model, batch) pairs whose controls sit clear of every clamp."""
    kinds = ("constant_turn", "accelerate", "s_curve", "brake_to_stop", "right_turn")
    made = tries = 0
    while made < count:
        tries += 1
        assert tries < 20 * count, f"{head}: could not find instances away from the clamps"
        samples = generate(ScenarioSpec(kind=kinds[tries % len(kinds)], H=12), 2, int(rng.integers(1 << 30)))
        model = TrajectoryModel(ModelConfig(head=head, H=12, hidden=[6]), seed=int(rng.integers(1 << 30)))
        for name, p in model.store.items():
            if model.store.trainable(name):
                p.value = p.value + rng.normal(0, 0.05, p.value.shape)
        batch = make_batch(samples, model.config.K)
        model.fit_input_normalization(batch.features)
        if _away_from_clamps(model, model.forward(batch), batch):
            made += 1
            yield model, batch


def test_criterion_2_gradients(verdict):
    rng = np.random.default_rng(2)
    cfg = TrainConfig()
    t0 = time.perf_counter()
    worst, failures, instances = 0.0, [], 0
    for head in HEADS:
        for model, batch in _gradient_instances(head, 20, rng):
            instances += 1
            loss = lambda: float(batch_loss(model.forward(batch), batch, cfg).loss.value)
            grads = dict(zip(model.store.names(), ad.backward(batch_loss(model.forward(batch), batch, cfg).loss, model.store)))
            names = [n for n in model.store.names() if model.store.trainable(n)]
            for _ in range(25):
                name = names[rng.integers(len(names))]
                p = model.store[name]
                idx = tuple(int(rng.integers(s)) for s in p.value.shape)
                orig = p.value[idx]
                p.value[idx] = orig + FD_STEP
                up = loss()
                p.value[idx] = orig - FD_STEP
                down = loss()
                p.value[idx] = orig
                numeric = (up - down) / (2 * FD_STEP)
                analytic = float(grads[name][idx])
                err = abs(analytic - numeric)
                scale = max(abs(analytic), abs(numeric))
                tol = max(FD_REL * scale, FD_ABS)
                if err > tol:
                    failures.append(f"{head}:{name}{idx} {analytic:.6g} vs {numeric:.6g}")
                worst = max(worst, err / tol)
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120 and instances >= 20 * len(HEADS)
    detail = f"{instances} instances over {len(HEADS)} heads, worst error/tolerance {worst:.1e}, {elapsed:.1f} s"
    if failures:
        detail += f"; {len(failures)} mismatches, first {failures[0]}"
    verdict(2, "analytic vs central-difference gradients", ok, detail)


# --------------------------------------------------------------------------- 3


def _randomize(model: TrajectoryModel, rng: np.random.Generator) -> None:
    for name, p in model.store.items():
        if model.store.trainable(name):
            p.value = rng.normal(0, 10 ** rng.uniform(-2, 1), p.value.shape)


def _infeasible_modes(model: TrajectoryModel, batch, samples) -> int:
    pred = model.predict_batch(batch)
    own = model.config.head not in POSITION_ONLY_HEADS
    bad = 0
    for b, s in enumerate(samples):
        for m in range(model.config.M):
            path = np.column_stack([pred.positions[b, m], pred.headings[b, m]]) if own else pred.positions[b, m]
            bad += not check_feasibility(path, s.kappa).feasible
    return bad


def test_criterion_3_feasibility(verdict):
    rng = np.random.default_rng(3)
    samples = generate_mix([ScenarioSpec(kind=k) for k in KINDS], 100, seed=30)
    batch = make_batch(samples, 10)
    counts = {}
    for head in ("dkm", "ctra", "poly1"):
        model = TrajectoryModel(ModelConfig(head=head, hidden=[32, 32]), seed=0)
        model.fit_input_normalization(batch.features)
        bad = 0
        for _ in range(100):
            _randomize(model, rng)
            bad += _infeasible_modes(model, batch, samples)
        counts[head] = bad
    slow = generate(ScenarioSpec(kind="brake_to_stop", position_noise=0.05), 300, seed=31)
    um = TrajectoryModel(ModelConfig(head="um"), seed=1)
    um_pct = evaluate(um, slow).infeasible_pct
    ok = all(c == 0 for c in counts.values()) and um_pct > 0
    detail = ", ".join(f"{h} {c}/30000 modes infeasible" for h, c in counts.items()) + f"; untrained UM on slow data {um_pct:.1f}%"
    verdict(3, "feasibility by construction", ok, detail)


# --------------------------------------------------------------------------- 4


@pytest.mark.slow
def test_criterion_4_model_class_recovery(verdict):
    t0 = time.perf_counter()
    specs = [ScenarioSpec(kind=k) for k in KINDS if k != "intersection_multimodal"]
    tr, _, te = split(generate_mix(specs, 5000, seed=0), (3, 1, 1), seed=0)
    model = TrajectoryModel(ModelConfig(head="dkm"), seed=0)
    train(model, tr, desk_config(20_000))
    rep = evaluate(model, te)
    elapsed = time.perf_counter() - t0
    ok = rep.l2_6s <= 0.1 and rep.heading_6s <= 1.0 and elapsed < 1800
    detail = f"l2@6s {rep.l2_6s:.3f} m, heading@6s {rep.heading_6s:.2f} deg, {elapsed:.0f} s"
    verdict(4, "DKM recovers its own model class", ok, detail)


# --------------------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_5_heading_ordering(verdict):
    kinds = ("constant_turn", "right_turn", "s_curve", "brake_to_stop")
    specs = [ScenarioSpec(kind=k, accel_noise=0.3, steer_noise=0.02) for k in kinds]
    tr, _, te = split(generate_mix(specs, 2000, seed=0), (3, 1, 1), seed=0)
    reps = {}
    for head in ("dkm", "um"):
        model = TrajectoryModel(ModelConfig(head=head), seed=0)
        train(model, tr, desk_config(5000))
        reps[head] = evaluate(model, te)
    d, u = reps["dkm"], reps["um"]
    ok = d.heading_6s < u.heading_6s and d.w1_turnrate < u.w1_turnrate
    detail = (
        f"heading@6s DKM {d.heading_6s:.2f} vs UM {u.heading_6s:.2f} deg; "
        f"W1 turn rate DKM {d.w1_turnrate:.4f} vs UM {u.w1_turnrate:.4f}"
    )
    verdict(5, "DKM beats UM on heading and turn-rate distribution", ok, detail)


# --------------------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_multimodal_coverage(verdict):
    spec = ScenarioSpec(kind="intersection_multimodal", branch_probs=(0.5, 0.3, 0.2))
    tr, _, te = split(generate(spec, 3000, seed=0), (3, 1, 1), seed=0)
    model = TrajectoryModel(ModelConfig(head="dkm", M=3), seed=0)
    train(model, tr, desk_config(10_000))
    top = evaluate(model, te)
    best = evaluate(model, te, min_over_n=True)
    ratio = best.l2_6s / top.l2_6s

    # tie each mode to the branch it most often wins, then compare its mean probability
    batch = make_batch(te, model.config.K)
    pred = model.predict_batch(batch)
    err = np.linalg.norm(pred.positions - batch.truth[:, None, :, :2], axis=-1).mean(axis=-1)
    winner = err.argmin(axis=1)
    branch = np.array([s.branch for s in te])
    gaps = []
    for m in range(model.config.M):
        won = branch[winner == m]
        if won.size == 0:
            gaps.append(math.inf)
            continue
        names, hits = np.unique(won, return_counts=True)
        freq = float(np.mean(branch == names[hits.argmax()]))
        gaps.append(abs(float(pred.probs[:, m].mean()) - freq))
    ok = ratio < 0.25 and max(gaps) <= 0.15
    detail = f"min-over-N/top l2@6s {best.l2_6s:.2f}/{top.l2_6s:.2f} = {ratio:.3f}; worst probability gap {max(gaps):.3f}"
    verdict(6, "distinct modes with calibrated probabilities", ok, detail)


# --------------------------------------------------------------------------- 7


def _brute_w1(a, b):
    return min(sum(abs(x - y) for x, y in zip(a, perm)) for perm in itertools.permutations(b)) / len(a)


def test_criterion_7_wasserstein_oracle(verdict):
    values = range(-3, 4)
    checked = mismatched = 0
    for n in range(1, 7):
        # sorted multisets cover every distinct pair; W1 ignores element order
        sets = list(itertools.combinations_with_replacement(values, n))
        pick = np.random.default_rng(n).permutation(len(sets))[:60] if n > 3 else range(len(sets))
        chosen = [sets[i] for i in pick]
        for a in chosen:
            for b in chosen:
                checked += 1
                mismatched += wasserstein_1d(a, b) != _brute_w1(a, b)
    verdict(7, "W1 equals brute-force optimal pairing", mismatched == 0, f"{checked} pairs, {mismatched} mismatches")


# --------------------------------------------------------------------------- 8


def _pipeline(root):
    root.mkdir()
    spec = root / "spec.json"
    spec.write_text('[{"kind": "constant_turn"}, {"kind": "s_curve"}, {"kind": "brake_to_stop"}]')
    cfg = root / "cfg.json"
    cfg.write_text('{"model": {"head": "dkm", "hidden": [32, 32]}, "train": {"lr0": 0.003, "val_every": 500}}')
    data, ckpt, report = root / "data.jsonl", root / "model.json", root / "report.csv"
    assert main(["generate", "--spec", str(spec), "--count", "200", "--seed", "8", "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(ckpt), "--iters", "1000", "--quiet"]) == 0
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--split", "test", "--report", str(report)]) == 0
    return [p.read_bytes() for p in (data, ckpt, report, root / "model.json.metrics.csv", root / "report.csv.hist.csv")]


def test_criterion_8_determinism(verdict, tmp_path, capsys):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    capsys.readouterr()
    same = [x == y for x, y in zip(first, second)]
    verdict(8, "pipeline reruns are byte-identical", all(same), f"{sum(same)}/{len(same)} artifacts identical")
